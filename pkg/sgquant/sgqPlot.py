"""Script to plot training logs and saliency overlays."""

import argparse
import os
import sys
import numpy as np
import pandas as pd
import matplotlib
import matplotlib.pyplot as plt

from sgquant import utils

METRIC_COLORS = {
    'val_accuracy': 'midnightblue',
    'val_sensitivity': 'seagreen',
    'val_specificity': 'darkorange',
}


def main(argv=None):
    """
    Application entry point responsible for parsing command line requests
    """

    parser = argparse.ArgumentParser(
        description="A script to plot the per-epoch training log.", add_help=True)
    # required
    parser.add_argument('logFile', metavar='input file', type=str,
                        help="input <stem>-log.csv written by 'sgq train'")
    parser.add_argument('--plotFile', metavar='output file', type=str,
                        help="output .png file to plot to")
    parser.add_argument('--showFileName',
                        metavar='True/False', default=False, type=utils.str2bool,
                        help="""Toggle showing filename as title in output
                            image (default : %(default)s)""")

    argv = sys.argv[1:] if argv is None else argv
    if len(argv) < 1:
        msg = "\nInvalid input, please enter at least 1 parameter, e.g."
        msg += "\nsgqPlot model-log.csv \n"
        utils.toScreen(msg)
        parser.print_help()
        return 2
    args = parser.parse_args(argv)

    # determine output file name
    if args.plotFile is None:
        inputFileFolder, inputFileName = os.path.split(args.logFile)
        inputFileName = inputFileName.split('.')[0]  # remove any extension
        args.plotFile = os.path.join(inputFileFolder, inputFileName + "-plot.png")

    log = pd.read_csv(args.logFile)

    # set backend if run from main
    matplotlib.use('Agg')

    title = args.logFile if args.showFileName else None
    fig = plotTrainingLog(log, title=title)
    fig.savefig(args.plotFile, dpi=200, bbox_inches='tight')
    plt.close(fig)
    print('Plot file written to:', args.plotFile)
    return 0


def plotTrainingLog(log, title=None):
    """Plot training loss and validation metrics against epoch

    :param pd.DataFrame log: Per-epoch log with columns epoch, train_loss,
        val_accuracy, val_sensitivity, val_specificity
    :param str title: Optional plot title

    :return: pyplot Figure
    :rtype: plt.Figure

    :Example:
    >>> from sgquant.sgqPlot import plotTrainingLog
    >>> fig = plotTrainingLog(pd.read_csv("model-log.csv"))
    >>> fig.show()
    """

    missing = {'epoch', 'train_loss', *METRIC_COLORS} - set(log.columns)
    if missing:
        raise ValueError(f"log is missing columns {sorted(missing)}")

    fig, (axLoss, axMetric) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    axLoss.plot(log['epoch'], log['train_loss'], color='red', marker='o', markersize=3)
    axLoss.set_ylabel('train loss')
    for col, color in METRIC_COLORS.items():
        axMetric.plot(log['epoch'], 100 * log[col], color=color, marker='o', markersize=3,
                      label=col.replace('val_', ''))
    axMetric.set_ylabel('validation (%)')
    axMetric.set_xlabel('epoch')
    axMetric.set_ylim(0, 100)
    axMetric.legend(loc='lower right', frameon=False)
    for ax in (axLoss, axMetric):
        ax.spines['top'].set_visible(False)
        ax.spines['right'].set_visible(False)
    if title:
        fig.suptitle(title)
    return fig


def plotSaliencyOverlay(image, saliencyValues, plotFile, alpha=0.5):
    """Draw a normalized saliency map over its input image and save as PNG

    :param np.ndarray image: (C, H, W) image with values in [0, 1]
    :param np.ndarray saliencyValues: (H, W) map with values in [0, 1]
    :param str plotFile: Output .png file
    :param float alpha: Opacity of the saliency layer

    :return: None
    :rtype: void
    """

    image = np.asarray(image)
    rgb = image.transpose(1, 2, 0)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.clip(rgb, 0, 1), interpolation='nearest')
    ax.imshow(saliencyValues, cmap='inferno', alpha=alpha, vmin=0, vmax=1, interpolation='nearest')
    ax.set_axis_off()
    fig.savefig(plotFile, dpi=100, bbox_inches='tight')
    plt.close(fig)


if __name__ == '__main__':
    sys.exit(main())
