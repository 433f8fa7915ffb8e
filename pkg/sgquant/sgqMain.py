"""Command line tool to train, evaluate, quantize and explain saliency-guided
quantized image classifiers."""

import argparse
import dataclasses
import datetime
import os
import pathlib
import sys
import time
import numpy as np
import pandas as pd

from sgquant import checkpoint, dataset, saliency, training, utils
from sgquant.quant import MAX_BITS, MIN_BITS, quantizeWeightsPtq
from sgquant.tensor import NonFiniteError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

MODE_LABELS = {
    'float_baseline': 'Float baseline',
    'sgt_baseline': 'SGT baseline',
    'sgt_pact': 'SGT + PACT',
}


class UsageError(ValueError):
    """Raised for inconsistent command line options."""


def bitsType(v):
    k = int(v)
    if not MIN_BITS <= k <= MAX_BITS:
        raise argparse.ArgumentTypeError(f"bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {k}")
    return k


def ratioType(v):
    r = float(v)
    if not 0 <= r < 1:
        raise argparse.ArgumentTypeError(f"mask ratio must be in [0, 1), got {r}")
    return r


def intListType(v):
    return [int(s) for s in str(v).split(',') if s.strip()]


def addDataArgs(parser):
    group = parser.add_argument_group('data')
    group.add_argument('--data', metavar='DIR', default=None,
                       help="corpus directory laid out as <DIR>/<class>/*.ppm")
    group.add_argument('--synthetic', action='store_true',
                       help="use the generated blob-position corpus instead of --data")
    group.add_argument('--synthetic-per-class', dest='syntheticPerClass', metavar='N', type=int, default=250,
                       help="synthetic samples per class (default : %(default)s)")
    group.add_argument('--synthetic-noise', dest='syntheticNoise', metavar='SIGMA', type=float, default=0.1,
                       help="synthetic pixel noise standard deviation (default : %(default)s)")
    group.add_argument('--classes', type=int, default=8,
                       help="number of synthetic classes (default : %(default)s)")
    group.add_argument('--jobs', type=int, default=1,
                       help="parallel image decoding workers (default : %(default)s)")
    group.add_argument('--seed', type=int, default=training.TrainConfig.seed,
                       help="seed for splitting, synthesis and training (default : %(default)s)")


def addTrainArgs(parser):
    d = training.TrainConfig()
    group = parser.add_argument_group('training')
    group.add_argument('--mode', choices=training.MODES, default=d.mode,
                       help="training mode (default : %(default)s)")
    group.add_argument('--bits', type=bitsType, default=d.bits,
                       help="bit-width k for weights and activations (default : %(default)s)")
    group.add_argument('--mask-ratio', dest='maskRatio', type=ratioType, default=d.maskRatio,
                       help="fraction of least salient features masked (default : %(default)s)")
    group.add_argument('--epochs', type=int, default=d.epochs,
                       help="training epochs (default : %(default)s)")
    group.add_argument('--batch', dest='batchSize', type=int, default=d.batchSize,
                       help="batch size (default : %(default)s)")
    group.add_argument('--lr', type=float, default=d.lr,
                       help="Adam learning rate (default : %(default)s)")
    group.add_argument('--alpha-lr', dest='alphaLr', type=float, default=d.alphaLr,
                       help="PACT clipping level learning rate (default : %(default)s)")
    group.add_argument('--alpha-init', dest='alphaInit', type=float, default=d.alphaInit,
                       help="initial PACT clipping level (default : %(default)s)")
    group.add_argument('--eta', dest='alphaReg', type=float, default=d.alphaReg,
                       help="clipping level regulariser (default : %(default)s)")
    group.add_argument('--lambda1', type=float, default=d.lambda1,
                       help="KL consistency weight (default : %(default)s)")
    group.add_argument('--lambda2', type=float, default=d.lambda2,
                       help="saliency L1 weight (default : %(default)s)")
    group.add_argument('--resolution', type=int, default=d.resolution,
                       help="image side length after resizing (default : %(default)s)")
    group.add_argument('--arch', default=d.arch,
                       help="registered architecture (default : %(default)s)")
    group.add_argument('--channels', type=intListType, default=None,
                       help="override conv channel widths e.g. 16,32,64")
    group.add_argument('--hidden', type=int, default=None,
                       help="override hidden dense width (0 for none)")
    group.add_argument('--saliency-source', dest='saliencySource', choices=saliency.SOURCES, default=None,
                       help="saliency target: loss gradient or true-class logit "
                            "(default : logit for sgt_baseline, loss otherwise)")
    group.add_argument('--quantize-activations', dest='quantizeActivations',
                       metavar='True/False', default=True, type=utils.str2bool,
                       help="fake-quantize PACT activations in sgt_pact mode (default : %(default)s)")
    group.add_argument('--quantize-weights', dest='quantizeWeights',
                       metavar='True/False', default=True, type=utils.str2bool,
                       help="fake-quantize weights in sgt_pact mode (default : %(default)s)")
    group.add_argument('--augment', metavar='True/False', default=None, type=utils.str2bool,
                       help="""online rotation/flip/jitter augmentation (default : True
                            with --data, False with --synthetic whose classes are
                            blob positions)""")
    group.add_argument('--quiet', action='store_true', help="hide progress bars and epoch lines")


def buildParser():
    parser = argparse.ArgumentParser(
        prog='sgq', allow_abbrev=False,
        description="""Saliency-guided quantization-aware training of small
            image classifiers.""", add_help=True
    )
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True

    p = subparsers.add_parser('train', allow_abbrev=False, help="train a classifier and write its checkpoint")
    addDataArgs(p)
    addTrainArgs(p)
    p.add_argument('--out', default='model.sqck', help="checkpoint file (default : %(default)s)")
    p.set_defaults(func=cmdTrain)

    p = subparsers.add_parser('eval', allow_abbrev=False, help="report metrics of a checkpoint on a corpus split")
    p.add_argument('checkpoint', help="checkpoint file")
    addDataArgs(p)
    p.add_argument('--split', choices=dataset.SPLITS + ('all',), default='test',
                   help="split to evaluate (default : %(default)s)")
    p.add_argument('--batch', dest='batchSize', type=int, default=training.TrainConfig.batchSize)
    p.add_argument('--summary-file', dest='summaryFile', default=None,
                   help="metrics JSON (default : <checkpoint stem>-eval-summary.json)")
    p.set_defaults(func=cmdEval)

    p = subparsers.add_parser('quantize', allow_abbrev=False, help="post-training quantize a checkpoint")
    p.add_argument('checkpoint', help="float checkpoint file")
    p.add_argument('--bits', type=bitsType, required=True, help="bit-width k")
    p.add_argument('--out', default=None, help="output checkpoint (default : <stem>-int<k>.sqck)")
    p.add_argument('--quantize-activations', dest='quantizeActivations', action='store_true',
                   help="also quantize PACT activations at k bits")
    p.set_defaults(func=cmdQuantize)

    p = subparsers.add_parser('saliency', allow_abbrev=False, help="export saliency maps for images")
    p.add_argument('checkpoint', help="checkpoint file")
    p.add_argument('images', nargs='*', help="PPM images")
    addDataArgs(p)
    p.add_argument('--limit', type=int, default=8,
                   help="test-split images taken from --data/--synthetic (default : %(default)s)")
    p.add_argument('--saliency-source', dest='saliencySource', choices=saliency.SOURCES, default='loss')
    p.add_argument('--overlay', action='store_true', help="also write a PNG overlay per image")
    p.add_argument('--out', default='saliency', help="output directory (default : %(default)s)")
    p.set_defaults(func=cmdSaliency)

    p = subparsers.add_parser('synth', allow_abbrev=False, help="write the synthetic corpus as PPM files")
    p.add_argument('--out', required=True, help="output corpus directory")
    p.add_argument('--per-class', dest='perClass', type=int, default=250)
    p.add_argument('--classes', type=int, default=8)
    p.add_argument('--resolution', type=int, default=training.TrainConfig.resolution)
    p.add_argument('--noise', type=float, default=0.1)
    p.add_argument('--seed', type=int, default=training.TrainConfig.seed)
    p.set_defaults(func=cmdSynth)

    p = subparsers.add_parser('compare', allow_abbrev=False, help="compare training modes over several seeds")
    addDataArgs(p)
    addTrainArgs(p)
    p.add_argument('--modes', type=lambda v: v.split(','), default=['sgt_baseline', 'sgt_pact'])
    p.add_argument('--seeds', type=intListType, default=[1, 2, 3])
    p.add_argument('--out', default=None, help="per-run results CSV")
    p.set_defaults(func=cmdCompare)

    for sub in subparsers.choices.values():
        sub.add_argument('--config', metavar='FILE', default=None,
                         help="key=value options file; command line flags take precedence")
    return parser


def applyConfigFile(parser, argv):
    """Install --config file values as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument('--config', default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None or not argv:
        return
    options = utils.readConfigFile(known.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(argv[0])
    if sub is None:
        parser.error(f"--config needs a command first, got '{argv[0]}'")
    flags = {s[2:]: a for a in sub._actions for s in a.option_strings if s.startswith('--')}
    defaults = {}
    for key, value in options.items():
        action = flags.get(key)
        if action is None or key in ('config', 'help'):
            sub.error(f"unknown key '{key}' in config file {known.config}")
        defaults[action.dest] = utils.str2bool(value) if action.nargs == 0 else value
    sub.set_defaults(**defaults)


def configFromArgs(args):
    values = {f: getattr(args, f) for f in training.TrainConfig.fieldNames() if hasattr(args, f)}
    if values.get('channels') is not None:
        values['channels'] = tuple(values['channels'])
    if values.get('augment') is None:
        # a rotated synthetic sample shows another class's blob position
        values['augment'] = not getattr(args, 'synthetic', False)
    return training.TrainConfig(**values).validate()


def loadData(args, resolution, seed=None):
    """Split corpus selected by --data or --synthetic."""
    seed = args.seed if seed is None else seed
    if args.data and args.synthetic:
        raise UsageError("--data and --synthetic are mutually exclusive")
    if args.data:
        ds = dataset.loadImageDataset(args.data, resolution, nJobs=args.jobs)
    elif args.synthetic:
        ds = dataset.syntheticDataset(args.syntheticPerClass, args.classes, resolution,
                                      seed=seed, noise=args.syntheticNoise)
    else:
        raise UsageError("one of --data or --synthetic is required")
    return dataset.splitDataset(ds, seed=seed)


def printOptions(args):
    for key, value in sorted(vars(args).items()):
        if key == 'func' or (isinstance(value, str) and len(value) == 0):
            continue
        print(key.ljust(25), ':', value)


def printMetricsTable(rows):
    """Print rows of (label, accuracy, sensitivity, specificity) as percentages."""
    print(f"{'Model':<24} | Accuracy (%) | Sensitivity (%) | Specificity (%)")
    for label, acc, sens, spec in rows:
        print(f"{label:<24} | {acc:>12} | {sens:>15} | {spec:>15}")


def metricsRow(label, metrics):
    return (label, f"{100 * metrics.accuracy:.2f}", f"{100 * metrics.sensitivity:.2f}",
            f"{100 * metrics.specificity:.2f}")


def cmdTrain(args):
    startTime = datetime.datetime.now()
    config = configFromArgs(args)
    ds = loadData(args, config.resolution)

    out = pathlib.Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    stem = str(out.parent / out.stem)
    logFile, summaryFile = stem + "-log.csv", stem + "-summary.json"
    training.resetLog(logFile)

    print(f"Training with these arguments:\n")
    printOptions(args)
    print(ds.summary().to_string())

    utils.toScreen("=== Training ===")
    result = training.trainModel(config, ds, str(out), logFile, verbose=not args.quiet)

    testX, testY, _ = ds.split('test')
    test = training.evaluateMetrics(result.model, testX, testY, config.batchSize)
    print(f"\nBest validation epoch: {result.bestEpoch}")
    printMetricsTable([
        metricsRow(f"{MODE_LABELS[config.mode]} (val)", result.valMetrics),
        metricsRow(f"{MODE_LABELS[config.mode]} (test)", test),
    ])

    summary = {
        'checkpoint': str(out),
        'bestEpoch': result.bestEpoch,
        'config': config.asDict(),
        'val': result.valMetrics.asDict(),
        'test': test.asDict(),
    }
    utils.writeSummary(summary, summaryFile)
    print('Checkpoint written to:', out)
    print('Epoch log written to:', logFile)
    print('Summary written to:', summaryFile)

    processingTime = (datetime.datetime.now() - startTime).total_seconds()
    utils.toScreen("In total, training took " + str(processingTime) + " seconds")
    return EXIT_OK


def cmdEval(args):
    model = checkpoint.loadCheckpoint(args.checkpoint)
    ds = loadData(args, model.inputShape[1])
    if ds.numClasses != model.numClasses or ds.imageShape != model.inputShape:
        raise UsageError(f"corpus has {ds.numClasses} classes of shape {ds.imageShape}, "
                         f"checkpoint expects {model.numClasses} of shape {model.inputShape}")
    images, labels, _ = ds.split(args.split)

    startTime = time.perf_counter()
    metrics = training.evaluateMetrics(model, images, labels, args.batchSize)
    elapsed = time.perf_counter() - startTime

    stem = pathlib.Path(args.checkpoint).stem
    printMetricsTable([metricsRow(stem, metrics)])
    lower, upper = metrics.accuracyCI()
    print(f"\nAccuracy 95% CI (Wilson): {100 * lower:.2f} - {100 * upper:.2f} (n={metrics.total})")
    print("\nConfusion matrix (rows = true, columns = predicted):")
    print(metrics.confusionFrame().to_string())
    print("\nPer-class metrics:")
    print(metrics.perClass().round(4).to_string())
    utils.toScreen(f"Mean inference latency {1000 * elapsed / len(labels):.3f} ms per image")

    summaryFile = args.summaryFile or os.path.join(os.path.dirname(args.checkpoint) or ".",
                                                   stem + "-eval-summary.json")
    summary = {'checkpoint': args.checkpoint, 'split': args.split, 'metrics': metrics.asDict(),
               'confusion': metrics.confusion.tolist()}
    utils.writeSummary(summary, summaryFile)
    print('Summary written to:', summaryFile)
    return EXIT_OK


def cmdQuantize(args):
    source = checkpoint.loadCheckpoint(args.checkpoint)
    spec = source.quantSpec
    if spec is not None and spec.quantizeWeights and spec.bits != args.bits:
        raise UsageError(f"{args.checkpoint} already holds {spec.bits}-bit weights, "
                         f"cannot re-quantize to {args.bits} bits")
    quantizeActivations = args.quantizeActivations or (spec is not None and spec.quantizeActivations)
    model = quantizeWeightsPtq(source, args.bits, quantizeActivations=quantizeActivations)
    model.metadata['meta.ptqBits'] = str(args.bits)

    out = args.out or str(pathlib.Path(args.checkpoint).with_suffix('')) + f"-int{args.bits}.sqck"
    checkpoint.saveCheckpoint(model, path=out)

    inSize, outSize = os.path.getsize(args.checkpoint), os.path.getsize(out)
    print(f"Input checkpoint:  {inSize} bytes")
    print(f"Packed {args.bits}-bit checkpoint: {outSize} bytes")
    print(f"Size ratio: {outSize / inSize:.4f}")
    print('Quantized checkpoint written to:', out)
    return EXIT_OK


def cmdSaliency(args):
    model = checkpoint.loadCheckpoint(args.checkpoint)
    resolution = model.inputShape[1]
    items = [(pathlib.Path(p).stem, dataset.decodeImage(p, resolution)) for p in args.images]
    if args.data or args.synthetic:
        ds = loadData(args, resolution)
        images, _, idx = ds.split('test')
        items += [(ds.names[i], image) for i, image in zip(idx[:args.limit], images[:args.limit])]
    if not items:
        raise UsageError("no images given: pass image paths, --data or --synthetic")

    outDir = pathlib.Path(args.out)
    outDir.mkdir(parents=True, exist_ok=True)
    if args.overlay:
        import matplotlib
        matplotlib.use('Agg')
        from sgquant.sgqPlot import plotSaliencyOverlay

    for stem, image in items:
        batch = image[None]
        predicted = int(model.predict(batch).argmax(axis=1)[0])
        s = saliency.computeSaliency(model, batch, [predicted], source=args.saliencySource)
        record = saliency.exportSaliencyMap(s.data[0], outDir / f"{stem}.saliency.pgm", sourceLabel=predicted)
        if args.overlay:
            plotSaliencyOverlay(image, record.values, outDir / f"{stem}.saliency.png")
        print(f"{stem}\t{model.classNames[predicted]}")
    print(f"{len(items)} saliency map(s) written to: {outDir}")
    return EXIT_OK


def cmdSynth(args):
    ds = dataset.syntheticDataset(args.perClass, args.classes, args.resolution,
                                  seed=args.seed, noise=args.noise)
    n = dataset.writeImageFolder(ds, args.out)
    print(f"{n} images in {ds.numClasses} classes written to: {args.out}")
    return EXIT_OK


def cmdCompare(args):
    startTime = datetime.datetime.now()
    base = configFromArgs(args)
    for mode in args.modes:
        if mode not in training.MODES:
            raise UsageError(f"unknown mode '{mode}', choose from {training.MODES}")

    runs = []
    for seed in args.seeds:
        ds = loadData(args, base.resolution, seed=seed)
        testX, testY, _ = ds.split('test')
        for mode in args.modes:
            config = dataclasses.replace(base, mode=mode, seed=seed).validate()
            utils.toScreen(f"=== {MODE_LABELS[mode]}, seed {seed} ===")
            result = training.trainModel(config, ds, verbose=not args.quiet)
            test = training.evaluateMetrics(result.model, testX, testY, config.batchSize)
            runs.append({'mode': mode, 'seed': seed, 'accuracy': test.accuracy,
                         'sensitivity': test.sensitivity, 'specificity': test.specificity})

    runs = pd.DataFrame(runs)
    rows = []
    for mode in args.modes:
        r = runs[runs['mode'] == mode]
        cells = [utils.meanSDstr(100 * r[col].mean(), 100 * np.nan_to_num(r[col].std()), 2)
                 for col in ('accuracy', 'sensitivity', 'specificity')]
        rows.append((MODE_LABELS[mode], *cells))
    print(f"\nTest metrics, mean (SD) over seeds {args.seeds}:")
    printMetricsTable(rows)
    if args.out:
        runs.to_csv(args.out, index=False)
        print('Per-run results written to:', args.out)

    processingTime = (datetime.datetime.now() - startTime).total_seconds()
    utils.toScreen("In total, comparison took " + str(processingTime) + " seconds")
    return EXIT_OK


def main(argv=None):
    """
    Application entry point responsible for parsing command line requests
    """

    argv = sys.argv[1:] if argv is None else list(argv)
    parser = buildParser()
    try:
        applyConfigFile(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return args.func(args)
    except (training.DivergenceError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as e:
        # DatasetError, CheckpointError and UsageError are ValueErrors
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
