"""Module to provide generic utilities for other sgquant modules."""

from collections import OrderedDict
import datetime
import json
import os
import pathlib
import pandas as pd
from tqdm.auto import tqdm


def formatNum(num, decimalPlaces):
    """return number rounded to decimalPlaces

    :param float num: Float number to be formatted.
    :param int decimalPlaces: Number of decimal places for output format
    :return: Number formatted to number of decimalPlaces
    :rtype: float

    :Example:
    >>> from sgquant import utils
    >>> utils.formatNum(2.567, 2)
    2.57
    """

    fmt = '%.' + str(decimalPlaces) + 'f'
    return float(fmt % num)


def meanSDstr(mean, std, numDecimalPlaces):
    """return str of mean and stdev numbers formatted to number of decimalPlaces

    :param float mean: Mean number to be formatted.
    :param float std: Standard deviation number to be formatted.
    :param int decimalPlaces: Number of decimal places for output format
    :return: String formatted to number of decimalPlaces
    :rtype: str

    :Example:
    >>> from sgquant import utils
    >>> utils.meanSDstr(2.567, 0.089, 2)
    '2.57 (0.09)'
    """
    return f"{formatNum(mean, numDecimalPlaces)} ({formatNum(std, numDecimalPlaces)})"


def toScreen(msg):
    """Print msg str prepended with current time

    :param str mgs: Message to be printed to screen
    :return: Print msg str prepended with current time
    :rtype: void

    :Example:
    >>> from sgquant import utils
    >>> utils.toScreen("hello")
    2026-10-17 10:53:18    hello
    """

    timeFormat = '%Y-%m-%d %H:%M:%S'
    print(f"\n{datetime.datetime.now().strftime(timeFormat)}\t{msg}")


def str2bool(v):
    """
    Used to parse true/false values from the command line. E.g. "True" -> True
    """

    if isinstance(v, bool):
        return v
    return v.lower() in ("yes", "true", "t", "1")


def readConfigFile(configFile):
    """Read a key=value options file.

    Blank lines and lines starting with '#' are ignored. Keys are long flag
    names without the leading dashes, e.g. ``mask-ratio=0.3``.

    :param str configFile: Path to the options file
    :return: Mapping key -> raw string value, in file order
    :rtype: OrderedDict
    """

    options = OrderedDict()
    with open(configFile, 'r') as f:
        for lineNo, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ValueError(f"{configFile}:{lineNo}: expected key=value, got '{line}'")
            key, value = (s.strip() for s in line.split('=', 1))
            options[key.lstrip('-')] = value
    return options


def appendLogRow(logFile, row, columns):
    """Append one row to a CSV log, writing the header on first use.

    :param str logFile: Output CSV
    :param dict row: column -> value
    :param list columns: Column order
    """

    header = not os.path.exists(logFile) or os.path.getsize(logFile) == 0
    pd.DataFrame([row], columns=columns).to_csv(logFile, mode='a', header=header, index=False)


def writeSummary(summary, summaryFile):
    """Write a summary dict as indented JSON."""

    with open(summaryFile, 'w') as f:
        json.dump(summary, f, indent=4)


def writeCmds(dataDir, outDir, cmdsFile='list-of-commands.txt', modes=('sgt_baseline', 'sgt_pact'),
              seeds=(1, 2, 3), cmdOptions=""):
    """Generate a text file listing one training command per mode and seed

    :param str dataDir: Image corpus directory, or None for the synthetic corpus
    :param str outDir: Output directory that will hold one checkpoint per run
    :param str cmdsFile: Output .txt file listing all training commands
    :param modes: Training modes to run
    :param seeds: Seeds to run every mode with
    :param str cmdOptions: Extra training options e.g. "--epochs 20 --bits 4"

    :return: New file written to <cmdsFile>
    :rtype: void

    :Example:
    >>> from sgquant import utils
    >>> utils.writeCmds("myImages/", "myResults/", "myTrainCmds.txt")
    <cmd options written to "myTrainCmds.txt">
    """

    source = "--synthetic" if dataDir is None else f"--data '{dataDir}'"
    with open(cmdsFile, 'w') as f:
        for mode in modes:
            for seed in seeds:
                out = os.path.join(outDir.rstrip("/"), f"{mode}-seed{seed}.sqck")
                cmd = f"sgq train {source} --mode {mode} --seed {seed} --out '{out}' {cmdOptions}"
                f.write(cmd.rstrip())
                f.write('\n')

    print('List of commands written to ', cmdsFile)


def collateSummary(resultsDir, outputCsvFile="all-summary.csv"):
    """Read all *-summary.json files under <resultsDir> and merge into one CSV file

    Each json file holds the configuration and test metrics of one training
    run, so the output CSV has one row per run.

    :param str resultsDir: Directory containing JSON files
    :param str outputCsvFile: Output CSV filename

    :return: Merged summaries
    :rtype: pd.DataFrame

    :Example:
    >>> from sgquant import utils
    >>> utils.collateSummary("runs/", "runs/all-summary.csv")
    <summary CSV of all runs written to "runs/all-summary.csv">
    """

    sumfiles = sorted(str(p) for p in pathlib.Path(resultsDir).rglob("*-summary.json"))

    print(f"Found {len(sumfiles)} summary files...")
    jdicts = []
    for file in tqdm(sumfiles):
        with open(file, 'r') as f:
            jdicts.append(json.load(f, object_pairs_hook=OrderedDict))

    summary = pd.json_normalize(jdicts)  # nested config/metrics -> dotted columns
    if len(summary):
        summary['run'] = [pathlib.Path(f).name[:-len("-summary.json")] for f in sumfiles]
        summary = summary[['run'] + [c for c in summary.columns if c != 'run']]
    summary.to_csv(outputCsvFile, index=False)
    print('Summary of', str(len(summary)), 'runs written to:', outputCsvFile)
    return summary
