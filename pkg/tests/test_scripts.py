import numpy as np
import pandas as pd
import pytest

from sgquant import sgqCollateSummary, sgqPlot, sgqWriteCmds, utils
from sgquant.training import LOG_COLUMNS


def writeLog(path, epochs=3):
    rows = [{'epoch': e, 'train_loss': 1.0 / e, 'val_accuracy': 0.5 + 0.1 * e,
             'val_sensitivity': 0.5, 'val_specificity': 0.9} for e in range(1, epochs + 1)]
    pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(path, index=False)


def test_plot_log_default_output_name(tmp_path):
    log = tmp_path / "model-log.csv"
    writeLog(log)
    assert sgqPlot.main([str(log), '--showFileName', 'True']) == 0
    assert (tmp_path / "model-log-plot.png").stat().st_size > 0


def test_plot_needs_arguments():
    assert sgqPlot.main([]) == 2


def test_plot_rejects_incomplete_log():
    with pytest.raises(ValueError, match="missing columns"):
        sgqPlot.plotTrainingLog(pd.DataFrame({'epoch': [1], 'train_loss': [0.3]}))


def test_saliency_overlay(tmp_path):
    image = np.random.default_rng(0).uniform(size=(1, 8, 8))
    sgqPlot.plotSaliencyOverlay(image, np.eye(8), tmp_path / "overlay.png")
    assert (tmp_path / "overlay.png").exists()


def test_collate_summary_script(tmp_path):
    utils.writeSummary({'test': {'accuracy': 0.5}}, tmp_path / "r-summary.json")
    out = tmp_path / "all.csv"
    sgqCollateSummary.main([str(tmp_path), '-o', str(out)])
    assert list(pd.read_csv(out)['run']) == ['r']


def test_write_cmds_script(tmp_path):
    cmds = tmp_path / "cmds.txt"
    sgqWriteCmds.main(['-d', 'out', '-f', str(cmds), '-m', 'sgt_pact,float_baseline', '-s', '7'])
    lines = cmds.read_text().splitlines()
    assert len(lines) == 2
    assert all(line.startswith("sgq train --synthetic") for line in lines)
    assert "--mode float_baseline --seed 7" in lines[1]
