import json

import pandas as pd
import pytest

from sgquant import utils


def test_format_helpers():
    assert utils.formatNum(2.567, 2) == 2.57
    assert utils.meanSDstr(2.567, 0.089, 2) == '2.57 (0.09)'


@pytest.mark.parametrize("text, expected", [("True", True), ("yes", True), ("1", True), ("False", False),
                                            ("no", False), ("0", False), (True, True)])
def test_str2bool(text, expected):
    assert utils.str2bool(text) is expected


def test_to_screen_prefixes_time(capsys):
    utils.toScreen("hello")
    out = capsys.readouterr().out
    assert out.startswith("\n") and out.rstrip().endswith("\thello")


def test_read_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\n\n--epochs = 5\nmode=sgt_baseline\nname=a=b\n")
    options = utils.readConfigFile(path)
    assert list(options.items()) == [('epochs', '5'), ('mode', 'sgt_baseline'), ('name', 'a=b')]
    path.write_text("epochs\n")
    with pytest.raises(ValueError, match=":1:"):
        utils.readConfigFile(path)


def test_append_log_row_writes_header_once(tmp_path):
    log = tmp_path / "log.csv"
    columns = ['epoch', 'train_loss']
    utils.appendLogRow(str(log), {'epoch': 1, 'train_loss': 0.5}, columns)
    utils.appendLogRow(str(log), {'train_loss': 0.25, 'epoch': 2}, columns)
    assert log.read_text().splitlines() == ['epoch,train_loss', '1,0.5', '2,0.25']


def test_write_cmds(tmp_path):
    cmds = tmp_path / "cmds.txt"
    utils.writeCmds("imgs/", "runs/", str(cmds), modes=('sgt_pact',), seeds=(1, 2), cmdOptions="--epochs 5")
    lines = cmds.read_text().splitlines()
    assert lines == [
        "sgq train --data 'imgs/' --mode sgt_pact --seed 1 --out 'runs/sgt_pact-seed1.sqck' --epochs 5",
        "sgq train --data 'imgs/' --mode sgt_pact --seed 2 --out 'runs/sgt_pact-seed2.sqck' --epochs 5",
    ]
    utils.writeCmds(None, "runs", str(cmds), modes=('sgt_baseline',), seeds=(3,))
    expected = "sgq train --synthetic --mode sgt_baseline --seed 3 --out 'runs/sgt_baseline-seed3.sqck'\n"
    assert cmds.read_text() == expected


def test_collate_summary(tmp_path):
    (tmp_path / "a").mkdir()
    utils.writeSummary({'config': {'mode': 'sgt_pact'}, 'test': {'accuracy': 0.9}},
                       tmp_path / "a" / "run1-summary.json")
    utils.writeSummary({'config': {'mode': 'sgt_baseline'}, 'test': {'accuracy': 0.8}},
                       tmp_path / "run2-summary.json")
    (tmp_path / "notes.json").write_text(json.dumps({'x': 1}))
    out = tmp_path / "all.csv"
    summary = utils.collateSummary(tmp_path, str(out))
    assert list(summary['run']) == ['run1', 'run2']
    assert list(summary['test.accuracy']) == [0.9, 0.8]
    assert pd.read_csv(out).columns[0] == 'run'
