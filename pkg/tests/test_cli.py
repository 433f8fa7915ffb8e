import json
import os

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from sgquant import sgqMain, training
from sgquant.checkpoint import loadCheckpoint
from sgquant.dataset import loadImageDataset, writePPM
from sgquant.tensor import NonFiniteError

DATA_ARGS = ['--synthetic', '--synthetic-per-class', '5', '--classes', '3', '--seed', '4']
TRAIN_ARGS = DATA_ARGS + ['--resolution', '8', '--arch', 'tiny', '--batch', '8', '--bits', '4', '--quiet']
REAL_CORPUS = os.environ.get('SGQ_SMOKE_DATA')


def train(tmp_path, *extra, name="m.sqck"):
    out = tmp_path / name
    code = sgqMain.main(['train'] + TRAIN_ARGS + ['--out', str(out)] + list(extra))
    return code, out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("run")
    code, out = train(tmp_path, '--epochs', '1')
    assert code == 0
    return out


def test_synth_writes_corpus(tmp_path, capsys):
    out = tmp_path / "corpus"
    code = sgqMain.main(['synth', '--out', str(out), '--per-class', '3', '--classes', '2', '--resolution', '8'])
    assert code == 0
    assert "6 images in 2 classes" in capsys.readouterr().out
    ds = loadImageDataset(out, resolution=8)
    assert ds.classNames == ['class0', 'class1']
    assert len(ds) == 6


def test_train_zero_epochs(tmp_path, capsys):
    code, out = train(tmp_path, '--epochs', '0')
    assert code == 0
    assert out.exists()
    stdout = capsys.readouterr().out
    assert "Checkpoint written to:" in stdout
    assert "Best validation epoch: 0" in stdout
    summary = json.loads((tmp_path / "m-summary.json").read_text())
    assert summary['bestEpoch'] == 0
    assert summary['config']['augment'] is False
    assert loadCheckpoint(out).quantSpec.bits == 4


def test_train_one_epoch_outputs(trained):
    log = pd.read_csv(trained.parent / "m-log.csv")
    assert list(log.columns) == training.LOG_COLUMNS
    assert len(log) == 1
    summary = json.loads((trained.parent / "m-summary.json").read_text())
    assert 0 <= summary['test']['accuracy'] <= 1
    assert summary['config']['mode'] == 'sgt_pact'


def test_train_is_reproducible(tmp_path):
    assert train(tmp_path, '--epochs', '1', name="a.sqck")[0] == 0
    assert train(tmp_path, '--epochs', '1', name="b.sqck")[0] == 0
    assert (tmp_path / "a.sqck").read_bytes() == (tmp_path / "b.sqck").read_bytes()
    assert (tmp_path / "a-log.csv").read_bytes() == (tmp_path / "b-log.csv").read_bytes()


def test_eval_prints_metrics_table(trained, tmp_path, capsys):
    summaryFile = tmp_path / "eval.json"
    code = sgqMain.main(['eval', str(trained), '--summary-file', str(summaryFile)] + DATA_ARGS)
    assert code == 0
    stdout = capsys.readouterr().out
    assert "Model" in stdout and "Accuracy (%)" in stdout and "Specificity (%)" in stdout
    assert "Wilson" in stdout
    summary = json.loads(summaryFile.read_text())
    assert summary['split'] == 'test'
    assert len(summary['confusion']) == 3
    assert summary['metrics']['n'] == 3


def test_eval_default_summary_next_to_checkpoint(trained):
    assert sgqMain.main(['eval', str(trained), '--split', 'all'] + DATA_ARGS) == 0
    summary = json.loads((trained.parent / "m-eval-summary.json").read_text())
    assert summary['metrics']['n'] == 15


def test_eval_rejects_mismatched_corpus(trained, capsys):
    args = ['eval', str(trained), '--synthetic', '--synthetic-per-class', '5', '--classes', '4']
    assert sgqMain.main(args) == 2
    assert "classes" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "absent.sqck"
    assert sgqMain.main(['eval', str(missing)] + DATA_ARGS) == 2
    assert str(missing) in capsys.readouterr().err


def test_quantize_rejects_bad_bit_width(trained):
    assert sgqMain.main(['quantize', str(trained), '--bits', '9']) == 2


def test_quantize_writes_packed_checkpoint(tmp_path, capsys):
    _, floatCkpt = train(tmp_path, '--epochs', '0', '--mode', 'float_baseline', name="f.sqck")
    capsys.readouterr()
    assert sgqMain.main(['quantize', str(floatCkpt), '--bits', '4']) == 0
    stdout = capsys.readouterr().out
    assert "Packed 4-bit checkpoint:" in stdout
    assert "Size ratio:" in stdout
    packed = loadCheckpoint(tmp_path / "f-int4.sqck")
    assert packed.quantSpec.bits == 4 and not packed.quantSpec.quantizeActivations
    assert packed.metadata['meta.ptqBits'] == '4'


def test_quantize_refuses_other_bit_width(trained, capsys):
    assert sgqMain.main(['quantize', str(trained), '--bits', '8']) == 2
    assert "4-bit" in capsys.readouterr().err


def test_saliency_maps_from_test_split(trained, tmp_path, capsys):
    outDir = tmp_path / "maps"
    code = sgqMain.main(['saliency', str(trained), '--limit', '2', '--out', str(outDir)] + DATA_ARGS)
    assert code == 0
    maps = sorted(outDir.glob("*.saliency.pgm"))
    assert len(maps) == 2
    for path in maps:
        assert Image.open(path).size == (8, 8)
    assert "2 saliency map(s)" in capsys.readouterr().out


def test_saliency_map_for_image_file(trained, tmp_path):
    image = tmp_path / "lesion.ppm"
    writePPM(image, np.random.default_rng(0).integers(0, 256, size=(20, 30, 3), dtype=np.uint8))
    outDir = tmp_path / "maps"
    assert sgqMain.main(['saliency', str(trained), str(image), '--out', str(outDir)]) == 0
    assert Image.open(outDir / "lesion.saliency.pgm").size == (8, 8)


def test_saliency_needs_images(trained, tmp_path):
    assert sgqMain.main(['saliency', str(trained), '--out', str(tmp_path)]) == 2


def test_data_source_is_required(tmp_path, capsys):
    assert sgqMain.main(['train', '--epochs', '0', '--out', str(tmp_path / "x.sqck")]) == 2
    assert "--synthetic" in capsys.readouterr().err
    both = ['train', '--synthetic', '--data', str(tmp_path), '--epochs', '0', '--out', str(tmp_path / "x.sqck")]
    assert sgqMain.main(both) == 2


def test_config_file_defaults_and_precedence(tmp_path):
    config = tmp_path / "options.txt"
    config.write_text("# quick run\nepochs = 3\nmask-ratio=0.25\nquiet=true\n")
    code, _ = train(tmp_path, '--config', str(config), '--epochs', '0')
    assert code == 0
    summary = json.loads((tmp_path / "m-summary.json").read_text())
    assert summary['config']['epochs'] == 0
    assert summary['config']['maskRatio'] == 0.25


def test_config_file_unknown_key(tmp_path):
    config = tmp_path / "options.txt"
    config.write_text("learning-rate=0.1\n")
    code, _ = train(tmp_path, '--config', str(config))
    assert code == 2


def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    def diverge(*args):
        raise NonFiniteError("loss is inf")

    monkeypatch.setattr(training, 'trainStep', diverge)
    code, _ = train(tmp_path, '--epochs', '1')
    assert code == 3
    assert "epoch 1, batch 1" in capsys.readouterr().err


def test_compare_modes(tmp_path, capsys):
    results = tmp_path / "runs.csv"
    args = ['compare'] + TRAIN_ARGS + ['--epochs', '1', '--seeds', '1,2', '--modes', 'float_baseline,sgt_pact',
                                       '--out', str(results)]
    assert sgqMain.main(args) == 0
    assert "SGT + PACT" in capsys.readouterr().out
    runs = pd.read_csv(results)
    assert len(runs) == 4
    assert set(runs['mode']) == {'float_baseline', 'sgt_pact'}


def test_compare_rejects_unknown_mode(tmp_path):
    args = ['compare'] + TRAIN_ARGS + ['--epochs', '0', '--modes', 'dorefa']
    assert sgqMain.main(args) == 2


def test_abbreviated_flags_rejected(tmp_path, capsys):
    out = str(tmp_path / "x.sqck")
    assert sgqMain.main(['train', '--synthetic', '--epoch', '0', '--out', out]) == 2
    assert "--epoch" in capsys.readouterr().err
    assert sgqMain.main(['train', '--synth', '--epochs', '0', '--out', out]) == 2
    assert not (tmp_path / "x.sqck").exists()


def test_no_command():
    assert sgqMain.main([]) == 2


@pytest.mark.skipif(not REAL_CORPUS, reason="set SGQ_SMOKE_DATA to a <class>/*.ppm corpus directory")
def test_end_to_end_on_real_corpus(tmp_path, capsys):
    out = tmp_path / "real.sqck"
    data = ['--data', REAL_CORPUS, '--seed', '7']
    assert sgqMain.main(['train'] + data + ['--epochs', '2', '--resolution', '64', '--quiet', '--out', str(out)]) == 0
    capsys.readouterr()
    assert sgqMain.main(['eval', str(out)] + data) == 0
    assert "Accuracy (%) | Sensitivity (%) | Specificity (%)" in capsys.readouterr().out
    maps = tmp_path / "maps"
    assert sgqMain.main(['saliency', str(out), '--limit', '5', '--out', str(maps)] + data) == 0
    assert len(list(maps.glob("*.saliency.pgm"))) == 5
