import struct

import numpy as np
import pytest

from sgquant.checkpoint import MAGIC, PREAMBLE, CheckpointError, loadCheckpoint, readHeader, saveCheckpoint
from sgquant.nn import buildModel
from sgquant.quant import QuantSpec, quantizeWeightsPtq, weightScale
from sgquant.training import TrainConfig, metricsFromPredictions


def sampleImages(shape=(3, 16, 16), n=5, seed=0):
    return np.random.default_rng(seed).uniform(size=(n,) + shape).astype(np.float32)


def smallModel(quantSpec=None, seed=0):
    model = buildModel('small', (3, 16, 16), 4, seed=seed, alphaInit=2.5, quantSpec=quantSpec,
                       classNames=['akiec', 'bcc', 'mel', 'nv'])
    return model.copy(alphas={k: v + 0.125 * i for i, (k, v) in enumerate(model.alphas.items())})


@pytest.mark.parametrize("quantSpec", [None, QuantSpec(bits=4), QuantSpec(bits=8, quantizeActivations=False),
                                       QuantSpec(bits=3, quantizeWeights=False)])
def test_round_trip_forward_is_bit_exact(tmp_path, quantSpec):
    model = smallModel(quantSpec)
    path = tmp_path / "m.sqck"
    size = saveCheckpoint(model, path=path)
    assert size == path.stat().st_size
    loaded = loadCheckpoint(path)
    x = sampleImages()
    assert loaded.predict(x).tobytes() == model.predict(x).tobytes()
    assert loaded.alphas == model.alphas
    assert loaded.quantSpec == model.quantSpec
    assert loaded.classNames == model.classNames
    assert [layer['name'] for layer in loaded.layers] == [layer['name'] for layer in model.layers]


def test_round_trip_after_post_training_quantization(tmp_path):
    model = quantizeWeightsPtq(smallModel(), 2)
    saveCheckpoint(model, path=tmp_path / "ptq.sqck")
    loaded = loadCheckpoint(tmp_path / "ptq.sqck")
    x = sampleImages()
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))
    for name in model.weightNames():
        np.testing.assert_array_equal(loaded.parameters[name].data, model.parameters[name].data)


@pytest.mark.parametrize("bits, ratio", [(8, 0.30), (4, 0.17)])
def test_packed_checkpoint_size(tmp_path, bits, ratio):
    model = buildModel('default', (3, 64, 64), 8, seed=1)
    floatSize = saveCheckpoint(model, path=tmp_path / "float.sqck")
    packedSize = saveCheckpoint(quantizeWeightsPtq(model, bits), path=tmp_path / "packed.sqck")
    assert packedSize <= ratio * floatSize


def test_metadata_round_trip(tmp_path):
    model = smallModel()
    model.metadata = {'seed': 11, 'meta.source': 'unit test'}
    config = TrainConfig(epochs=3, channels=(4, 8), mode='sgt_baseline')
    metrics = metricsFromPredictions([0, 1, 2, 3], [0, 1, 2, 2], 4)
    saveCheckpoint(model, config, metrics, tmp_path / "meta.sqck")
    loaded = loadCheckpoint(tmp_path / "meta.sqck")
    assert loaded.metadata['config.epochs'] == '3'
    assert loaded.metadata['config.mode'] == 'sgt_baseline'
    assert loaded.metadata['config.channels'] == '[4, 8]'
    assert float(loaded.metadata['metrics.accuracy']) == 0.75
    assert loaded.metadata['meta.seed'] == '11'
    assert loaded.metadata['meta.source'] == 'unit test'

    saveCheckpoint(loaded, path=tmp_path / "again.sqck")
    again = loadCheckpoint(tmp_path / "again.sqck")
    assert again.metadata == loaded.metadata
    assert not any(k.startswith('meta.meta.') for k in again.metadata)


def test_read_header(tmp_path):
    saveCheckpoint(smallModel(QuantSpec(bits=4)), path=tmp_path / "h.sqck")
    header, offset, raw = readHeader(tmp_path / "h.sqck")
    assert raw[:4] == MAGIC
    assert header['quant.bits'] == '4'
    assert header['classNames'].split("\n") == ['akiec', 'bcc', 'mel', 'nv']
    assert offset == PREAMBLE.size + PREAMBLE.unpack_from(raw)[2]


def test_packed_blob_leads_with_float32_scale(tmp_path):
    model = smallModel(QuantSpec(bits=4))
    saveCheckpoint(model, path=tmp_path / "s.sqck")
    header, offset, raw = readHeader(tmp_path / "s.sqck")
    name, _, kind = header['tensors'].split(";")[0].split(":")
    assert kind == 'packed'
    (stored,) = struct.unpack_from('<f', raw, offset)
    assert np.float32(stored) == weightScale(model.parameters[name], 4)


def test_truncated_file_fails_cleanly(tmp_path):
    path = tmp_path / "t.sqck"
    saveCheckpoint(smallModel(QuantSpec(bits=4)), path=path)
    raw = path.read_bytes()
    for cut in (3, PREAMBLE.size + 5, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            loadCheckpoint(path)


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.sqck"
    saveCheckpoint(smallModel(), path=path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic") as info:
        loadCheckpoint(path)
    assert info.value.offset == 0


def test_unsupported_version(tmp_path):
    path = tmp_path / "v.sqck"
    saveCheckpoint(smallModel(), path=path)
    raw = path.read_bytes()
    path.write_bytes(raw[:4] + struct.pack('<H', 99) + raw[6:])
    with pytest.raises(CheckpointError, match="version") as info:
        loadCheckpoint(path)
    assert info.value.offset == 4


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "tail.sqck"
    saveCheckpoint(smallModel(), path=path)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        loadCheckpoint(path)


def test_missing_file():
    with pytest.raises(OSError):
        loadCheckpoint("no-such-checkpoint.sqck")
