"""Module to save and load model checkpoints.

File layout, little-endian throughout::

    b"SQCK" | u16 version | u32 header length | UTF-8 header | tensor blobs

The header is flat ``key=value`` lines with percent-quoted values. Blobs
follow in parameter declaration order: float32 values, or a float32 scale
followed by the packed k-bit codes of a quantized weight.
"""

import pathlib
import struct
from urllib.parse import quote, unquote
import numpy as np

from sgquant import models
from sgquant.nn import Model
from sgquant.quant import QuantSpec, packWeights, packedSize, quantizeWeightsQat, unpackWeights, weightScale
from sgquant.tensor import Tensor

MAGIC = b"SQCK"
VERSION = 1
PREAMBLE = struct.Struct('<4sHI')
METADATA_PREFIXES = ('config.', 'metrics.', 'meta.')


class CheckpointError(ValueError):
    """Raised for a corrupt or unsupported checkpoint file."""

    def __init__(self, msg, offset):
        self.offset = offset
        super().__init__(f"{msg} (at byte offset {offset})")


def _shapeStr(shape):
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parseShape(text):
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def _encodeTensors(model):
    """Header entry and blobs for every parameter.

    Quantized weights are stored as their fake-quantized values, which is
    what the forward pass sees, so a reloaded model reproduces it exactly.
    """
    spec = model.quantSpec
    packWeightsToo = spec is not None and spec.quantizeWeights
    entries, blobs = [], []
    for name in model.parameterNames():
        t = model.parameters[name]
        if packWeightsToo and name.endswith('.weight'):
            s = weightScale(t, spec.bits)
            q = quantizeWeightsQat(t, spec.bits)
            blobs.append(struct.pack('<f', s) + packWeights(q, spec.bits, s))
            entries.append(f"{name}:{_shapeStr(t.shape)}:packed")
        else:
            blobs.append(np.ascontiguousarray(t.data, dtype='<f4').tobytes())
            entries.append(f"{name}:{_shapeStr(t.shape)}:float")
    return ";".join(entries), blobs


def saveCheckpoint(model, config=None, metrics=None, path="model.sqck"):
    """Serialize a model with its training metadata.

    :param Model model: Model to store
    :param TrainConfig config: Training configuration echoed in the header
    :param Metrics metrics: Metrics echoed in the header
    :param str path: Output file

    :return: Number of bytes written
    :rtype: int
    """
    spec = model.quantSpec
    tensorEntry, blobs = _encodeTensors(model)
    header = {
        'arch': models.describeLayers(model.layers),
        'inputShape': ",".join(str(s) for s in model.inputShape),
        'numClasses': str(model.numClasses),
        'classNames': "\n".join(model.classNames),
        'alphas': ",".join(f"{k}:{v!r}" for k, v in model.alphas.items()),
        'quant.bits': "none" if spec is None else str(spec.bits),
        'quant.weights': "0" if spec is None else str(int(spec.quantizeWeights)),
        'quant.activations': "0" if spec is None else str(int(spec.quantizeActivations)),
        'quant.scheme': "none" if spec is None else spec.weightScheme,
        'tensors': tensorEntry,
    }
    if config is not None:
        for key, value in config.asDict().items():
            header[f"config.{key}"] = str(value)
    if metrics is not None:
        for key, value in metrics.asDict().items():
            header[f"metrics.{key}"] = repr(value)
    for key, value in model.metadata.items():
        key = key if key.startswith(METADATA_PREFIXES) else f"meta.{key}"
        header.setdefault(key, str(value))

    headerBytes = "\n".join(f"{k}={quote(v, safe='')}" for k, v in header.items()).encode('utf-8')
    payload = PREAMBLE.pack(MAGIC, VERSION, len(headerBytes)) + headerBytes + b"".join(blobs)
    pathlib.Path(path).write_bytes(payload)
    return len(payload)


def _parseHeader(raw, offset):
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise CheckpointError(f"header is not valid UTF-8: {e.reason}", offset + e.start) from None
    header = {}
    for line in text.split("\n"):
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed header line '{line[:40]}'", offset)
        key, value = line.split("=", 1)
        header[key] = unquote(value)
    return header


def readHeader(path):
    """Parse the preamble and header of a checkpoint.

    :return: (header dict, byte offset of the first tensor blob, raw bytes)
    """
    raw = pathlib.Path(path).read_bytes()
    if len(raw) < PREAMBLE.size:
        raise CheckpointError(f"file is {len(raw)} bytes, shorter than the preamble", 0)
    magic, version, headerLen = PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    start = PREAMBLE.size
    if start + headerLen > len(raw):
        raise CheckpointError(f"header length {headerLen} runs past end of file ({len(raw)} bytes)", 6)
    return _parseHeader(raw[start:start + headerLen], start), start + headerLen, raw


def _require(header, key, offset):
    if key not in header:
        raise CheckpointError(f"header is missing '{key}'", offset)
    return header[key]


def loadCheckpoint(path):
    """Rebuild a model from a checkpoint.

    The whole file is validated before a model is constructed, so a corrupt
    or truncated file never yields a partial model. Header metadata is kept
    in ``model.metadata``.

    :param str path: Checkpoint file

    :return: Model reproducing the saved forward pass bit-exactly
    :rtype: Model
    """
    header, offset, raw = readHeader(path)
    headerEnd = offset
    try:
        layers = models.parseLayers(_require(header, 'arch', PREAMBLE.size))
        inputShape = tuple(int(s) for s in _require(header, 'inputShape', PREAMBLE.size).split(","))
        numClasses = int(_require(header, 'numClasses', PREAMBLE.size))
        classNames = _require(header, 'classNames', PREAMBLE.size).split("\n")
        alphas = {}
        alphaText = _require(header, 'alphas', PREAMBLE.size)
        for item in filter(None, alphaText.split(",")):
            name, value = item.split(":")
            alphas[name] = float(value)
        bits = _require(header, 'quant.bits', PREAMBLE.size)
        spec = None if bits == "none" else QuantSpec(
            int(bits), header.get('quant.weights') == "1", header.get('quant.activations') == "1")
        entries = [e.split(":") for e in filter(None, _require(header, 'tensors', PREAMBLE.size).split(";"))]
    except CheckpointError:
        raise
    except ValueError as e:
        raise CheckpointError(f"malformed header: {e}", PREAMBLE.size) from None

    parameters = {}
    for entry in entries:
        if len(entry) != 3 or entry[2] not in ('packed', 'float'):
            raise CheckpointError(f"malformed tensor entry {':'.join(entry)}", PREAMBLE.size)
        name, shapeText, encoding = entry
        shape = _parseShape(shapeText)
        count = int(np.prod(shape, dtype=np.int64))
        if encoding == 'packed':
            if spec is None:
                raise CheckpointError(f"packed tensor {name} without a bit-width", PREAMBLE.size)
            need = 4 + packedSize(count, spec.bits)
        else:
            need = 4 * count
        if offset + need > len(raw):
            raise CheckpointError(f"truncated data for tensor {name}: {need} bytes needed, "
                                  f"{len(raw) - offset} left", offset)
        blob = raw[offset:offset + need]
        if encoding == 'packed':
            (s,) = struct.unpack_from('<f', blob, 0)
            parameters[name] = unpackWeights(blob[4:], shape, spec.bits, s)
        else:
            parameters[name] = Tensor.fromArray(np.frombuffer(blob, dtype='<f4').astype(np.float32).reshape(shape))
        offset += need
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} unexpected trailing bytes", offset)

    # Names were assigned as type+index when the model was built.
    for i, layer in enumerate(layers):
        layer['name'] = f"{layer['type']}{i}"
    try:
        model = Model(layers, inputShape, numClasses, parameters, alphas, spec, classNames)
    except ValueError as e:
        raise CheckpointError(f"inconsistent model description: {e}", headerEnd) from None
    model.metadata = {k: v for k, v in header.items() if k.startswith(METADATA_PREFIXES)}
    return model
