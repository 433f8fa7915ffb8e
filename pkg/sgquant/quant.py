"""Module for PACT activation quantization, weight fake quantization and
low-bit packing of quantized weights."""

from dataclasses import dataclass, field
import numpy as np

from sgquant.tensor import Tensor, ShapeError, checkFinite, result

MIN_BITS = 2
MAX_BITS = 8
ALPHA_FLOOR = 1e-3
WEIGHT_SCHEME = 'symmetric-per-tensor'


def checkBits(bits):
    if int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


@dataclass
class QuantSpec:
    """Bit-width and which tensors are fake-quantized in the forward pass."""

    bits: int = 8
    quantizeWeights: bool = True
    quantizeActivations: bool = True
    weightScheme: str = WEIGHT_SCHEME

    def __post_init__(self):
        self.bits = checkBits(self.bits)
        if self.weightScheme != WEIGHT_SCHEME:
            raise ValueError(f"unsupported weight scheme {self.weightScheme}")

    @property
    def activationLevels(self):
        return 2 ** self.bits


@dataclass
class PactParams:
    """Learnable clipping levels and the rule that updates them."""

    alphas: dict = field(default_factory=dict)
    alphaLr: float = 1e-2
    alphaReg: float = 1e-4

    def __post_init__(self):
        if self.alphaLr <= 0:
            raise ValueError(f"alpha learning rate must be positive, got {self.alphaLr}")
        if self.alphaReg < 0:
            raise ValueError(f"alpha regulariser must be non-negative, got {self.alphaReg}")
        for name, alpha in self.alphas.items():
            if alpha <= 0:
                raise ValueError(f"clipping level {name} must be positive, got {alpha}")


def roundHalfAway(v):
    """Round to nearest integer, halves away from zero."""
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _alphaValue(alpha):
    value = alpha.item() if isinstance(alpha, Tensor) else float(alpha)
    if not value > 0:
        raise ValueError(f"PACT clipping level must be positive, got {value}")
    return value


def pactForward(x, alpha):
    """Clip activations to [0, alpha].

    :param Tensor x: Pre-activation values
    :param float alpha: Clipping level, > 0

    :return: 0 where x < 0, x where 0 <= x < alpha, alpha where x >= alpha
    :rtype: Tensor
    """
    alpha = _alphaValue(alpha)
    checkFinite('pact', x)
    a = x.dtype.type(alpha)
    return Tensor.fromArray(np.minimum(np.maximum(x.data, 0), a))


def _quantizeClipped(y, alpha, bits):
    levels = y.dtype.type(2 ** bits - 1)
    a = y.dtype.type(alpha)
    codes = np.clip(np.floor(y * levels / a + 0.5), 0, levels)
    return (codes / levels * a).astype(y.dtype, copy=False)


def pactQuantize(y, alpha, bits):
    """Snap clipped activations onto the k-bit grid of [0, alpha].

    round(y * (2^k - 1) / alpha) * alpha / (2^k - 1), with halves rounded away
    from zero. The top code maps exactly to alpha.

    :param Tensor y: Values already clipped to [0, alpha]
    :param float alpha: Clipping level, > 0
    :param int bits: Bit-width k in [2, 8]

    :return: Quantized values, at most 2^k distinct
    :rtype: Tensor
    """
    bits = checkBits(bits)
    alpha = _alphaValue(alpha)
    checkFinite('pact_quantize', y)
    return Tensor.fromArray(_quantizeClipped(y.data, alpha, bits))


def pactBackward(x, alpha, upstream):
    """Straight-through gradient of the PACT activation.

    Rounding is treated as identity, so only the clip shapes the gradient.

    :return: (dx, dalpha) with dx = upstream on 0 <= x < alpha, else 0, and
        dalpha = sum of upstream where x >= alpha
    :rtype: tuple(Tensor, float)
    """
    alpha = _alphaValue(alpha)
    if x.shape != upstream.shape:
        raise ShapeError(f"pact_backward: x shape {x.shape} differs from upstream shape {upstream.shape}")
    dx, dalpha = _pactGrad(x.data, x.dtype.type(alpha), upstream.data)
    return Tensor.fromArray(dx), float(dalpha)


def _pactGrad(x, a, g):
    passThrough = (x >= 0) & (x < a)
    dx = np.where(passThrough, g, 0).astype(g.dtype, copy=False)
    dalpha = g[x >= a].sum(dtype=g.dtype)
    return dx, dalpha


def pactActivation(x, alpha, bits=None):
    """PACT clip followed by optional k-bit quantization, recorded on the tape.

    :param Tensor x: Pre-activation values
    :param Tensor alpha: Scalar clipping level (watched to learn it)
    :param int bits: Bit-width, or None for the float clip only
    """
    if not isinstance(alpha, Tensor):
        alpha = Tensor(alpha, dtype=x.dtype)
    value = _alphaValue(alpha)
    checkFinite('pact', x)
    if bits is not None:
        bits = checkBits(bits)
    xData = x.data
    a = x.dtype.type(value)
    y = np.minimum(np.maximum(xData, 0), a)
    if bits is not None:
        y = _quantizeClipped(y, value, bits)
    alphaShape, alphaDtype = alpha.shape, alpha.dtype

    def backward(g):
        dx, dalpha = _pactGrad(xData, a, g)
        return [dx, np.full(alphaShape, dalpha, dtype=alphaDtype)]

    return result('pact', [x, alpha], y, backward)


def weightScale(w, bits):
    """Per-tensor symmetric scale max|w| / (2^(k-1) - 1).

    The float scale is nudged (by at most a few ulps) to a value s for which
    re-deriving the scale from the quantized tensor returns s again, which
    makes quantization exactly idempotent.

    :return: Scale in the weight dtype; 0 for an all-zero tensor
    """
    bits = checkBits(bits)
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    dtype = data.dtype.type if data.dtype in (np.float32, np.float64) else np.float32
    levels = dtype(2 ** (bits - 1) - 1)
    maxAbs = dtype(np.abs(data).max()) if data.size else dtype(0)
    s = dtype(maxAbs / levels)
    for _ in range(8):
        following = dtype(dtype(s * levels) / levels)
        if following == s:
            break
        s = following
    return s


def _fakeQuantize(data, bits):
    s = weightScale(data, bits)
    if s == 0:
        return np.array(data), s
    levels = 2 ** (bits - 1) - 1
    codes = np.clip(roundHalfAway(data / s), -levels, levels)
    return (codes * s).astype(data.dtype, copy=False), s


def quantizeWeightsQat(w, bits):
    """Symmetric per-tensor fake quantization of a weight tensor.

    :param Tensor w: Float weights
    :param int bits: Bit-width k in [2, 8]

    :return: round(w / s) * s with s = max|w| / (2^(k-1) - 1); w itself when s = 0
    :rtype: Tensor
    """
    bits = checkBits(bits)
    checkFinite('quantize_weights', w)
    out, _ = _fakeQuantize(w.data, bits)
    return Tensor.fromArray(out)


def fakeQuantizeWeights(w, bits):
    """Tape-recorded weight fake quantization with an identity (STE) backward."""
    bits = checkBits(bits)
    checkFinite('quantize_weights', w)
    out, _ = _fakeQuantize(w.data, bits)

    def backward(g):
        return [g]

    return result('quantize_weights', [w], out, backward)


def quantizeWeightsPtq(model, bits, quantizeActivations=False):
    """One-shot post-training quantization of every conv/dense weight.

    Biases and clipping levels are left untouched.

    :param Model model: Trained model
    :param int bits: Bit-width k in [2, 8]
    :param bool quantizeActivations: Also enable k-bit PACT activations

    :return: New model whose weights lie on their k-bit grids
    :rtype: Model
    """
    bits = checkBits(bits)
    parameters = dict(model.parameters)
    for name in model.weightNames():
        parameters[name] = quantizeWeightsQat(parameters[name], bits)
    spec = QuantSpec(bits=bits, quantizeWeights=True, quantizeActivations=quantizeActivations)
    return model.copy(parameters=parameters, quantSpec=spec)


def packedSize(count, bits):
    return (count * bits + 7) // 8


def packWeights(w, bits, scale):
    """Pack grid-valued weights into k-bit two's-complement codes.

    Codes are laid out in flat row-major order, k bits each, filled
    least-significant bit first within each byte; the final byte is zero
    padded.

    :param Tensor w: Weights that are integer multiples of ``scale``
    :param int bits: Bit-width k in [2, 8]
    :param float scale: Quantization step

    :return: Packed payload of ceil(n*k/8) bytes
    :rtype: bytes
    """
    bits = checkBits(bits)
    values = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64).reshape(-1)
    levels = 2 ** (bits - 1) - 1
    scale = float(scale)
    if scale == 0:
        offGrid = np.flatnonzero(values != 0)
        codes = np.zeros(values.size, dtype=np.int64)
    else:
        codes = roundHalfAway(values / scale)
        tol = 1e-6 * max(1.0, abs(scale))
        offGrid = np.flatnonzero((np.abs(values - codes * scale) > tol) | (np.abs(codes) > levels))
        codes = codes.astype(np.int64)
    if offGrid.size:
        i = offGrid[0]
        raise ValueError(f"value {values[i]} at index {i} is not on the {bits}-bit grid of scale {scale}")
    unsigned = (codes & (2 ** bits - 1)).astype(np.uint8)
    bitPlanes = (unsigned[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bitPlanes.reshape(-1), bitorder='little').tobytes()


def unpackWeights(payload, shape, bits, scale):
    """Inverse of :func:`packWeights`.

    :return: codes * scale as float32, reshaped to ``shape``
    :rtype: Tensor
    """
    bits = checkBits(bits)
    count = int(np.prod(shape, dtype=np.int64))
    need = packedSize(count, bits)
    if len(payload) < need:
        raise ValueError(f"packed payload has {len(payload)} bytes, {need} needed for {count} codes")
    raw = np.frombuffer(payload, dtype=np.uint8, count=need)
    bitPlanes = np.unpackbits(raw, bitorder='little')[:count * bits].reshape(count, bits)
    unsigned = (bitPlanes.astype(np.int64) << np.arange(bits)).sum(axis=1)
    codes = np.where(unsigned >= 2 ** (bits - 1), unsigned - 2 ** bits, unsigned)
    values = codes.astype(np.float32) * np.float32(scale)
    return Tensor.fromArray(values.reshape(shape))
