"""Module providing differentiable layer operations, losses and the
sequential classifier model."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from sgquant import models
from sgquant.quant import QuantSpec, fakeQuantizeWeights, pactActivation
from sgquant.tensor import Tensor, ShapeError, checkFinite, reshape, result

PROB_TOL = 1e-4
Q_FLOOR = 1e-12


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of a batch of images with a kernel bank.

    :param Tensor x: Input of shape (N, C, H, W)
    :param Tensor w: Kernels of shape (O, C, kh, kw)
    :param Tensor b: Optional bias of shape (O,)
    :param int stride: Step between windows, >= 1
    :param int padding: Zero padding added to each spatial border

    :return: Output of shape (N, O, H', W'), H' = (H + 2p - kh) // stride + 1
    :rtype: Tensor
    """
    inputs = [x, w] if b is None else [x, w, b]
    checkFinite('conv2d', *inputs)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, kc, kh, kw = w.shape
    if c != kc:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xData, wData = x.data, w.data
    if padding:
        xData = np.pad(xData, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: (N, C, H', W', kh, kw)
    windows = sliding_window_view(xData, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, wData, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, wData, axes=([1], [0]))  # (N, H', W', C, kh, kw)
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [np.ascontiguousarray(dx), dw.astype(g.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return result('conv2d', inputs, out, backward)


def maxpool2d(x, window=2):
    """Non-overlapping max-pool. Ties route the gradient to the first
    (lowest flat index) element of the window.

    :param Tensor x: Input of shape (N, C, H, W), H and W divisible by window
    """
    checkFinite('maxpool2d', x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    k = int(window)
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} not divisible by window {k}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gBlocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gBlocks, idx, g[..., None], axis=-1)
        return [gBlocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)]

    return result('maxpool2d', [x], out, backward)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def dense(x, w, b=None):
    """Fully connected layer x @ w + b.

    :param Tensor x: Input of shape (N, F)
    :param Tensor w: Weights of shape (F, G)
    :param Tensor b: Optional bias of shape (G,)
    """
    inputs = [x, w] if b is None else [x, w, b]
    checkFinite('dense', *inputs)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} and weights {w.shape} are not aligned")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match {w.shape[1]} outputs")
    xData, wData = x.data, w.data
    out = xData @ wData
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ wData.T, xData.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return result('dense', inputs, out, backward)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _logSoftmax(z):
    return (z - logsumexp(z, axis=-1, keepdims=True)).astype(z.dtype, copy=False)


def softmax(logits):
    """Softmax over the last axis, computed with the row max subtracted."""
    checkFinite('softmax', logits)
    y = _softmax(logits.data)

    def backward(g):
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]

    return result('softmax', [logits], y, backward)


def logSoftmax(logits):
    checkFinite('log_softmax', logits)
    z = logits.data
    y = _logSoftmax(z)

    def backward(g):
        return [g - _softmax(z) * g.sum(axis=-1, keepdims=True)]

    return result('log_softmax', [logits], y, backward)


def _checkLabels(op, labels, n, numClasses):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"{op}: expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError(f"{op}: labels must be integers")
        labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= numClasses)
    if bad.any():
        raise ValueError(f"{op}: label {labels[bad][0]} outside [0, {numClasses})")
    return labels


def crossEntropy(logits, labels):
    """Batch-mean cross-entropy of softmax(logits) against integer labels.

    :param Tensor logits: Shape (N, C)
    :param labels: N integer class indices in [0, C)

    :return: Scalar tensor
    """
    checkFinite('cross_entropy', logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, C) logits, got {logits.shape}")
    n, numClasses = logits.shape
    labels = _checkLabels('cross_entropy', labels, n, numClasses)
    z = logits.data
    rows = np.arange(n)
    value = -_logSoftmax(z)[rows, labels].mean()

    def backward(g):
        d = _softmax(z)
        d[rows, labels] -= 1
        return [d * (g / n)]

    return result('cross_entropy', [logits], np.asarray(value, dtype=z.dtype), backward)


def _rows(op, t):
    if t.ndim == 1:
        return t.data[None, :]
    if t.ndim == 2:
        return t.data
    raise ShapeError(f"{op}: expected 1-D or 2-D probabilities, got {t.shape}")


def klDivergence(p, q):
    """Mean over rows of KL(p || q) = sum p (ln p - ln q).

    Terms with p = 0 contribute 0; q is floored at 1e-12.

    :param Tensor p: Probability rows, each summing to 1 within 1e-4
    :param Tensor q: Probability rows of the same shape
    """
    checkFinite('kl_divergence', p, q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    pData, qData = _rows('kl_divergence', p), _rows('kl_divergence', q)
    for name, d in (('p', pData), ('q', qData)):
        sums = d.sum(axis=-1)
        if np.any(np.abs(sums - 1) > PROB_TOL) or np.any(d < 0):
            raise ValueError(f"kl_divergence: rows of {name} are not normalized probabilities")
    n = pData.shape[0]
    qSafe = np.maximum(qData, Q_FLOOR)
    support = pData > 0
    logRatio = np.where(support, np.log(np.where(support, pData, 1)) - np.log(qSafe), 0)
    value = (pData * logRatio).sum() / n

    def backward(g):
        dp = np.where(support, logRatio + 1, 0) * (g / n)
        dq = np.where(qData > Q_FLOOR, -pData / qSafe, 0) * (g / n)
        return [dp.reshape(p.shape), dq.reshape(q.shape)]

    return result('kl_divergence', [p, q], np.asarray(value, dtype=pData.dtype), backward)


def klDivergenceFromLogits(a, b):
    """Mean over rows of KL(softmax(a) || softmax(b)) via log-softmax.

    :param Tensor a: Logits of the reference distribution, shape (N, C)
    :param Tensor b: Logits of the compared distribution, shape (N, C)
    """
    checkFinite('kl_divergence', a, b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"kl_divergence: logits {a.shape} and {b.shape} must be matching (N, C)")
    n = a.shape[0]
    lp, lq = _logSoftmax(a.data), _logSoftmax(b.data)
    p = np.exp(lp)
    diff = lp - lq
    rowKl = (p * diff).sum(axis=-1, keepdims=True)
    value = rowKl.sum() / n

    def backward(g):
        da = p * (diff - rowKl) * (g / n)
        db = (np.exp(lq) - p) * (g / n)
        return [da, db]

    return result('kl_divergence', [a, b], np.asarray(value, dtype=a.dtype), backward)


def classLogitSum(logits, labels):
    """Sum over the batch of each sample's logit for its own class."""
    checkFinite('class_logit', logits)
    if logits.ndim != 2:
        raise ShapeError(f"class_logit: expected (N, C) logits, got {logits.shape}")
    n, numClasses = logits.shape
    labels = _checkLabels('class_logit', labels, n, numClasses)
    rows = np.arange(n)
    value = logits.data[rows, labels].sum()

    def backward(g):
        d = np.zeros(logits.shape, dtype=g.dtype)
        d[rows, labels] = g
        return [d]

    return result('class_logit', [logits], np.asarray(value, dtype=logits.dtype), backward)


def _layerOutputShape(layer, shape):
    kind = layer['type']
    if kind == 'conv2d':
        if len(shape) != 3:
            raise ShapeError(f"{layer['name']}: conv2d needs (C, H, W) input, got {shape}")
        _, h, w = shape
        k, s, p = layer['kernel'], layer['stride'], layer['padding']
        if k > h + 2 * p or k > w + 2 * p:
            raise ShapeError(f"{layer['name']}: kernel {k} larger than padded input {shape}")
        return (layer['outChannels'], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if kind == 'maxpool':
        k = layer['window']
        if len(shape) != 3 or shape[1] % k or shape[2] % k:
            raise ShapeError(f"{layer['name']}: {shape} not divisible by pool window {k}")
        return (shape[0], shape[1] // k, shape[2] // k)
    if kind == 'flatten':
        return (int(np.prod(shape)),)
    if kind == 'dense':
        if len(shape) != 1:
            raise ShapeError(f"{layer['name']}: dense needs flat input, got {shape}")
        return (layer['outFeatures'],)
    if kind == 'pact':
        return shape
    raise ValueError(f"unknown layer type '{kind}'")


class Model:
    """Sequential image classifier: conv / PACT / max-pool stages followed by
    dense layers.

    Parameters are immutable tensors held in ``parameters`` (name -> Tensor,
    e.g. ``conv0.weight``); PACT clipping levels are floats in ``alphas``
    (layer name -> alpha). The training loop owns a model and replaces these
    entries after each optimizer step.

    :param list layers: Layer descriptors with resolved sizes and names
    :param tuple inputShape: Per-sample input shape, e.g. (3, 64, 64)
    :param int numClasses: Output logits per sample
    :param dict parameters: name -> Tensor
    :param dict alphas: PACT layer name -> clipping level
    :param QuantSpec quantSpec: Fake-quantization settings, None for float
    :param list classNames: Optional class labels
    """

    def __init__(self, layers, inputShape, numClasses, parameters, alphas,
                 quantSpec=None, classNames=None):
        self.layers = [dict(layer) for layer in layers]
        self.inputShape = tuple(int(s) for s in inputShape)
        self.numClasses = int(numClasses)
        self.parameters = dict(parameters)
        self.alphas = {k: float(v) for k, v in alphas.items()}
        self.quantSpec = quantSpec
        self.classNames = list(classNames) if classNames is not None else \
            [str(i) for i in range(self.numClasses)]
        self.metadata = {}
        self._checkConsistent()

    def _checkConsistent(self):
        shape = self.inputShape
        for layer in self.layers:
            shape = _layerOutputShape(layer, shape)
        if shape != (self.numClasses,):
            raise ShapeError(f"final layer outputs {shape}, expected ({self.numClasses},)")
        for name in self.parameterNames():
            if name not in self.parameters:
                raise ValueError(f"missing parameter {name}")
        for layer in self.layers:
            if layer['type'] == 'pact' and layer['name'] not in self.alphas:
                raise ValueError(f"missing clipping level for {layer['name']}")
        if len(self.classNames) != self.numClasses:
            raise ValueError(f"{len(self.classNames)} class names for {self.numClasses} classes")

    def parameterNames(self):
        """Weight and bias names in layer order."""
        names = []
        for layer in self.layers:
            if layer['type'] in ('conv2d', 'dense'):
                names += [f"{layer['name']}.weight", f"{layer['name']}.bias"]
        return names

    def weightNames(self):
        return [n for n in self.parameterNames() if n.endswith('.weight')]

    def numParameters(self):
        return sum(self.parameters[n].size for n in self.parameterNames())

    def copy(self, parameters=None, alphas=None, quantSpec=False):
        """Shallow copy (tensors are immutable), optionally replacing fields.

        ``quantSpec=False`` keeps the current setting; None disables it.
        """
        out = Model(
            self.layers, self.inputShape, self.numClasses,
            self.parameters if parameters is None else parameters,
            self.alphas if alphas is None else alphas,
            self.quantSpec if quantSpec is False else quantSpec,
            self.classNames,
        )
        out.metadata = dict(self.metadata)
        return out

    def watch(self, tape, requiresGrad=True):
        """Record every parameter and clipping level on ``tape`` as a leaf.

        :return: name -> watched Tensor; clipping levels appear as
            '<layer>.alpha' scalars
        :rtype: dict
        """
        watched = {}
        for name in self.parameterNames():
            watched[name] = tape.watch(self.parameters[name], requiresGrad=requiresGrad, name=name)
        for layerName, alpha in self.alphas.items():
            key = f"{layerName}.alpha"
            watched[key] = tape.watch(Tensor(alpha), requiresGrad=requiresGrad, name=key)
        return watched

    def forward(self, x, params=None):
        """Compute logits for a batch.

        :param Tensor x: Batch of shape (N, *inputShape)
        :param dict params: Watched tensors from :meth:`watch`; when omitted
            the stored values are used as constants

        :return: Logits of shape (N, numClasses)
        :rtype: Tensor
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1:] != self.inputShape:
            raise ShapeError(f"model expects inputs of shape (N, {self.inputShape}), got {x.shape}")
        if params is None:
            params = dict(self.parameters)
            params.update({f"{k}.alpha": Tensor(v) for k, v in self.alphas.items()})
        spec = self.quantSpec
        weightBits = spec.bits if spec is not None and spec.quantizeWeights else None
        actBits = spec.bits if spec is not None and spec.quantizeActivations else None

        for layer in self.layers:
            kind, name = layer['type'], layer['name']
            if kind in ('conv2d', 'dense'):
                w, b = params[f"{name}.weight"], params[f"{name}.bias"]
                if weightBits is not None:
                    w = fakeQuantizeWeights(w, weightBits)
                if kind == 'conv2d':
                    x = conv2d(x, w, b, stride=layer['stride'], padding=layer['padding'])
                else:
                    x = dense(x, w, b)
            elif kind == 'pact':
                x = pactActivation(x, params[f"{name}.alpha"], actBits)
            elif kind == 'maxpool':
                x = maxpool2d(x, layer['window'])
            elif kind == 'flatten':
                x = flatten(x)
        return x

    def predict(self, images, batchSize=128):
        """Logits for a stack of samples, evaluated in batches off-tape.

        :rtype: np.ndarray
        """
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        out = np.zeros((len(images), self.numClasses), dtype=np.float32)
        for start in range(0, len(images), batchSize):
            batch = Tensor(images[start:start + batchSize])
            out[start:start + batchSize] = self.forward(batch).data
        return out


def buildModel(layers, inputShape, numClasses, seed=42, alphaInit=6.0,
               quantSpec=None, classNames=None):
    """Instantiate a model with He-normal weights and zero biases.

    :param layers: Layer descriptors (see :mod:`sgquant.models`) or the
        name of a registered architecture
    :param tuple inputShape: Per-sample input shape (C, H, W)
    :param int numClasses: Number of classes (>= 2)
    :param int seed: Initialization seed
    :param float alphaInit: Initial PACT clipping level
    :param QuantSpec quantSpec: Fake-quantization settings, None for float

    :return: Initialized model
    :rtype: Model
    """
    if numClasses < 2:
        raise ValueError(f"need at least 2 classes, got {numClasses}")
    if alphaInit <= 0:
        raise ValueError(f"initial clipping level must be positive, got {alphaInit}")
    if quantSpec is not None and not isinstance(quantSpec, QuantSpec):
        raise TypeError("quantSpec must be a QuantSpec or None")
    if isinstance(layers, str):
        layers = models.architectureLayers(layers)

    rng = np.random.default_rng(seed)
    resolved, parameters, alphas = [], {}, {}
    shape = tuple(inputShape)
    for i, layer in enumerate(layers):
        layer = dict(layer)
        layer['name'] = f"{layer['type']}{i}"
        if layer['type'] == 'dense' and layer.get('outFeatures') is None:
            layer['outFeatures'] = numClasses
        outShape = _layerOutputShape(layer, shape)
        name = layer['name']
        if layer['type'] == 'conv2d':
            k = layer['kernel']
            fanIn = shape[0] * k * k
            wShape = (layer['outChannels'], shape[0], k, k)
            parameters[f"{name}.weight"] = Tensor(rng.normal(0, np.sqrt(2.0 / fanIn), wShape), dtype=np.float32)
            parameters[f"{name}.bias"] = Tensor(np.zeros(layer["outChannels"], dtype=np.float32))
        elif layer['type'] == 'dense':
            fanIn = shape[0]
            weights = rng.normal(0, np.sqrt(2.0 / fanIn), (fanIn, outShape[0]))
            parameters[f"{name}.weight"] = Tensor(weights, dtype=np.float32)
            parameters[f"{name}.bias"] = Tensor(np.zeros(outShape[0], dtype=np.float32))
        elif layer['type'] == 'pact':
            alphas[name] = float(alphaInit)
        resolved.append(layer)
        shape = outShape
    return Model(resolved, inputShape, numClasses, parameters, alphas, quantSpec, classNames)
