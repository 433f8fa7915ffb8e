"""Module for gradient saliency maps, adaptive thresholds and saliency-guided
masking of inputs."""

from dataclasses import dataclass
from typing import NamedTuple
import pathlib
import numpy as np
from PIL import Image

from sgquant.nn import classLogitSum, crossEntropy
from sgquant.tensor import Tape, Tensor, ShapeError

SOURCES = ('loss', 'logit')


@dataclass
class SaliencyConfig:
    """Masking ratio and hybrid-loss weights.

    :param float maskRatio: Fraction rho in [0, 1) of features masked per sample
    :param float lambda1: Weight of the KL term, >= 0
    :param float lambda2: Weight of the saliency L1 term, >= 0
    :param str source: 'loss' (gradient of cross-entropy) or 'logit'
        (gradient of the true-class logit)
    """

    maskRatio: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1e-4
    source: str = 'loss'

    def __post_init__(self):
        if not 0 <= self.maskRatio < 1:
            raise ValueError(f"mask ratio must be in [0, 1), got {self.maskRatio}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")
        if self.source not in SOURCES:
            raise ValueError(f"saliency source must be one of {SOURCES}, got '{self.source}'")


class Thresholds(NamedTuple):
    """Per-sample masking threshold and tie-break cut.

    A feature j of sample i is masked iff |S_ij| < epsilon_i, or
    |S_ij| == epsilon_i and j <= cutIndex_i.
    """

    epsilon: np.ndarray
    cutIndex: np.ndarray


@dataclass
class SaliencyMap:
    """Exported 2-D map: values in [0, 1] after normalization."""

    values: np.ndarray
    sourceLabel: int = None
    normalization: float = 0.0
    path: str = None


def _array(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def saliencyOnTape(tape, x, logits, labels, source='loss'):
    """Gradient of the saliency target with respect to the watched input ``x``.

    :return: S with the shape of ``x``
    :rtype: np.ndarray
    """
    if source not in SOURCES:
        raise ValueError(f"saliency source must be one of {SOURCES}, got '{source}'")
    target = crossEntropy(logits, labels) if source == 'loss' else classLogitSum(logits, labels)
    tape.backward(target)
    if x.grad is None:
        return np.zeros(x.shape, dtype=x.dtype)
    return x.grad.data


def computeSaliency(model, images, labels, source='loss'):
    """Gradient saliency S = d loss / d X for a batch.

    :param Model model: Classifier
    :param images: Batch of shape (N, *inputShape)
    :param labels: N integer labels
    :param str source: 'loss' or 'logit'

    :return: S with the same shape as ``images``
    :rtype: Tensor
    """
    tape = Tape()
    params = model.watch(tape, requiresGrad=False)
    x = tape.watch(images if isinstance(images, Tensor) else Tensor(images), requiresGrad=True, name='images')
    logits = model.forward(x, params)
    return Tensor.fromArray(saliencyOnTape(tape, x, logits, labels, source))


def computeLogitSaliency(model, images, labels):
    """Saliency from the gradient of each sample's true-class logit."""
    return computeSaliency(model, images, labels, source='logit')


def adaptiveThreshold(saliency, maskRatio):
    """Per-sample threshold masking the floor(rho * n) least salient features.

    Features are ordered by |S| with ties broken by flat index (stable
    sort). epsilon_i is the |S| value of the last masked feature and
    cutIndex_i its flat index; with nothing to mask epsilon_i lies just below
    the smallest |S| and cutIndex_i is -1.

    :param saliency: S of shape (N, ...)
    :param float maskRatio: rho in [0, 1)

    :return: Per-sample thresholds
    :rtype: Thresholds
    """
    if not 0 <= maskRatio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {maskRatio}")
    s = np.abs(_array(saliency))
    if s.ndim < 2:
        raise ShapeError(f"saliency must have a batch axis, got shape {s.shape}")
    flat = s.reshape(s.shape[0], -1)
    n = flat.shape[1]
    m = int(np.floor(maskRatio * n + 1e-9))
    if m == 0:
        epsilon = np.nextafter(flat.min(axis=1), -np.inf)
        return Thresholds(epsilon, np.full(flat.shape[0], -1, dtype=np.int64))
    order = np.argsort(flat, axis=1, kind='stable')
    cut = order[:, m - 1]
    epsilon = flat[np.arange(flat.shape[0]), cut]
    return Thresholds(epsilon, cut.astype(np.int64))


def maskFeatures(images, saliency, epsilon, cutIndex=None):
    """Zero the features whose saliency magnitude falls under the threshold.

    Kept entries are copied bit-identically.

    :param images: X of shape (N, ...)
    :param saliency: S of the same shape
    :param epsilon: Per-sample thresholds (or a :class:`Thresholds`)
    :param cutIndex: Per-sample tie-break index; without it only features
        strictly under epsilon are masked

    :return: Masked copy of X
    :rtype: Tensor
    """
    if isinstance(epsilon, Thresholds):
        epsilon, cutIndex = epsilon
    x, s = _array(images), np.abs(_array(saliency))
    if x.shape != s.shape:
        raise ShapeError(f"mask: input shape {x.shape} and saliency shape {s.shape} differ")
    n = x.shape[0]
    flat = s.reshape(n, -1)
    eps = np.broadcast_to(np.asarray(epsilon, dtype=flat.dtype).reshape(-1, 1), (n, 1))
    keep = flat > eps
    if cutIndex is not None:
        cut = np.broadcast_to(np.asarray(cutIndex).reshape(-1, 1), (n, 1))
        keep |= (flat == eps) & (np.arange(flat.shape[1])[None, :] > cut)
    return Tensor.fromArray(np.where(keep.reshape(x.shape), x, 0).astype(x.dtype, copy=False))


def saliencyL1(saliency):
    """Batch mean of the per-sample L1 norm of S."""
    s = np.abs(_array(saliency))
    if s.ndim < 2:
        return float(s.sum())
    return float(s.reshape(s.shape[0], -1).sum(axis=1).mean())


def saliencyImage(saliency):
    """Collapse S to 2-D (channel max of |S|) and normalize by its peak.

    :return: (values in [0, 1], peak)
    """
    s = np.abs(_array(saliency)).astype(np.float64)
    if s.ndim == 4 and s.shape[0] == 1:
        s = s[0]
    if s.ndim == 3:
        s = s.max(axis=0)
    if s.ndim != 2:
        raise ShapeError(f"saliency map must be (H, W), (C, H, W) or (1, C, H, W), got {s.shape}")
    peak = float(s.max()) if s.size else 0.0
    if peak == 0:
        return np.zeros_like(s), peak
    return s / peak, peak


def exportSaliencyMap(saliency, path, sourceLabel=None):
    """Write |S| as an 8-bit binary greyscale PGM (P5).

    Pixel = round(255 * v / max v) with v the channel max of |S|; an
    all-zero map exports all-zero pixels.

    :param saliency: S of shape (H, W), (C, H, W) or (1, C, H, W)
    :param str path: Output file

    :return: Exported map record
    :rtype: SaliencyMap
    """
    values, peak = saliencyImage(saliency)
    pixels = np.floor(255 * values + 0.5).astype(np.uint8)
    path = pathlib.Path(path)
    Image.fromarray(pixels).save(path, format='PPM')
    return SaliencyMap(values=values, sourceLabel=sourceLabel, normalization=peak, path=str(path))
