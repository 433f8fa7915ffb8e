"""Module for saliency-guided quantization-aware training, optimization and
evaluation metrics."""

from dataclasses import asdict, dataclass, field, fields
import os
import time
import warnings
import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix
from statsmodels.stats.proportion import proportion_confint
from tqdm.auto import tqdm

from sgquant import models, utils
from sgquant.nn import buildModel, crossEntropy, klDivergenceFromLogits
from sgquant.quant import ALPHA_FLOOR, PactParams, QuantSpec, checkBits
from sgquant.saliency import SaliencyConfig, adaptiveThreshold, maskFeatures, saliencyL1, saliencyOnTape
from sgquant.tensor import NonFiniteError, Tape, Tensor, add, scale
from sgquant.checkpoint import saveCheckpoint
from sgquant.dataset import DatasetError, augmentBatch

MODES = ('sgt_pact', 'sgt_baseline', 'float_baseline')
LOG_COLUMNS = ['epoch', 'train_loss', 'val_accuracy', 'val_sensitivity', 'val_specificity']


class DivergenceError(ArithmeticError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch, batch, detail):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")


@dataclass
class TrainConfig:
    """Training hyperparameters."""

    epochs: int = 50
    batchSize: int = 128
    lr: float = 1e-3
    alphaLr: float = 1e-2
    alphaReg: float = 1e-4
    alphaInit: float = 6.0
    lambda1: float = 1.0
    lambda2: float = 1e-4
    bits: int = 8
    maskRatio: float = 0.5
    mode: str = 'sgt_pact'
    seed: int = 42
    resolution: int = 64
    arch: str = 'default'
    channels: tuple = None
    hidden: int = None
    saliencySource: str = None
    quantizeActivations: bool = True
    quantizeWeights: bool = True
    augment: bool = True

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.epochs < 0 or self.batchSize < 1:
            raise ValueError(f"invalid epochs {self.epochs} or batch size {self.batchSize}")
        if self.lr <= 0 or self.alphaLr <= 0:
            raise ValueError(f"learning rates must be positive, got {self.lr}, {self.alphaLr}")
        if self.alphaReg < 0 or self.alphaInit <= 0:
            raise ValueError(f"invalid alpha regulariser {self.alphaReg} or initial alpha {self.alphaInit}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a non-negative 64-bit integer, got {self.seed}")
        checkBits(self.bits)
        self.saliencyConfig()
        models.architectureLayers(self.arch, self.channels, self.hidden)
        return self

    def resolvedSaliencySource(self):
        """'logit' for the SGT baseline, 'loss' otherwise, unless set explicitly."""
        if self.saliencySource is not None:
            return self.saliencySource
        return 'logit' if self.mode == 'sgt_baseline' else 'loss'

    def saliencyConfig(self):
        return SaliencyConfig(self.maskRatio, self.lambda1, self.lambda2, self.resolvedSaliencySource())

    def quantSpec(self):
        """Fake-quantization settings; None unless mode is sgt_pact with
        something to quantize."""
        if self.mode != 'sgt_pact' or not (self.quantizeActivations or self.quantizeWeights):
            return None
        return QuantSpec(self.bits, self.quantizeWeights, self.quantizeActivations)

    def layers(self):
        return models.architectureLayers(self.arch, self.channels, self.hidden)

    def asDict(self):
        d = asdict(self)
        d['channels'] = None if self.channels is None else list(self.channels)
        return d

    @classmethod
    def fieldNames(cls):
        return [f.name for f in fields(cls)]


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Metrics:
    """Confusion matrix (rows = true class, columns = predicted) and the
    accuracy, sensitivity and specificity derived from it."""

    confusion: np.ndarray
    accuracy: float
    sensitivity: float
    specificity: float
    classNames: list = None

    @property
    def total(self):
        return int(self.confusion.sum())

    def perClass(self):
        """One-vs-rest counts and rates per class.

        :rtype: pd.DataFrame
        """
        cm = self.confusion
        tp = np.diag(cm)
        fn = cm.sum(axis=1) - tp
        fp = cm.sum(axis=0) - tp
        tn = cm.sum() - tp - fn - fp
        with np.errstate(divide='ignore', invalid='ignore'):
            sens = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
            spec = np.where(tn + fp > 0, tn / (tn + fp), np.nan)
        names = self.classNames or [str(i) for i in range(len(cm))]
        return pd.DataFrame({'tp': tp, 'fn': fn, 'tn': tn, 'fp': fp, 'support': tp + fn,
                             'sensitivity': sens, 'specificity': spec}, index=pd.Index(names, name='class'))

    def confusionFrame(self):
        names = self.classNames or [str(i) for i in range(len(self.confusion))]
        return pd.DataFrame(self.confusion, index=pd.Index(names, name='true'),
                            columns=pd.Index(names, name='predicted'))

    def accuracyCI(self, alpha=0.05):
        """Wilson score interval for the accuracy."""
        correct = int(np.trace(self.confusion))
        lower, upper = proportion_confint(correct, self.total, alpha=alpha, method='wilson')
        return float(lower), float(upper)

    def asDict(self):
        lower, upper = self.accuracyCI()
        return {
            'accuracy': self.accuracy,
            'sensitivity': self.sensitivity,
            'specificity': self.specificity,
            'accuracy-ci95-lower': lower,
            'accuracy-ci95-upper': upper,
            'n': self.total,
        }


@dataclass
class TrainResult:
    """Best-validation model, the final-epoch model and the epoch log."""

    model: object
    finalModel: object
    history: pd.DataFrame
    valMetrics: Metrics
    bestEpoch: int


def binaryMetrics(tp, fn, tn, fp):
    """Sensitivity, specificity and accuracy from one-vs-rest counts.

    :Example:
    >>> binaryMetrics(3, 1, 4, 2)
    (0.75, 0.6666666666666666, 0.7)
    """
    sensitivity = tp / (tp + fn)
    specificity = tn / (tn + fp)
    accuracy = (tp + tn) / (tp + fn + tn + fp)
    return sensitivity, specificity, accuracy


def metricsFromPredictions(labels, predictions, numClasses, classNames=None):
    """Build :class:`Metrics` from true and predicted class indices.

    Two classes report the positive class (index 1). More classes average
    the one-vs-rest sensitivity and specificity over the classes whose
    denominator is non-zero.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot compute metrics on an empty split")
    cm = confusion_matrix(labels, predictions, labels=np.arange(numClasses))
    metrics = Metrics(cm, float(np.trace(cm) / cm.sum()), 0.0, 0.0, classNames)
    table = metrics.perClass()
    if numClasses == 2:
        rows = table.iloc[[1]]
    else:
        rows = table
    sens, spec = rows['sensitivity'].to_numpy(), rows['specificity'].to_numpy()
    metrics.sensitivity = float(np.nanmean(sens)) if np.isfinite(sens).any() else 0.0
    metrics.specificity = float(np.nanmean(spec)) if np.isfinite(spec).any() else 0.0
    return metrics


def evaluateMetrics(model, images, labels, batchSize=128):
    """Argmax predictions of ``model`` scored against ``labels``.

    :param Model model: Classifier
    :param np.ndarray images: Samples (N, C, H, W)
    :param labels: N class indices

    :return: Confusion matrix and derived metrics
    :rtype: Metrics
    """
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty split")
    predictions = model.predict(images, batchSize).argmax(axis=1)
    return metricsFromPredictions(labels, predictions, model.numClasses, model.classNames)


def hybridLoss(yOrig, yMasked, labels, saliency, lambda1, lambda2):
    """CE(yOrig, labels) + lambda1 * KL(softmax(yOrig) || softmax(yMasked))
    + lambda2 * ||S||_1.

    The saliency term is a constant: it adds to the loss value only.

    :return: Scalar loss tensor
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be non-negative, got {lambda1}, {lambda2}")
    loss = crossEntropy(yOrig, labels)
    if lambda1:
        loss = add(loss, scale(klDivergenceFromLogits(yOrig, yMasked), lambda1))
    if lambda2 and saliency is not None:
        loss = add(loss, Tensor(lambda2 * saliencyL1(saliency), dtype=loss.dtype))
    return loss


def adamStep(params, grads, state, lr):
    """One Adam update with bias correction.

    :param dict params: name -> Tensor
    :param dict grads: name -> Tensor or ndarray (missing names count as zero)
    :param AdamState state: Moments, updated in place
    :param float lr: Learning rate tau > 0

    :return: (new params dict, state)
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** state.step
    correction2 = 1 - b2 ** state.step
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape, dtype=p.dtype) if g is None else \
            np.asarray(g.data if isinstance(g, Tensor) else g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros_like(g) if m is None else m
        v = np.zeros_like(g) if v is None else v
        if m.shape != p.shape:
            raise ValueError(f"moment for {name} has shape {m.shape}, parameter has {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updated[name] = Tensor.fromArray((p.data - step).astype(p.dtype, copy=False))
    return updated, state


def updateAlpha(alpha, dAlpha, alphaLr, alphaReg):
    """alpha - alphaLr * (dAlpha + 2 * alphaReg * alpha), floored at 1e-3."""
    if alpha <= 0:
        raise ValueError(f"clipping level must be positive, got {alpha}")
    if not np.isfinite(dAlpha):
        raise NonFiniteError(f"clipping level gradient is {dAlpha}")
    return max(alpha - alphaLr * (dAlpha + 2 * alphaReg * alpha), ALPHA_FLOOR)


def trainStep(model, images, labels, config, adam, pact):
    """Forward, saliency masking, hybrid loss, backward and parameter update
    for one batch.

    :return: Loss value of the batch before the update
    :rtype: float
    """
    tape = Tape()
    params = model.watch(tape)
    x = tape.watch(Tensor(images), requiresGrad=config.mode != 'float_baseline', name='images')
    yOrig = model.forward(x, params)
    if config.mode == 'float_baseline':
        loss = crossEntropy(yOrig, labels)
    else:
        salience = config.saliencyConfig()
        s = saliencyOnTape(tape, x, yOrig, labels, salience.source)
        masked = maskFeatures(x.data, s, adaptiveThreshold(s, salience.maskRatio))
        yMasked = model.forward(masked, params)
        loss = hybridLoss(yOrig, yMasked, labels, s, salience.lambda1, salience.lambda2)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is {value}")
    tape.backward(loss)

    names = model.parameterNames()
    grads = {n: params[n].grad for n in names}
    model.parameters, _ = adamStep({n: model.parameters[n] for n in names}, grads, adam, config.lr)
    for layerName, alpha in pact.alphas.items():
        g = params[f"{layerName}.alpha"].grad
        pact.alphas[layerName] = updateAlpha(alpha, 0.0 if g is None else g.item(), pact.alphaLr, pact.alphaReg)
    model.alphas = dict(pact.alphas)
    return value


def trainModel(config, dataset, checkpointFile=None, logFile=None, verbose=True):
    """Train a classifier on the dataset's train split.

    Each epoch shuffles the training samples with a stream seeded by
    (seed, epoch) and keeps the last partial batch. Validation metrics are
    logged after every epoch and the best-validation model is checkpointed.

    :param TrainConfig config: Hyperparameters
    :param Dataset dataset: Split dataset
    :param str checkpointFile: Best-validation checkpoint path, or None
    :param str logFile: Per-epoch CSV log path (appended), or None
    :param bool verbose: Show progress bars and per-epoch lines

    :return: Best model, final model and the epoch log
    :rtype: TrainResult
    """
    config.validate()
    trainX, trainY, trainIdx = dataset.split('train')
    if len(trainY) == 0:
        raise DatasetError("dataset has no training samples")
    valX, valY, _ = dataset.split('val')
    if len(valY) == 0:
        warnings.warn("no validation samples, selecting the checkpoint on training accuracy")
        valX, valY = trainX, trainY

    model = buildModel(config.layers(), dataset.imageShape, dataset.numClasses, seed=config.seed,
                       alphaInit=config.alphaInit, quantSpec=config.quantSpec(),
                       classNames=dataset.classNames)
    model.metadata = {'seed': config.seed}
    adam = AdamState()
    pact = PactParams(dict(model.alphas), config.alphaLr, config.alphaReg)

    rows = []
    best, bestModel, bestEpoch = None, model.copy(), 0
    if config.epochs == 0:
        best = evaluateMetrics(model, valX, valY, config.batchSize)
        if checkpointFile:
            saveCheckpoint(model, config, best, checkpointFile)

    for epoch in range(1, config.epochs + 1):
        startTime = time.time()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(trainY))
        batches = [order[i:i + config.batchSize] for i in range(0, len(order), config.batchSize)]
        losses = []
        for b, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not verbose, leave=False), 1):
            images = trainX[batch]
            if config.augment:
                images = augmentBatch(images, config.seed, epoch, trainIdx[batch])
            try:
                losses.append(trainStep(model, images, trainY[batch], config, adam, pact))
            except NonFiniteError as e:
                raise DivergenceError(epoch, b, e) from e

        val = evaluateMetrics(model, valX, valY, config.batchSize)
        row = {'epoch': epoch, 'train_loss': float(np.mean(losses)), 'val_accuracy': val.accuracy,
               'val_sensitivity': val.sensitivity, 'val_specificity': val.specificity}
        rows.append(row)
        if logFile:
            utils.appendLogRow(logFile, row, LOG_COLUMNS)
        if verbose:
            utils.toScreen(f"epoch {epoch}/{config.epochs} loss {row['train_loss']:.4f} "
                           f"val accuracy {val.accuracy:.4f} ({time.time() - startTime:.1f}s)")
        if best is None or val.accuracy > best.accuracy:
            best, bestModel, bestEpoch = val, model.copy(), epoch
            if checkpointFile:
                saveCheckpoint(bestModel, config, best, checkpointFile)

    history = pd.DataFrame(rows, columns=LOG_COLUMNS)
    return TrainResult(bestModel, model, history, best, bestEpoch)


def resetLog(logFile):
    """Remove a previous run's log so each run starts a fresh file."""
    if logFile and os.path.exists(logFile):
        os.remove(logFile)
