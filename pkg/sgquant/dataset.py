"""Module for loading image corpora, stratified splitting, augmentation and
synthetic data generation."""

import pathlib
import warnings
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from sgquant.tensor import Tensor

SPLITS = ('train', 'val', 'test')
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
IMAGE_SUFFIXES = ('.ppm',)


class DatasetError(ValueError):
    """Raised when a corpus cannot be loaded or split as requested."""


class Dataset:
    """Labelled image stack.

    :param images: float32 array of shape (N, C, H, W) with values in [0, 1]
    :param labels: N class indices
    :param list classNames: Class label strings, index = class id
    :param splits: Optional N split names ('train', 'val' or 'test')
    :param list names: Optional N sample identifiers (file stems)
    """

    def __init__(self, images, labels, classNames, splits=None, names=None):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classNames = list(classNames)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise DatasetError(f"{len(self.labels)} labels for {len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.classNames)):
            raise DatasetError("labels outside the class range")
        self.splits = None if splits is None else np.asarray(splits, dtype=object)
        self.names = [f"sample{i:05d}" for i in range(len(self.labels))] if names is None else list(names)

    def __len__(self):
        return len(self.labels)

    @property
    def imageShape(self):
        return tuple(self.images.shape[1:])

    @property
    def numClasses(self):
        return len(self.classNames)

    def split(self, name):
        """Images, labels and sample indices of one split ('all' for every sample).

        :rtype: tuple(np.ndarray, np.ndarray, np.ndarray)
        """
        if name == 'all':
            idx = np.arange(len(self))
        else:
            if name not in SPLITS:
                raise ValueError(f"unknown split '{name}', choose from {SPLITS}")
            if self.splits is None:
                raise DatasetError("dataset has not been split")
            idx = np.flatnonzero(self.splits == name)
        return self.images[idx], self.labels[idx], idx

    def summary(self):
        """Sample counts per class and split.

        :rtype: pd.DataFrame
        """
        df = pd.DataFrame({
            'class': [self.classNames[i] for i in self.labels],
            'split': self.splits if self.splits is not None else 'all',
        })
        return pd.crosstab(df['class'], df['split'], margins=True, margins_name='total')


def readImage(path):
    """Decode an image file to 8-bit RGB.

    :return: uint8 array of shape (H, W, 3)
    :raises DatasetError: if Pillow cannot identify or fully decode the file
    """
    try:
        with open(path, 'rb') as f:
            img = Image.open(f)
            return np.asarray(img.convert('RGB'), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError:
        raise DatasetError(f"{path}: not a readable image") from None
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: {e}") from e


def writePPM(path, pixels):
    """Write an (H, W, 3) uint8 array as a binary PPM (P6)."""
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format='PPM')


def resizeBilinear(image, height, width):
    """Bilinear resize of a (C, H, W) array with half-pixel sample centres."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return np.array(image, dtype=np.float32)
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    grid = np.meshgrid(ys, xs, indexing='ij')
    out = np.stack([
        ndimage.map_coordinates(image[ch].astype(np.float64), grid, order=1, mode='nearest')
        for ch in range(c)
    ])
    return out.astype(np.float32)


def decodeImage(path, resolution):
    """Read an image as float32 (3, R, R) with values in [0, 1]."""
    pixels = readImage(path)
    image = pixels.transpose(2, 0, 1).astype(np.float32) / 255
    return np.clip(resizeBilinear(image, resolution, resolution), 0, 1)


def _tryDecode(path, resolution):
    try:
        return decodeImage(path, resolution), None
    except (OSError, DatasetError) as e:
        return None, str(e)


def loadImageDataset(root, resolution=64, nJobs=1, verbose=False):
    """Load a class-per-subdirectory corpus of PPM images.

    Class names are the subdirectory names in lexicographic order. Files
    that fail to decode are skipped with a warning.

    :param str root: Corpus directory
    :param int resolution: Side length R every image is resized to
    :param int nJobs: Parallel decoding workers

    :return: Unsplit dataset
    :rtype: Dataset
    """
    root = pathlib.Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    classDirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not classDirs:
        raise DatasetError(f"no class subdirectories under {root}")

    files, fileLabels = [], []
    for label, classDir in enumerate(classDirs):
        classFiles = sorted(p for p in classDir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not classFiles:
            raise DatasetError(f"class directory {classDir} contains no images")
        files += classFiles
        fileLabels += [label] * len(classFiles)

    decoded = Parallel(n_jobs=nJobs, verbose=10 if verbose else 0)(
        delayed(_tryDecode)(p, resolution) for p in files
    )
    images, labels, names, skipped = [], [], [], []
    for path, label, (image, error) in zip(files, fileLabels, decoded):
        if image is None:
            skipped.append(f"{path}: {error}")
            continue
        images.append(image)
        labels.append(label)
        names.append(path.stem)
    if skipped:
        warnings.warn(f"skipped {len(skipped)} unreadable image(s), first: {skipped[0]}")
    counts = np.bincount(labels, minlength=len(classDirs)) if labels else np.zeros(len(classDirs))
    for classDir, count in zip(classDirs, counts):
        if count == 0:
            raise DatasetError(f"class {classDir.name} has no decodable images")
    return Dataset(np.stack(images), labels, [d.name for d in classDirs], names=names)


def splitCounts(n, fractions=DEFAULT_FRACTIONS):
    """Largest-remainder allocation of ``n`` samples to splits, at least one each."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (len(SPLITS),) or np.any(fractions < 0) or abs(fractions.sum() - 1) > 1e-6:
        raise ValueError(f"split fractions must be {len(SPLITS)} non-negative values summing to 1, got {fractions}")
    if n < len(SPLITS):
        raise DatasetError(f"cannot split {n} samples into {len(SPLITS)} non-empty parts")
    raw = fractions * n
    counts = np.floor(raw + 1e-9).astype(np.int64)
    remainders = raw - counts
    for i in sorted(range(len(counts)), key=lambda i: (-remainders[i], i))[:n - counts.sum()]:
        counts[i] += 1
    while counts.min() == 0:
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return counts


def splitDataset(dataset, fractions=DEFAULT_FRACTIONS, seed=42):
    """Stratified split into train/val/test.

    Each class is shuffled with its own seeded stream and cut by
    largest-remainder counts, so every class appears in every split.

    :return: Same samples with ``splits`` assigned
    :rtype: Dataset
    """
    splits = np.empty(len(dataset), dtype=object)
    for label in range(dataset.numClasses):
        idx = np.flatnonzero(dataset.labels == label)
        try:
            counts = splitCounts(len(idx), fractions)
        except DatasetError:
            raise DatasetError(
                f"class {dataset.classNames[label]} has {len(idx)} samples, at least {len(SPLITS)} needed"
            ) from None
        rng = np.random.default_rng([seed, label])
        shuffled = idx[rng.permutation(len(idx))]
        bounds = np.cumsum(counts)[:-1]
        for name, part in zip(SPLITS, np.split(shuffled, bounds)):
            splits[part] = name
    return Dataset(dataset.images, dataset.labels, dataset.classNames, splits, dataset.names)


def drawAugmentation(rng, channels, square=True):
    """Draw one augmentation: rotation quarter-turns, horizontal flip and
    per-channel brightness factors in [0.8, 1.2].

    Non-square images only rotate by 0 or 180 degrees.
    """
    rotation = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    flip = bool(rng.random() < 0.5)
    jitter = rng.uniform(0.8, 1.2, size=channels)
    return {'rotation': rotation, 'flip': flip, 'jitter': jitter}


def applyAugmentation(image, rotation=0, flip=False, jitter=None):
    """Apply a drawn augmentation to a (C, H, W) array, clipping to [0, 1]."""
    out = np.rot90(image, k=rotation, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    if jitter is not None:
        out = out * np.asarray(jitter)[:, None, None]
    return np.ascontiguousarray(np.clip(out, 0, 1), dtype=np.float32)


def augment(image, rng):
    """Random rotation, flip and brightness jitter of one image.

    :param image: Tensor or array of shape (C, H, W)
    :param np.random.Generator rng: Seeded stream

    :return: Augmented image of the same type and shape
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    c, h, w = data.shape
    out = applyAugmentation(data, **drawAugmentation(rng, c, square=(h == w)))
    return Tensor.fromArray(out) if isinstance(image, Tensor) else out


def augmentBatch(images, seed, epoch, indices):
    """Augment a batch, each sample from the stream (seed, epoch, index)."""
    out = np.empty_like(images)
    for i, idx in enumerate(indices):
        out[i] = augment(images[i], np.random.default_rng([seed, epoch, int(idx)]))
    return out


def blobCentres(classes, resolution):
    """Blob centre (row, col) per class: the 8 non-centre cells of a 3x3 grid,
    or a finer grid for more than 8 classes."""
    if classes <= 8:
        cells = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)][:classes]
        g = 3
    else:
        g = int(np.ceil(np.sqrt(classes)))
        cells = [(r, c) for r in range(g) for c in range(g)][:classes]
    return [((r + 0.5) * resolution / g, (c + 0.5) * resolution / g) for r, c in cells]


def templateImages(classes=8, resolution=64, channels=3):
    """Noise-free class templates: a Gaussian blob on a 0.2 background.

    :return: float32 array (classes, channels, R, R)
    """
    sigma = resolution / 12
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    templates = np.empty((classes, channels, resolution, resolution), dtype=np.float32)
    for c, (cy, cx) in enumerate(blobCentres(classes, resolution)):
        blob = 0.2 + 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        templates[c] = blob[None, :, :]
    return templates


def syntheticDataset(nPerClass, classes=8, resolution=64, seed=42, noise=0.1, channels=3):
    """Deterministic synthetic corpus: class = blob position, plus Gaussian noise.

    :param int nPerClass: Samples per class, >= 3
    :param int classes: Number of classes, >= 2
    :param float noise: Standard deviation of the additive pixel noise

    :return: Unsplit dataset, samples ordered class by class
    :rtype: Dataset
    """
    if nPerClass < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} samples per class, got {nPerClass}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    templates = templateImages(classes, resolution, channels)
    rng = np.random.default_rng(seed)
    images = np.repeat(templates, nPerClass, axis=0)
    if noise > 0:
        images = images + rng.normal(0, noise, images.shape)
    images = np.clip(images, 0, 1).astype(np.float32)
    labels = np.repeat(np.arange(classes), nPerClass)
    classNames = [f"class{c}" for c in range(classes)]
    names = [f"{classNames[c]}_{i:04d}" for c in range(classes) for i in range(nPerClass)]
    return Dataset(images, labels, classNames, names=names)


def writeImageFolder(dataset, root):
    """Write every sample as root/<class>/<name>.ppm.

    :return: Number of files written
    """
    root = pathlib.Path(root)
    for className in dataset.classNames:
        (root / className).mkdir(parents=True, exist_ok=True)
    for image, label, name in zip(dataset.images, dataset.labels, dataset.names):
        pixels = np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
        if pixels.shape[0] == 1:
            pixels = np.repeat(pixels, 3, axis=0)
        writePPM(root / dataset.classNames[label] / f"{name}.ppm", pixels.transpose(1, 2, 0))
    return len(dataset)
