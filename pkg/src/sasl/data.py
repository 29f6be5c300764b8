"""Datasets: a seeded synthetic oriented-grating task, IDX files and image folders."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    x: np.ndarray  # [N, C, H, W] float64
    y: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or len(self.x) != len(self.y):
            raise DataError(f"inconsistent dataset shapes {self.x.shape} / {self.y.shape}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=int)
        return Dataset(self.x[index], self.y[index], self.class_count)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        """Yield ``(sample_indices, x, y)``; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for s in range(0, len(self), batch_size):
            idx = order[s:s + batch_size]
            yield idx, self.x[idx], self.y[idx]


@dataclass
class DataSplit:
    train: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SyntheticTask:
    """Oriented sinusoidal gratings, one orientation per class.

    ``noise`` scales both the nuisance variation (random phase, frequency
    jitter, contrast) and the additive Gaussian pixel noise; at zero every
    sample of a class is its class template.
    """

    class_count: int = 8
    image_size: int = 24
    samples_per_class: int = 800
    test_per_class: int = 200
    noise: float = 1.0
    seed: int = 0
    channels: int = 1

    def validate(self) -> None:
        if min(self.class_count, self.image_size, self.samples_per_class, self.channels) < 1:
            raise DataError("synthetic task sizes must be positive")
        if self.test_per_class < 0 or self.noise < 0:
            raise DataError("test_per_class and noise must be non-negative")


def _gratings(task: SyntheticTask, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    s = task.image_size
    coords = np.arange(s) - (s - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = np.pi * labels / task.class_count
    base_freq = 2.0 * np.pi / max(s / 3.0, 2.0)
    freq = base_freq * (1.0 + 0.15 * task.noise * rng.uniform(-1, 1, n))
    phase = np.pi * task.noise * rng.uniform(-1, 1, n)
    contrast = 1.0 + 0.3 * task.noise * rng.uniform(-1, 1, n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    img = contrast[:, None, None] * np.sin(freq[:, None, None] * proj + phase[:, None, None])
    img = np.repeat(img[:, None], task.channels, axis=1)
    img += task.noise * rng.standard_normal(img.shape)
    return img


def generate_synthetic(task: SyntheticTask) -> DataSplit:
    """Deterministic train/test split for ``task``; the two draws use separate streams."""
    task.validate()
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(task.seed).spawn(2))

    def draw(per_class: int, rng) -> Dataset:
        y = np.repeat(np.arange(task.class_count), per_class)
        y = y[rng.permutation(len(y))]
        return Dataset(_gratings(task, y, rng), y, task.class_count)

    return DataSplit(draw(task.samples_per_class, train_rng), draw(task.test_per_class, test_rng))


def class_templates(task: SyntheticTask) -> np.ndarray:
    """Noise-free image of every class."""
    clean = SyntheticTask(task.class_count, task.image_size, 1, 0, 0.0, task.seed, task.channels)
    return _gratings(clean, np.arange(task.class_count), np.random.default_rng(0))


def nearest_template_predict(x: np.ndarray, templates: np.ndarray) -> np.ndarray:
    d = ((x[:, None] - templates[None]) ** 2).reshape(len(x), len(templates), -1).sum(axis=2)
    return d.argmin(axis=1)


# ---------------------------------------------------------------------------
# normalization and augmentation


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        return cls(mean, np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]


def normalize_split(split: DataSplit) -> DataSplit:
    """Per-channel standardization with statistics of the training split."""
    norm = Normalizer.fit(split.train.x)
    return DataSplit(Dataset(norm(split.train.x), split.train.y, split.train.class_count),
                     Dataset(norm(split.test.x), split.test.y, split.test.class_count))


def augment(x: np.ndarray, rng: np.random.Generator, max_shift: int = 2, mirror: bool = True) -> np.ndarray:
    """Random translation (zero-filled) and horizontal mirroring per sample."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)))
    dy = rng.integers(0, 2 * max_shift + 1, n)
    dx = rng.integers(0, 2 * max_shift + 1, n)
    flip = rng.random(n) < 0.5 if mirror else np.zeros(n, dtype=bool)
    out = np.empty_like(x)
    for i in range(n):
        img = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {
    0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2),
    0x0C: (">i4", 4), 0x0D: (">f4", 4), 0x0E: (">f8", 8),
}
_IDX_CODES = {np.dtype(v[0]).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError("file too short for an IDX magic number", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError("IDX magic must start with two zero bytes", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", 2)
    if ndim < 1:
        raise ParseError("IDX file declares zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype, size = _IDX_TYPES[code]
    expected = header + int(np.prod(dims)) * size
    if len(raw) != expected:
        raise ParseError(f"IDX payload size mismatch: dims {dims} need {expected} bytes, file has {len(raw)}",
                         min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(np.dtype(dtype).newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise DataError(f"dtype {array.dtype} has no IDX encoding")
    code = _IDX_CODES[native]
    big = array.astype(_IDX_TYPES[code][0])
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + big.tobytes())


def load_idx(images_path, labels_path, class_count: Optional[int] = None) -> Dataset:
    """Images ``[N, H, W]`` or ``[N, C, H, W]`` plus labels ``[N]``; raw pixel values."""
    x = read_idx(images_path)
    y = read_idx(labels_path)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ParseError(f"image IDX must be 3-D or 4-D, got {x.ndim}-D", 3)
    if y.ndim != 1 or len(y) != len(x):
        raise ParseError(f"label IDX has shape {y.shape}, expected ({len(x)},)", 4)
    if len(x) == 0:
        raise DataError("IDX dataset is empty")
    k = int(class_count if class_count is not None else y.max() + 1)
    return Dataset(x.astype(np.float64), y.astype(np.int64), k)


# ---------------------------------------------------------------------------
# image folders: <root>/<class name>/<image>.png


_IMAGE_SUFFIXES = {".png", ".bmp", ".pgm", ".ppm", ".jpg", ".jpeg"}


def load_image_dir(root, grayscale: Optional[bool] = None) -> Dataset:
    """One sub-directory per class (sorted by name); raw 0-255 pixel values."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    files = [(ci, f) for ci, d in enumerate(classes) for f in sorted(d.iterdir())
             if f.suffix.lower() in _IMAGE_SUFFIXES]
    if not files:
        raise DataError(f"no images found under {root}")
    images = []
    for _, f in files:
        with Image.open(f) as im:
            if grayscale is None:
                grayscale = im.mode in ("L", "1", "I;16")
            arr = np.asarray(im.convert("L" if grayscale else "RGB"), dtype=np.float64)
        images.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise DataError(f"images have differing shapes: {sorted(shapes)}")
    return Dataset(np.stack(images), np.array([ci for ci, _ in files]), len(classes))


def write_image_dir(root, dataset: Dataset, class_names: Optional[Sequence[str]] = None) -> None:
    """Write uint8 PNGs; values must already be integers in [0, 255]."""
    from PIL import Image

    root = Path(root)
    x = dataset.x
    if np.any((x < 0) | (x > 255) | (x != np.round(x))):
        raise DataError("pixel values must be integers in [0, 255] to be stored losslessly")
    names = list(class_names) if class_names else [f"class_{i:03d}" for i in range(dataset.class_count)]
    counters = [0] * dataset.class_count
    for img, label in zip(x.astype(np.uint8), dataset.y):
        d = root / names[label]
        d.mkdir(parents=True, exist_ok=True)
        arr = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
        Image.fromarray(arr).save(d / f"{counters[label]:06d}.png")
        counters[label] += 1


def split_dataset(data: Dataset, test_fraction: float, seed: int = 0) -> DataSplit:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return DataSplit(data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test])))
