import gzip
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from src.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

DESK_CLASSES = (
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "checkerboard",
    "disk",
    "ring",
    "square",
    "cross",
    "saltire",
    "triangle",
)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
DESK_TRAIN_SEED = 1234
DESK_TEST_SEED = 4321


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    
    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"Images must be NCHW, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"{self.images.shape[0]} images but labels shaped {self.labels.shape}")
            
    def __len__(self) -> int:
        return int(self.images.shape[0])
    
    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])
    
    def subset(self, count: int) -> "LabeledImages":
        return LabeledImages(self.images[:count], self.labels[:count], self.name)
    
    def batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        rng: Optional[np.random.Generator] = None
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self))
        if shuffle:
            (rng or np.random.default_rng(0)).shuffle(order)
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    return ((pixels - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


# Desk dataset: seeded colored geometric patterns

def _stripes(coord: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    period = int(rng.choice([4, 6, 8]))
    phase = int(rng.integers(period))
    return ((coord + phase) % period) < period // 2


def _centered(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cy = size / 2 + rng.uniform(-3, 3)
    cx = size / 2 + rng.uniform(-3, 3)
    return yy - cy, xx - cx


def _horizontal(size, rng):
    yy, _ = np.mgrid[0:size, 0:size]
    return _stripes(yy, rng)


def _vertical(size, rng):
    _, xx = np.mgrid[0:size, 0:size]
    return _stripes(xx, rng)


def _diagonal(size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    return _stripes(yy + xx, rng)


def _checkerboard(size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    cell = int(rng.choice([2, 3, 4]))
    oy, ox = rng.integers(cell, size=2)
    return (((yy + oy) // cell + (xx + ox) // cell) % 2) == 0


def _disk(size, rng):
    dy, dx = _centered(size, rng)
    radius = rng.uniform(0.2, 0.34) * size
    return dy ** 2 + dx ** 2 <= radius ** 2


def _ring(size, rng):
    dy, dx = _centered(size, rng)
    outer = rng.uniform(0.28, 0.4) * size
    inner = outer - rng.uniform(2.5, 4.0)
    dist2 = dy ** 2 + dx ** 2
    return (dist2 <= outer ** 2) & (dist2 >= inner ** 2)


def _square(size, rng):
    dy, dx = _centered(size, rng)
    half = rng.uniform(0.18, 0.32) * size
    return (np.abs(dy) <= half) & (np.abs(dx) <= half)


def _cross(size, rng):
    dy, dx = _centered(size, rng)
    width = rng.uniform(1.5, 3.0)
    arm = rng.uniform(0.28, 0.4) * size
    return ((np.abs(dy) <= width) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= width) & (np.abs(dy) <= arm))


def _saltire(size, rng):
    dy, dx = _centered(size, rng)
    width = rng.uniform(1.5, 2.5)
    arm = rng.uniform(0.28, 0.4) * size
    inside = (np.abs(dy) <= arm) & (np.abs(dx) <= arm)
    return inside & ((np.abs(dy - dx) <= width) | (np.abs(dy + dx) <= width))


def _triangle(size, rng):
    dy, dx = _centered(size, rng)
    height = rng.uniform(0.45, 0.7) * size
    t = (dy + height / 2) / height
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * height * 0.6)


_PATTERNS: tuple[Callable[[int, np.random.Generator], np.ndarray], ...] = (
    _horizontal, _vertical, _diagonal, _checkerboard, _disk,
    _ring, _square, _cross, _saltire, _triangle,
)


def _render(label: int, size: int, channels: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    mask = _PATTERNS[label](size, rng).astype(np.float32)
    fg = rng.uniform(0.0, 1.0, size=channels).astype(np.float32)
    bg = np.mod(fg + 0.5 + rng.uniform(-0.15, 0.15, size=channels), 1.0).astype(np.float32)
    pixels = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
    pixels = pixels + rng.normal(0.0, noise, size=pixels.shape)
    return pixels.astype(np.float32)


def make_desk_dataset(
    num_samples: int,
    seed: int,
    size: int = 32,
    channels: int = 3,
    noise: float = 0.05,
    name: str = "desk"
) -> LabeledImages:
    """Balanced 10-class set of colored geometric patterns, normalized.

    Labels cycle 0..9 and each image draws its geometry, colors and noise
    from one seeded stream, so (num_samples, seed) fully determine the set.
    """
    if num_samples < 1:
        raise ConfigError(f"num_samples must be positive, got {num_samples}")
    rng = np.random.default_rng(seed)
    labels = np.arange(num_samples) % len(DESK_CLASSES)
    images = np.stack([_render(int(k), size, channels, rng, noise) for k in labels])
    return LabeledImages(normalize_pixels(images), labels, name)


# MNIST-style IDX ingestion

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: Path | str) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise ConfigError(f"{path} is not an IDX file")
    ndim = raw[3]
    header = 4 + 4 * ndim
    dims = tuple(int(d) for d in np.frombuffer(raw[4:header], dtype=">u4"))
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < expected:
        raise ConfigError(f"{path} is truncated: expected {expected} data bytes")
    return np.frombuffer(raw[header:header + expected], dtype=dtype).reshape(dims)


def load_idx_dataset(
    images_path: Path | str,
    labels_path: Path | str,
    size: int = 32,
    channels: int = 3,
    limit: Optional[int] = None
) -> LabeledImages:
    """Load IDX images (N x H x W, 0..255), zero-pad to ``size`` and replicate channels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3:
        raise ShapeError(f"IDX images must be N x H x W, got {images.shape}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    n, h, w = images.shape
    if h > size or w > size:
        raise ShapeError(f"IDX images {h}x{w} larger than input size {size}")
    top, left = (size - h) // 2, (size - w) // 2
    canvas = np.zeros((n, size, size), dtype=np.float32)
    canvas[:, top:top + h, left:left + w] = images.astype(np.float32) / 255.0
    pixels = np.repeat(canvas[:, None], channels, axis=1)
    logger.info(f"Loaded {n} IDX images from {images_path}")
    return LabeledImages(normalize_pixels(pixels), labels, Path(images_path).stem)


def load_dataset(
    dataset_id: str,
    num_samples: Optional[int] = None,
    size: int = 32,
    channels: int = 3
) -> LabeledImages:
    """Resolve ``desk-train``, ``desk-test`` or ``idx:<images>,<labels>``."""
    if dataset_id == "desk-train":
        return make_desk_dataset(num_samples or 2000, DESK_TRAIN_SEED, size, channels, name=dataset_id)
    if dataset_id == "desk-test":
        return make_desk_dataset(num_samples or 1000, DESK_TEST_SEED, size, channels, name=dataset_id)
    if dataset_id.startswith("idx:"):
        parts = dataset_id[4:].split(",")
        if len(parts) != 2:
            raise ConfigError(f"IDX dataset id needs '<images>,<labels>', got {dataset_id}")
        return load_idx_dataset(parts[0], parts[1], size, channels, num_samples)
    raise ConfigError(f"Unknown dataset: {dataset_id}")
