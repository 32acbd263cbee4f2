"""Datasets: IDX ingestion, splits, augmentation and synthetic glyphs."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (BadMagicError, ConfigError, CountMismatchError, DataError,
                     LabelRangeError, TruncatedFileError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images [N, C, H, W] in [0, 1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def take(self, indices, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - header} bytes, header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped); pixels are scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} holds {len(images)} images but {labels_path} "
                                 f"holds {len(labels)} labels")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels, num_classes, name or Path(images_path).name)


def write_idx(dataset: Dataset, images_path, labels_path, compress: Optional[bool] = None) -> None:
    """Write single-channel images (quantized to bytes) and labels as IDX files."""
    if dataset.images.shape[1] != 1:
        raise DataError("IDX export supports single-channel images only")
    n, _, h, w = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        gz = str(path).endswith(".gz") if compress is None else compress
        Path(path).write_bytes(gzip.compress(payload, mtime=0) if gz else payload)


def load_bundled_mnist(classes: Optional[Sequence[int]] = None) -> Dataset:
    """The 10,000 MNIST digits shipped with the package.

    With ``classes`` the set is filtered and relabelled to ``0..len(classes)-1``
    in the given order.
    """
    root = resources.files("capsrem") / "datasets"
    with resources.as_file(root / "mnist10k-images-idx3-ubyte.gz") as ip, \
            resources.as_file(root / "mnist10k-labels-idx1-ubyte.gz") as lp:
        ds = load_idx(ip, lp, num_classes=10, name="mnist10k")
    if classes is not None:
        ds = filter_classes(ds, classes)
    return ds


def filter_classes(dataset: Dataset, classes: Sequence[int]) -> Dataset:
    classes = [int(c) for c in classes]
    keep = np.isin(dataset.labels, classes)
    remap = np.full(max(dataset.num_classes, max(classes) + 1), -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    return Dataset(dataset.images[keep], remap[dataset.labels[keep]], len(classes),
                   f"{dataset.name}[{','.join(map(str, classes))}]")


def split(dataset: Dataset, val_fraction: float, seed: int = 0):
    """Seeded shuffle, then the first ``round(N * val_fraction)`` samples go to validation."""
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must lie strictly between 0 and 1, got {val_fraction}")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return (dataset.take(np.sort(perm[n_val:]), f"{dataset.name}/train"),
            dataset.take(np.sort(perm[:n_val]), f"{dataset.name}/val"))


def split_counts(dataset: Dataset, n_first: int, n_second: int, seed: int = 0):
    """Disjoint random subsets of exactly the requested sizes."""
    if n_first + n_second > len(dataset):
        raise DataError(f"asked for {n_first}+{n_second} samples from a set of {len(dataset)}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return (dataset.take(np.sort(perm[:n_first])),
            dataset.take(np.sort(perm[n_first:n_first + n_second])))


def pad_translate(dataset: Dataset, pad: int, max_shift: int, seed: int = 0) -> Dataset:
    """Centre each image on a black canvas grown by ``pad`` per side, then shift it
    by uniform integer offsets in ``[-max_shift, max_shift]`` on both axes."""
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    if not 0 <= max_shift <= pad:
        raise ConfigError(f"max_shift must lie in [0, pad={pad}], got {max_shift}")
    n, c, h, w = dataset.images.shape
    rng = np.random.default_rng(seed)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dataset.images.dtype)
    for k, (dy, dx) in enumerate(shifts):
        out[k, :, pad + dy:pad + dy + h, pad + dx:pad + dx + w] = dataset.images[k]
    return Dataset(out, dataset.labels.copy(), dataset.num_classes, f"{dataset.name}+pad{pad}")


GLYPHS = ("bar", "cross", "box", "diag", "ring", "dot")


def _glyph(kind: str, g: int) -> np.ndarray:
    a = np.zeros((g, g), dtype=np.float32)
    mid = g // 2
    if kind == "bar":
        a[mid - 1:mid + 1, :] = 1
    elif kind == "cross":
        a[mid - 1:mid + 1, :] = 1
        a[:, mid - 1:mid + 1] = 1
    elif kind == "box":
        a[:2, :] = a[-2:, :] = a[:, :2] = a[:, -2:] = 1
    elif kind == "diag":
        idx = np.arange(g)
        a[idx, idx] = 1
        a[idx[1:], idx[:-1]] = 1
    elif kind == "ring":
        yy, xx = np.mgrid[:g, :g]
        rad = np.hypot(yy - (g - 1) / 2, xx - (g - 1) / 2)
        a[(rad <= (g - 1) / 2) & (rad >= (g - 1) / 2 - 1.5)] = 1
    elif kind == "dot":
        q = max(g // 4, 1)
        a[mid - q:mid + q, mid - q:mid + q] = 1
    else:
        raise ConfigError(f"unknown glyph {kind!r}")
    return a


def synth_shapes(n: int, classes: int = 2, size: int = 28, seed: int = 0) -> Dataset:
    """Binary glyphs (bar, cross, box, diag, ring, dot) at jittered positions.

    Labels are balanced to within one sample; everything is determined by ``seed``.
    """
    if not 2 <= classes <= len(GLYPHS):
        raise ConfigError(f"classes must lie in 2..{len(GLYPHS)}, got {classes}")
    if size < 12:
        raise ConfigError(f"size must be >= 12, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    g = size // 2
    jitter = size // 6
    base = (size - g) // 2
    glyphs = [_glyph(k, g) for k in GLYPHS[:classes]]
    images = np.zeros((n, 1, size, size), dtype=np.float32)
    offsets = rng.integers(-jitter, jitter + 1, size=(n, 2))
    for k in range(n):
        y, x = base + offsets[k]
        images[k, 0, y:y + g, x:x + g] = glyphs[labels[k]]
    return Dataset(images, labels.astype(np.int64), classes, f"shapes{classes}")
