"""Datasets: synthetic 2-class toys and an IDX (MNIST format) reader."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndcore import make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray          # (n, d)
    labels: np.ndarray          # (n,) int64
    class_count: int
    value_range: tuple[float, float] = (0.0, 1.0)
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.value_range = tuple(float(v) for v in self.value_range)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-d, got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")
        lo, hi = self.value_range
        if self.inputs.size and (self.inputs.min() < lo or self.inputs.max() > hi):
            raise ValueError(f"inputs outside value range {self.value_range}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.value_range, self.name)

    def split(self, test_fraction: float, seed) -> tuple["Dataset", "Dataset"]:
        """Shuffled train/test split; the test part has round(n * test_fraction) samples."""
        if not 0.0 <= test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")
        order = make_rng(seed).permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def _minmax(Z: np.ndarray) -> np.ndarray:
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    span = hi - lo
    out = np.full_like(Z, 0.5)
    ok = span > 0
    out[:, ok] = (Z[:, ok] - lo[ok]) / span[ok]
    return out


def _blobs(rng, n, noise):
    y = np.arange(n) % 2
    centers = np.array([[-1.0, -1.0], [1.0, 1.0]])
    return centers[y] + noise * rng.normal(size=(n, 2)), y


def _moons(rng, n, noise):
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, math.pi, n_out)
    t_in = np.linspace(0.0, math.pi, n_in)
    Z = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    y = np.concatenate([np.zeros(n_out, np.int64), np.ones(n_in, np.int64)])
    Z = Z + noise * rng.normal(size=Z.shape)
    perm = rng.permutation(n)
    return Z[perm], y[perm]


def generate_synthetic(kind: str, n: int, noise: float = 0.1, seed=0, lift_dim: int | None = None,
                       lift_scale: float = 3.0) -> Dataset:
    """Two-class toy data scaled into [0, 1]^d.

    The 2-d points are min-max scaled per coordinate.  With ``lift_dim``
    they are mapped through ``sigmoid(lift_scale * (A (z - 1/2) + b))`` with a
    fixed random Gaussian ``A`` (lift_dim x 2) and ``b``, which keeps every
    feature inside (0, 1).
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = make_rng((seed, 0))
    if kind == "blobs":
        Z, y = _blobs(rng, n, noise)
    elif kind == "moons":
        Z, y = _moons(rng, n, noise)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    Z = _minmax(Z)
    name = kind
    if lift_dim:
        lrng = make_rng((seed, 1))
        A = lrng.normal(size=(lift_dim, 2))
        b = lrng.normal(scale=0.5, size=lift_dim)
        Z = 1.0 / (1.0 + np.exp(-lift_scale * ((Z - 0.5) @ A.T + b)))
        name = f"{kind}-lift{lift_dim}"
    return Dataset(Z, y, 2, (0.0, 1.0), name)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated at offset {len(raw)} while reading magic (offset 0)")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated header, file ends at offset {len(raw)} (need {need})")
    return struct.unpack_from(">" + "I" * ndim, raw, 4)


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    raw_i = _read_bytes(images_path)
    raw_l = _read_bytes(labels_path)
    n_img, rows, cols = _header(raw_i, IMAGE_MAGIC, 3, images_path)
    (n_lab,) = _header(raw_l, LABEL_MAGIC, 1, labels_path)
    if n_img != n_lab:
        raise IdxFormatError(f"count mismatch: {images_path} has {n_img} images, {labels_path} has {n_lab} labels")
    off_i, off_l = 16, 8
    need_i = off_i + n_img * rows * cols
    if len(raw_i) < need_i:
        raise IdxFormatError(f"{images_path}: truncated data, file ends at offset {len(raw_i)} (expected {need_i})")
    if len(raw_l) < off_l + n_lab:
        raise IdxFormatError(f"{labels_path}: truncated data, file ends at offset {len(raw_l)} "
                             f"(expected {off_l + n_lab})")
    n = n_img if limit is None else min(int(limit), n_img)
    if n < 0:
        raise ValueError("limit must be >= 0")
    pix = np.frombuffer(raw_i, dtype=np.uint8, count=n * rows * cols, offset=off_i).reshape(n, rows * cols)
    lab = np.frombuffer(raw_l, dtype=np.uint8, count=n, offset=off_l).astype(np.int64)
    k = max(10, int(lab.max()) + 1) if n else 10
    return Dataset(pix.astype(np.float64) / 255.0, lab, k, (0.0, 1.0), Path(images_path).name)


def raw_image_bytes(images_path, index: int) -> bytes:
    """Raw pixel bytes of one image, for checksums."""
    raw = _read_bytes(images_path)
    n, rows, cols = _header(raw, IMAGE_MAGIC, 3, images_path)
    if not 0 <= index < n:
        raise IndexError(f"image {index} out of range (file has {n})")
    size = rows * cols
    start = 16 + index * size
    if len(raw) < start + size:
        raise IdxFormatError(f"{images_path}: truncated data, file ends at offset {len(raw)}")
    return raw[start:start + size]
