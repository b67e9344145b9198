"""Datasets: CIFAR-10 binary batches, tensor files, and synthetic images."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from headdet.errors import FormatError

TENSOR_MAGIC = b"HEADTEN1"
CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"samples {x.shape} and labels {y.shape} do not line up")
        if y.size and y.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def head(self, n: int) -> "Dataset":
        return Dataset(self.samples[:n], self.labels[:n], self.name)


def load_cifar10_batch(path) -> Dataset:
    """Read a CIFAR-10 binary batch: a label byte then 3072 pixel bytes per record.

    Pixels keep the file's channel-plane order (R, G, B; each 32x32 row-major)
    and are scaled to ``[0, 1]``.
    """
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        warnings.warn(f"{path}: empty CIFAR batch")
        return Dataset(np.zeros((0, CIFAR_PIXELS)), np.zeros(0, np.int64), Path(path).stem)
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; truncated record at byte offset {offset}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label byte {labels[i]} > 9 in record {i} at byte offset {i * CIFAR_RECORD}")
    return Dataset(records[:, 1:].astype(np.float64) / 255.0, labels, Path(path).stem)


def downscale_cifar(samples: np.ndarray, factor: int = 2, grayscale: bool = True) -> np.ndarray:
    """Average-pool 32x32 CIFAR images by ``factor`` (optionally to one channel)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 3, 32, 32)
    if grayscale:
        x = x.mean(axis=1, keepdims=True)
    s = 32 // factor
    x = x.reshape(x.shape[0], x.shape[1], s, factor, s, factor).mean(axis=(3, 5))
    return x.reshape(x.shape[0], -1)


def save_tensor_file(path, matrix, labels=None) -> None:
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"tensor file holds a 2-D matrix, got shape {X.shape}")
    parts = [TENSOR_MAGIC, struct.pack("<IIB", X.shape[0], X.shape[1], 0 if labels is None else 1)]
    if labels is not None:
        y = np.asarray(labels)
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if y.size and (y.min() < 0 or y.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        parts.append(y.astype("<u2").tobytes())
    parts.append(np.ascontiguousarray(X, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensor_file(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(matrix, labels)``; labels is ``None`` when the file has none."""
    raw = Path(path).read_bytes()
    if len(raw) < 17:
        raise FormatError(f"{path}: file too short for a tensor header ({len(raw)} bytes)")
    if raw[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {TENSOR_MAGIC!r}")
    n, m, has_labels = struct.unpack_from("<IIB", raw, 8)
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: has-labels flag must be 0 or 1, got {has_labels}")
    offset = 17
    expected = offset + (2 * n if has_labels else 0) + 8 * n * m
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n}x{m}, got {len(raw)}")
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, "<u2", n, offset).astype(np.int64)
        offset += 2 * n
    X = np.frombuffer(raw, "<f8", n * m, offset).reshape(n, m).astype(np.float64)
    return X, labels


def load_dataset(path, name: str | None = None) -> Dataset:
    """Load a labelled tensor file, or a CIFAR-10 batch by its ``.bin`` suffix."""
    path = Path(path)
    if path.suffix == ".bin" and path.read_bytes()[:8] != TENSOR_MAGIC:
        return load_cifar10_batch(path)
    X, y = load_tensor_file(path)
    if y is None:
        raise FormatError(f"{path}: tensor file has no labels but a labelled dataset was requested")
    return Dataset(X, y, name or path.stem)


def _dct_basis(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal 2-D DCT-II images (rows) and their radial frequencies."""
    k = np.arange(side)
    C = np.cos(np.pi * (k[None, :] + 0.5) * k[:, None] / side)
    C[0] *= 1 / np.sqrt(2)
    C *= np.sqrt(2 / side)
    basis = np.einsum("ui,vj->uvij", C, C).reshape(side * side, side * side)
    freq = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2).ravel()
    return basis, freq


def synthetic_images(
    n_train: int,
    n_test: int,
    side: int = 16,
    n_classes: int = 10,
    seed: int = 0,
    decay: float = 1.0,
    class_scale: float = 0.14,
    style_scale: float = 1.5,
    class_cutoff: float = 4.0,
    contrast: float = 0.15,
    class_band_style: float = 0.03,
    texture_scale: float = 0.02,
    texture_band: tuple[float, float] = (16.0, 22.0),
    brightness: float = 0.12,
    quantize: bool = True,
) -> tuple[Dataset, Dataset]:
    """Labelled grayscale images with a natural-image-like spectrum.

    Images are built in a 2-D cosine basis.  Per-image style variation has
    amplitudes falling off as ``(1 + f)^-(1 + decay)`` in radial frequency
    ``f``, damped by ``class_band_style`` below ``class_cutoff``, where the
    class templates live.  Templates are mutually orthogonal with a common
    norm, so every pair of classes is equally far apart.  Each class also
    carries a faint fixed texture (``texture_scale`` per coefficient) in
    ``texture_band``.

    The smooth field is scaled to an expected pixel standard deviation of
    ``contrast`` around a per-image brightness drawn from
    ``N(0.5, brightness^2)``.  Pixels are clipped to ``[0, 1]`` and, by
    default, rounded to 8-bit levels.  Train and test share templates.
    """
    rng = np.random.default_rng(seed)
    basis, freq = _dct_basis(side)
    amp = (1.0 + freq) ** -(1.0 + decay)
    amp[0] = 0.0  # brightness is drawn separately below
    low = freq < class_cutoff
    style_amp = style_scale * amp * np.where(low, class_band_style, 1.0)
    low[0] = False
    templates = np.zeros((n_classes, basis.shape[0]))
    raw = rng.normal(size=(n_classes, int(low.sum())))
    if n_classes <= raw.shape[1]:
        # orthonormal rows put every pair of class means the same distance apart
        raw = np.linalg.qr(raw.T)[0].T
    else:
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    templates[:, low] = class_scale * np.sqrt(np.sum(amp[low] ** 2)) * raw
    band = (freq >= texture_band[0]) & (freq < texture_band[1])
    texture = texture_scale * rng.normal(size=(n_classes, basis.shape[0])) * band
    # orthonormal basis: mean pixel variance = total coefficient variance / m
    field_var = (np.sum(templates**2) / n_classes + np.sum(style_amp**2)) / basis.shape[0]
    gain = contrast / np.sqrt(field_var)

    def draw(n: int, name: str) -> Dataset:
        y = rng.integers(0, n_classes, size=n)
        coef = templates[y] + rng.normal(size=(n, basis.shape[0])) * style_amp
        shift = brightness * rng.normal(size=(n, 1))
        x = 0.5 + shift + gain * (coef @ basis) + texture[y] @ basis
        x = np.clip(x, 0.0, 1.0)
        if quantize:
            x = np.round(x * 255.0) / 255.0
        return Dataset(x, y, name)

    return draw(n_train, "synthetic-train"), draw(n_test, "synthetic-test")
