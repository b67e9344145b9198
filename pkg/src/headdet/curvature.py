"""Loss curvature features built from Generalized Gauss-Newton matrices.

For softmax cross-entropy the Hessian w.r.t. the logits is
``diag(p) - p p^T`` and does not depend on the label.  Sandwiching it between
the logit Jacobians of a layer gives the GGN for that layer, which for a
ReLU network equals the true loss Hessian everywhere except on activation
kinks.
"""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from headdet.errors import ContractError, FormatError, ShapeError
from headdet.parallel import map_chunks
from headdet.smallnet import (
    NetworkModel,
    NetworkSpec,
    ActivationTrace,
    check_layer,
    forward,
    init_model,
    jacobian_logits,
    loss_grad_from_layer,
    softmax,
)
from headdet.spectral import EigenBasis, lscf

FEATURE_MAGIC = b"HEADFEA1"
NORMS = ("l1", "l2")


@dataclass(frozen=True)
class GgnMatrix:
    layer: int
    entries: np.ndarray


@dataclass(frozen=True)
class HessianFeature:
    """Curvature moduli: index 0 is the input, then each ReLU output in depth order."""

    moduli: np.ndarray


@dataclass(frozen=True)
class HeadFeature:
    """LSCF projections followed by Hessian feature moduli."""

    values: np.ndarray
    lscf_dim: int

    @property
    def lscf(self) -> np.ndarray:
        return self.values[..., : self.lscf_dim]

    @property
    def hessian(self) -> np.ndarray:
        return self.values[..., self.lscf_dim:]


def softmax_ce_hessian(logits) -> np.ndarray:
    """Hessian of softmax cross-entropy w.r.t. the logits, ``diag(p) - p p^T``."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ContractError("logits must be finite")
    p = softmax(z)
    H = -p[..., :, None] * p[..., None, :]
    idx = np.arange(z.shape[-1])
    H[..., idx, idx] += p
    return H


def _sandwich(J: np.ndarray, logits: np.ndarray) -> np.ndarray:
    # diag(p) - p p^T = B^T B with B = diag(sqrt p) (I - 1 p^T), so the GGN is
    # the Gram matrix of B J: symmetric PSD by construction
    p = softmax(logits)
    A = np.sqrt(p)[..., :, None] * (J - p[..., None, :] @ J)
    return np.swapaxes(A, -1, -2) @ A


def ggn(model: NetworkModel, trace: ActivationTrace, layer: int) -> GgnMatrix:
    """Gauss-Newton matrix ``J^T H_z J`` of the loss w.r.t. the output of ``layer``."""
    J = jacobian_logits(model, trace, layer)
    return GgnMatrix(layer, _sandwich(J, trace.logits))


def modulus(M, norm: str = "l1") -> np.ndarray | float:
    """Entrywise matrix norm over the last two axes (``l1``: sum of magnitudes)."""
    M = np.asarray(M, dtype=np.float64)
    if norm == "l1":
        out = np.abs(M).sum(axis=(-2, -1))
    elif norm == "l2":
        out = np.sqrt((M * M).sum(axis=(-2, -1)))
    else:
        raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")
    return float(out) if np.ndim(out) == 0 else out


def modulus_l1(M) -> np.ndarray | float:
    return modulus(M, "l1")


def _feature_rows(model: NetworkModel, x: np.ndarray, norm: str) -> np.ndarray:
    trace = forward(model, x)
    cols = []
    for layer in range(model.spec.n_relu + 1):
        G = _sandwich(jacobian_logits(model, trace, layer), trace.logits)
        cols.append(modulus(G, norm))
    return np.stack(cols, axis=-1)


def _chunk_for(spec: NetworkSpec) -> int:
    widest = max(spec.layer_dims[: spec.n_relu + 1])
    return max(1, min(256, 2_000_000 // (widest * widest)))


def hessian_feature(model: NetworkModel, x, norm: str = "l1", threads: int = 1) -> HessianFeature:
    """Curvature moduli at the input and at every ReLU output.

    ``x`` may be one sample or a batch; a batch yields moduli of shape
    ``(B, 1 + n_relu)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.spec.n_inputs:
        raise ShapeError(f"input must have trailing dimension {model.spec.n_inputs}, got shape {x.shape}")
    if x.ndim == 1:
        return HessianFeature(_feature_rows(model, x, norm))
    if x.shape[0] == 0:
        return HessianFeature(np.zeros((0, model.spec.n_relu + 1)))
    rows = map_chunks(lambda part: _feature_rows(model, part, norm), x, _chunk_for(model.spec), threads)
    return HessianFeature(rows)


def head_feature(
    x, basis: EigenBasis, d: int, model: NetworkModel, norm: str = "l1", threads: int = 1
) -> HeadFeature:
    """Concatenate LSCF projections and Hessian feature moduli."""
    x = np.asarray(x, dtype=np.float64)
    if basis.dim != model.spec.n_inputs:
        raise ShapeError(f"basis dimension {basis.dim} does not match model input {model.spec.n_inputs}")
    left = lscf(x, basis, d)
    right = hessian_feature(model, x, norm, threads).moduli
    return HeadFeature(np.concatenate([left, right], axis=-1), d)


def fd_hessian(model: NetworkModel, x, layer: int, label: int, h: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of the loss w.r.t. the output of ``layer``.

    Column ``j`` is ``(g(v + h e_j) - g(v - h e_j)) / 2h`` where ``g`` is the
    loss gradient at that layer, one gradient pass per stencil point; the
    result is symmetrised.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    check_layer(model.spec, layer)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"fd_hessian takes a single sample, got shape {x.shape}")
    v = forward(model, x).layer_output(layer)
    n = v.shape[0]
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        g_plus = loss_grad_from_layer(model, v + e, layer, label)
        g_minus = loss_grad_from_layer(model, v - e, layer, label)
        H[:, j] = (g_plus - g_minus) / (2.0 * h)
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class BenchmarkRow:
    dim: int
    ggn_seconds: float
    fd_seconds: float

    @property
    def ratio(self) -> float:
        return self.fd_seconds / self.ggn_seconds if self.ggn_seconds > 0 else float("inf")


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def curvature_benchmark(
    dims, repeats: int = 5, n_classes: int = 10, hidden=(128, 64), seed: int = 0
) -> list[BenchmarkRow]:
    """Wall-clock of input-layer GGN versus finite-difference Hessian per input size.

    Each timing is the best of ``repeats`` runs on a random network
    ``dim -> hidden... -> n_classes``.
    """
    dims = list(dims)
    if not dims:
        raise ValueError("dims must be nonempty")
    if repeats <= 0:
        return []
    rows = []
    rng = np.random.default_rng(seed)
    for dim in dims:
        model = init_model(NetworkSpec((dim, *hidden, n_classes)), seed=int(rng.integers(2**31)))
        x = rng.uniform(0.0, 1.0, size=dim)
        t_ggn = _best_time(lambda: ggn(model, forward(model, x), 0), repeats)
        t_fd = _best_time(lambda: fd_hessian(model, x, 0, 0), repeats)
        rows.append(BenchmarkRow(int(dim), t_ggn, t_fd))
    return rows


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "ggn_seconds", "fd_seconds", "ratio"])
        for r in rows:
            w.writerow([r.dim, f"{r.ggn_seconds:.6e}", f"{r.fd_seconds:.6e}", f"{r.ratio:.4f}"])


def feature_header(lscf_dim: int, n_hf: int) -> list[str]:
    return ["sample_id"] + [f"lscf_{i}" for i in range(lscf_dim)] + [f"hf_{i}" for i in range(n_hf)]


def save_features_csv(path, features, lscf_dim: int) -> None:
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(feature_header(lscf_dim, F.shape[1] - lscf_dim))
        for i, row in enumerate(F):
            w.writerow([i] + [repr(float(v)) for v in row])


def load_features_csv(path) -> tuple[np.ndarray, int]:
    """Read a feature CSV; returns the matrix and the LSCF dimension."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty feature file") from None
        if not header or header[0] != "sample_id":
            raise FormatError(f"{path}: first column must be sample_id, got {header[:1]}")
        rows = [[float(v) for v in r[1:]] for r in reader if r]
    lscf_dim = sum(1 for h in header if h.startswith("lscf_"))
    width = len(header) - 1
    F = np.array(rows, dtype=np.float64).reshape(-1, width)
    return F, lscf_dim


def save_features_bin(path, features) -> None:
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    header = FEATURE_MAGIC + struct.pack("<II", F.shape[0], F.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(F, dtype="<f8").tobytes())


def load_features_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short for a feature header ({len(raw)} bytes)")
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {FEATURE_MAGIC!r}")
    count, width = struct.unpack_from("<II", raw, 8)
    if len(raw) != 16 + 8 * count * width:
        raise FormatError(f"{path}: expected {16 + 8 * count * width} bytes for {count}x{width}, got {len(raw)}")
    return np.frombuffer(raw, "<f8", count * width, 16).reshape(count, width).astype(np.float64)
