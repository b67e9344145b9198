"""Covariance eigenbases and least-significant-component projections.

The eigensolver is a cyclic Jacobi method.  Sweeps visit the index pairs in
round-robin (tournament) order so that each round is a set of disjoint plane
rotations that can be applied to the whole matrix at once; a sweep still
annihilates every off-diagonal pair exactly once.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from headdet.errors import ContractError, ConvergenceError, DegenerateDataError, FormatError, ShapeError

BASIS_MAGIC = b"HEADEIG1"
DEFAULT_LSCF_DIM = 32


@dataclass(frozen=True)
class EigenBasis:
    """Eigenvectors (columns of ``vectors``) with eigenvalues in descending order."""

    vectors: np.ndarray
    values: np.ndarray
    centered: bool
    mean: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _data_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ShapeError(f"data matrix must be 2-D, got shape {D.shape}")
    if D.shape[0] < 2:
        raise DegenerateDataError(f"need at least 2 samples to estimate a covariance, got {D.shape[0]}")
    if not np.all(np.isfinite(D)):
        raise ContractError("data matrix contains non-finite entries")
    return D


def covariance(D, center: bool = False) -> np.ndarray:
    """Second-moment matrix ``D^T D / (N - 1)``, optionally of mean-centred data."""
    D = _data_matrix(D)
    if center:
        # shifting by a sample first keeps constant columns exactly zero
        D = D - D[0]
        D = D - D.mean(axis=0)
    C = D.T @ D / (D.shape[0] - 1)
    return 0.5 * (C + C.T)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method: index 0 stays fixed, the rest rotate
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        top = players[: n // 2]
        bot = players[n // 2:][::-1]
        p = np.array([min(a, b) for a, b in zip(top, bot)])
        q = np.array([max(a, b) for a, b in zip(top, bot)])
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(A: np.ndarray) -> float:
    off = A - np.diag(np.diag(A))
    return float(np.linalg.norm(off))


def _jacobi(C: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    n = C.shape[0]
    size = n + (n % 2)
    A = np.zeros((size, size))
    A[:n, :n] = C
    V = np.eye(size)
    scale = np.linalg.norm(C)
    if scale == 0.0 or n == 1:
        return np.diag(C).copy(), np.eye(n)
    threshold = tol * scale
    rounds = _round_robin(size)
    for sweep in range(max_sweeps + 1):
        off = _off_norm(A)
        if off <= threshold:
            return np.diag(A)[:n].copy(), V[:n, :n].copy()
        if sweep == max_sweeps:
            raise ConvergenceError("Jacobi eigensolver did not converge", sweep, off / scale)
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = A[p, p], A[q, q]
            tau = (aqq - app) / (2.0 * apq)
            # hypot avoids overflow of tau**2 when apq is tiny
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- R^T A R with R acting on the (p, q) planes
            Ap, Aq = A[p, :], A[q, :]
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p], A[:, q]
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p], V[:, q]
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    raise AssertionError("unreachable")


def eig_sym(C, tol: float = 1e-12, max_sweeps: int = 100, symmetry_tol: float = 1e-8) -> EigenBasis:
    """Eigendecomposition of a symmetric matrix ``C = V diag(values) V^T``.

    Eigenvalues come out in descending order and every eigenvector is
    sign-normalised so that its largest-magnitude entry is nonnegative.  The
    returned basis is uncentred with a zero mean; use :func:`fit_basis` to
    attach a data mean.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ContractError("matrix contains non-finite entries")
    asym = float(np.max(np.abs(C - C.T))) if C.size else 0.0
    if asym > symmetry_tol:
        raise ContractError(f"matrix is not symmetric (max |C - C^T| = {asym:.3e})")
    C = 0.5 * (C + C.T)
    values, V = _jacobi(C, tol, max_sweeps)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    V = V[:, order]
    pivots = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[pivots, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    V = V * signs
    return EigenBasis(V, values, False, np.zeros(C.shape[0]))


def fit_basis(D, center: bool = False, **solver) -> EigenBasis:
    """Eigenbasis of the covariance of the rows of ``D``."""
    D = _data_matrix(D)
    basis = eig_sym(covariance(D, center), **solver)
    mean = D.mean(axis=0) if center else np.zeros(D.shape[1])
    return EigenBasis(basis.vectors, basis.values, center, mean)


def lscf_directions(basis: EigenBasis, d: int) -> np.ndarray:
    """The ``d`` eigenvectors with the smallest eigenvalues, smallest first."""
    m = basis.dim
    if not 1 <= d <= m:
        raise ContractError(f"LSCF dimension must be in 1..{m}, got {d}")
    return basis.vectors[:, ::-1][:, :d]


def lscf(x, basis: EigenBasis, d: int = DEFAULT_LSCF_DIM) -> np.ndarray:
    """Project samples onto the least significant eigenvectors.

    Component 0 corresponds to the smallest eigenvalue.  ``x`` may be one
    sample or a batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.dim:
        raise ShapeError(f"sample dimension {x.shape[-1]} does not match basis dimension {basis.dim}")
    if basis.centered:
        x = x - basis.mean
    return x @ lscf_directions(basis, d)


@dataclass(frozen=True)
class VarianceBoundReport:
    """Per-component projected variances before and after perturbation.

    ``gap`` is the perturbation budget ``||dx||^2`` minus the observed
    variance increase ``var_perturbed - var_benign``.
    """

    lam: np.ndarray
    var_benign: np.ndarray
    var_perturbed: np.ndarray
    norm_sq: float

    @property
    def bound(self) -> np.ndarray:
        return self.lam + self.norm_sq

    @property
    def gap(self) -> np.ndarray:
        return self.norm_sq - (self.var_perturbed - self.var_benign)

    def violations(self, tol: float = 1e-9) -> np.ndarray:
        """Component indices whose perturbed variance exceeds the bound."""
        return np.flatnonzero(self.var_perturbed > self.bound + tol)

    def rows(self):
        for i in range(len(self.lam)):
            yield (i, self.lam[i], self.var_benign[i], self.var_perturbed[i], self.bound[i], self.gap[i])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component_index", "lambda", "var_benign", "var_perturbed", "bound", "gap"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def variance_bound_report(basis: EigenBasis, D_test, perturbations, norm_rtol: float = 0.01) -> VarianceBoundReport:
    """Compare projected variances of clean and perturbed data per eigenvector.

    Row ``i`` of ``perturbations`` is added to row ``i`` of ``D_test``.  All
    perturbations must share one Euclidean norm (within ``norm_rtol``).
    """
    D = _data_matrix(D_test)
    P = np.asarray(perturbations, dtype=np.float64)
    if P.shape != D.shape:
        raise ShapeError(f"perturbations shape {P.shape} does not match data shape {D.shape}")
    if D.shape[1] != basis.dim:
        raise ShapeError(f"data dimension {D.shape[1]} does not match basis dimension {basis.dim}")
    norms = np.linalg.norm(P, axis=1)
    ref = float(norms.max())
    if ref > 0 and float(norms.min()) < (1.0 - norm_rtol) * ref:
        raise ContractError(
            f"perturbation norms differ by more than {norm_rtol:.0%} (min {norms.min():.6g}, max {ref:.6g})"
        )
    shift = basis.mean if basis.centered else 0.0
    proj = (D - shift) @ basis.vectors
    proj_adv = (D + P - shift) @ basis.vectors
    return VarianceBoundReport(
        lam=basis.values.copy(),
        var_benign=proj.var(axis=0, ddof=1),
        var_perturbed=proj_adv.var(axis=0, ddof=1),
        norm_sq=float(np.mean(norms**2)),
    )


def save_basis(basis: EigenBasis, path) -> None:
    m = basis.dim
    parts = [
        BASIS_MAGIC,
        struct.pack("<IB", m, 1 if basis.centered else 0),
        np.ascontiguousarray(basis.mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(basis.values, dtype="<f8").tobytes(),
        np.asfortranarray(basis.vectors, dtype="<f8").tobytes(order="F"),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_basis(path) -> EigenBasis:
    raw = Path(path).read_bytes()
    if len(raw) < 13:
        raise FormatError(f"{path}: file too short for an eigenbasis header ({len(raw)} bytes)")
    if raw[:8] != BASIS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {BASIS_MAGIC!r}")
    m, centered = struct.unpack_from("<IB", raw, 8)
    offset = 13
    expected = offset + 8 * (2 * m + m * m)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for m={m}, got {len(raw)}")
    mean = np.frombuffer(raw, "<f8", m, offset).astype(np.float64)
    values = np.frombuffer(raw, "<f8", m, offset + 8 * m).astype(np.float64)
    vectors = np.frombuffer(raw, "<f8", m * m, offset + 16 * m).reshape((m, m), order="F").astype(np.float64)
    return EigenBasis(vectors, values, bool(centered), mean)
