"""Anomaly detectors fitted on benign features only.

Both detectors produce an anomaly score where larger means "more likely
adversarial".  Features are z-scored with statistics of the benign training
set before either detector sees them.
"""

from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from headdet.errors import ContractError, ConvergenceError, FormatError, ShapeError
from headdet.metrics import auc_score

logger = logging.getLogger(__name__)

KDE_KERNELS = ("gaussian", "epanechnikov", "exponential", "linear", "uniform")
OCSVM_KERNELS = ("rbf", "sigmoid", "linear", "poly")
DEFAULT_BANDWIDTHS = tuple(float(h) for h in range(1, 26))
DEFAULT_NUS = tuple(round(0.1 * i, 1) for i in range(1, 10))
STD_FLOOR = 1e-12
DETECTOR_MAGIC = b"HEADDET1"


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    floored: np.ndarray = field(default=None, repr=False)

    @classmethod
    def identity(cls, k: int) -> "Standardizer":
        return cls(np.zeros(k), np.ones(k), np.zeros(k, bool))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def standardize_fit(features) -> Standardizer:
    """Per-dimension mean and population standard deviation.

    Standard deviations below ``1e-12`` are floored; a warning names the
    affected columns.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ContractError(f"standardizer needs at least 2 feature rows, got shape {F.shape}")
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    floored = std < STD_FLOOR
    if floored.any():
        warnings.warn(f"constant feature columns {np.flatnonzero(floored).tolist()}; std floored at {STD_FLOOR}")
        std = np.where(floored, STD_FLOOR, std)
    return Standardizer(mean, std, floored)


def standardize_apply(s: Standardizer, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != s.dim:
        raise ShapeError(f"feature dimension {f.shape[-1]} does not match standardizer dimension {s.dim}")
    return (f - s.mean) / s.std


def _fit_standardizer(F: np.ndarray, standardize: bool) -> Standardizer:
    if standardize:
        return standardize_fit(F)
    return Standardizer.identity(F.shape[1])


def _feature_matrix(features, min_rows: int) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < min_rows:
        raise ContractError(f"need a 2-D feature matrix with at least {min_rows} rows, got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ContractError("feature matrix contains non-finite values")
    return F


# ---------------------------------------------------------------- KDE


@dataclass(frozen=True)
class KdeModel:
    kernel: str
    bandwidth: float
    train: np.ndarray
    standardizer: Standardizer


def kde_profile(kernel: str, u: np.ndarray) -> np.ndarray:
    """Unnormalised kernel profile evaluated at scaled distances ``u >= 0``."""
    if kernel == "gaussian":
        return np.exp(-0.5 * u * u)
    if kernel == "epanechnikov":
        return np.maximum(1.0 - u * u, 0.0)
    if kernel == "exponential":
        return np.exp(-u)
    if kernel == "linear":
        return np.maximum(1.0 - u, 0.0)
    if kernel == "uniform":
        return (u < 1.0).astype(np.float64)
    raise ValueError(f"unknown KDE kernel {kernel!r}; valid kernels: {', '.join(KDE_KERNELS)}")


def kde_fit(features, kernel: str = "gaussian", bandwidth: float = 1.0, standardize: bool = True) -> KdeModel:
    if kernel not in KDE_KERNELS:
        raise ValueError(f"unknown KDE kernel {kernel!r}; valid kernels: {', '.join(KDE_KERNELS)}")
    if not bandwidth > 0:
        raise ContractError(f"bandwidth must be positive, got {bandwidth}")
    F = _feature_matrix(features, 1)
    s = _fit_standardizer(F, standardize) if F.shape[0] >= 2 else Standardizer.identity(F.shape[1])
    return KdeModel(kernel, float(bandwidth), standardize_apply(s, F), s)


def pairwise_distances(Q: np.ndarray, X: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Euclidean distances between rows of ``Q`` and rows of ``X``."""
    out = np.empty((Q.shape[0], X.shape[0]))
    x2 = np.sum(X * X, axis=1)
    for i in range(0, Q.shape[0], chunk):
        q = Q[i:i + chunk]
        d2 = np.sum(q * q, axis=1)[:, None] - 2.0 * q @ X.T + x2[None, :]
        out[i:i + chunk] = np.sqrt(np.maximum(d2, 0.0))
    return out


def kde_scores_from_distances(dist: np.ndarray, kernel: str, bandwidth: float) -> np.ndarray:
    return -kde_profile(kernel, dist / bandwidth).mean(axis=-1)


def kde_score(model: KdeModel, f) -> np.ndarray | float:
    """Negative mean kernel weight to the training set."""
    f = np.asarray(f, dtype=np.float64)
    q = np.atleast_2d(standardize_apply(model.standardizer, f))
    out = kde_scores_from_distances(pairwise_distances(q, model.train), model.kernel, model.bandwidth)
    return float(out[0]) if f.ndim == 1 else out


# ---------------------------------------------------------------- OCSVM


@dataclass(frozen=True)
class OcsvmModel:
    kernel: str
    nu: float
    gamma: float
    degree: int
    coef0: float
    alpha: np.ndarray
    rho: float
    support_vectors: np.ndarray
    standardizer: Standardizer
    iterations: int = 0
    residual: float = 0.0


def kernel_matrix(kernel: str, A: np.ndarray, B: np.ndarray, gamma: float, degree: int = 3, coef0: float = 0.0):
    if kernel == "rbf":
        a2 = np.sum(A * A, axis=1)[:, None]
        b2 = np.sum(B * B, axis=1)[None, :]
        return np.exp(-gamma * np.maximum(a2 - 2.0 * A @ B.T + b2, 0.0))
    dot = A @ B.T
    if kernel == "linear":
        return dot
    if kernel == "poly":
        return (gamma * dot + coef0) ** degree
    if kernel == "sigmoid":
        return np.tanh(gamma * dot + coef0)
    raise ValueError(f"unknown OCSVM kernel {kernel!r}; valid kernels: {', '.join(OCSVM_KERNELS)}")


def _smo(Q: np.ndarray, C: float, tol: float, max_iter: int) -> tuple[np.ndarray, int, float]:
    """Minimise 1/2 a^T Q a subject to 0 <= a <= C and sum(a) = 1.

    Pairwise updates.  ``i`` is the maximal KKT violator; ``j`` is the
    partner with the largest guaranteed decrease of the objective (second
    order selection), which avoids the zigzag of pure maximal-violation
    pairs on ill-conditioned kernels.  Stops when the maximal violation is
    at most ``tol``.
    """
    n = Q.shape[0]
    # the uniform point is feasible for every nu (C >= 1/n) and treats all rows alike
    alpha = np.full(n, 1.0 / n)
    grad = Q @ alpha
    diag = np.diag(Q).copy()
    eps_box = 1e-12 * C
    residual = np.inf
    for it in range(max_iter + 1):
        up = alpha < C - eps_box
        low = alpha > eps_box
        if not up.any() or not low.any():
            return alpha, it, 0.0
        neg = -grad
        i = int(np.argmax(np.where(up, neg, -np.inf)))
        residual = float(neg[i] - np.min(np.where(low, neg, np.inf)))
        if residual <= tol:
            return alpha, it, residual
        if it == max_iter:
            break
        gap = neg[i] - neg
        curv = diag[i] + diag - 2.0 * Q[i]
        curv = np.where(curv > 0, curv, 1e-12)
        gain = np.where(low & (gap > 0), gap * gap / curv, -np.inf)
        j = int(np.argmax(gain))
        t = min(gap[j] / curv[j], C - alpha[i], alpha[j])
        alpha[i] += t
        alpha[j] -= t
        grad += t * (Q[:, i] - Q[:, j])
    raise ConvergenceError("one-class SVM solver did not converge", max_iter, residual)


def _offset(grad: np.ndarray, alpha: np.ndarray, C: float) -> float:
    eps_box = 1e-12 * max(C, 1e-300)
    free = (alpha > eps_box) & (alpha < C - eps_box)
    if free.any():
        return float(np.median(grad[free]))
    at_upper = alpha >= C - eps_box
    at_lower = alpha <= eps_box
    lo = grad[at_upper].max() if at_upper.any() else grad.min()
    hi = grad[at_lower].min() if at_lower.any() else grad.max()
    return float(0.5 * (lo + hi))


def ocsvm_fit(
    features,
    kernel: str = "rbf",
    nu: float = 0.5,
    gamma: float | None = None,
    degree: int = 3,
    coef0: float = 0.0,
    tol: float = 1e-6,
    max_iter: int = 100_000,
    standardize: bool = True,
) -> OcsvmModel:
    """Fit a nu-one-class SVM by solving its dual with SMO.

    ``gamma`` defaults to ``1 / n_features``.  Dual coefficients sum to one
    and are capped at ``1 / (nu N)``.
    """
    if kernel not in OCSVM_KERNELS:
        raise ValueError(f"unknown OCSVM kernel {kernel!r}; valid kernels: {', '.join(OCSVM_KERNELS)}")
    if not 0 < nu <= 1:
        raise ContractError(f"nu must be in (0, 1], got {nu}")
    F = _feature_matrix(features, 2)
    k = F.shape[1]
    gamma = 1.0 / k if gamma is None else float(gamma)
    if gamma <= 0 or degree < 1:
        raise ContractError(f"invalid kernel parameters gamma={gamma}, degree={degree}")
    s = _fit_standardizer(F, standardize)
    X = standardize_apply(s, F)
    Q = kernel_matrix(kernel, X, X, gamma, degree, coef0)
    C = 1.0 / (nu * X.shape[0])
    alpha, iterations, residual = _smo(Q, C, tol, max_iter)
    rho = _offset(Q @ alpha, alpha, C)
    sv = alpha > 1e-12
    return OcsvmModel(
        kernel, float(nu), gamma, int(degree), float(coef0), alpha[sv], rho, X[sv], s, iterations, residual
    )


def ocsvm_decision(model: OcsvmModel, f) -> np.ndarray:
    """Conventional decision function: positive inside the learned support."""
    q = np.atleast_2d(standardize_apply(model.standardizer, f))
    K = kernel_matrix(model.kernel, q, model.support_vectors, model.gamma, model.degree, model.coef0)
    return K @ model.alpha - model.rho


def ocsvm_score(model: OcsvmModel, f) -> np.ndarray | float:
    """Anomaly score ``rho - sum_i alpha_i k(x_i, f)``."""
    out = -ocsvm_decision(model, f)
    return float(out[0]) if np.ndim(f) == 1 else out


# ---------------------------------------------------------------- generic


def fit_detector(kind: str, features, kernel: str, param: float, standardize: bool = True, **kw):
    """Fit a ``kde`` (param = bandwidth) or ``ocsvm`` (param = nu) detector."""
    if kind == "kde":
        return kde_fit(features, kernel, param, standardize)
    if kind == "ocsvm":
        return ocsvm_fit(features, kernel, param, standardize=standardize, **kw)
    raise ValueError(f"unknown detector kind {kind!r}; expected 'kde' or 'ocsvm'")


def score(model, f) -> np.ndarray | float:
    if isinstance(model, KdeModel):
        return kde_score(model, f)
    if isinstance(model, OcsvmModel):
        return ocsvm_score(model, f)
    raise TypeError(f"not a detector model: {type(model).__name__}")


@dataclass
class SweepRow:
    kernel: str
    hyperparameter: float
    auc_overall: float
    auc_per_attack: dict[str, float]
    best: bool = False
    note: str = ""


@dataclass
class SweepTable:
    kind: str
    attacks: list[str]
    rows: list[SweepRow]

    def best_row(self, kernel: str | None = None) -> SweepRow:
        candidates = [r for r in self.rows if (kernel is None or r.kernel == kernel) and np.isfinite(r.auc_overall)]
        if not candidates:
            raise ContractError(f"no finite sweep rows for kernel {kernel!r}")
        return max(candidates, key=lambda r: r.auc_overall)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "hyperparameter", "auc_overall"] + [f"auc_{a}" for a in self.attacks] + ["best", "note"])
            for r in self.rows:
                w.writerow(
                    [r.kernel, r.hyperparameter, f"{r.auc_overall:.6f}"]
                    + [f"{r.auc_per_attack.get(a, float('nan')):.6f}" for a in self.attacks]
                    + [int(r.best), r.note]
                )


def default_grid(kind: str) -> dict[str, tuple[float, ...]]:
    if kind == "kde":
        return {k: DEFAULT_BANDWIDTHS for k in KDE_KERNELS}
    if kind == "ocsvm":
        return {k: DEFAULT_NUS for k in OCSVM_KERNELS}
    raise ValueError(f"unknown detector kind {kind!r}")


def hyperparameter_sweep(
    train_features,
    benign_features,
    adv_features: dict[str, np.ndarray],
    kind: str,
    grid: dict[str, tuple[float, ...]] | None = None,
    standardize: bool = True,
    **ocsvm_kw,
) -> SweepTable:
    """Evaluate every (kernel, hyperparameter) pair on held-out benign and adversarial sets.

    ``auc_overall`` pools all adversarial sets against the benign set.  The
    row with the highest overall AUC is flagged ``best``.
    """
    grid = default_grid(kind) if grid is None else grid
    if not grid or not any(len(v) for v in grid.values()):
        raise ContractError("hyperparameter grid is empty")
    names = list(adv_features)
    benign = np.asarray(benign_features, dtype=np.float64)
    pooled = np.concatenate([np.asarray(adv_features[a]) for a in names], axis=0) if names else None
    rows = []
    if kind == "kde":
        F = _feature_matrix(train_features, 1)
        s = _fit_standardizer(F, standardize)
        X = standardize_apply(s, F)
        d_benign = pairwise_distances(standardize_apply(s, benign), X)
        d_adv = {a: pairwise_distances(standardize_apply(s, adv_features[a]), X) for a in names}
        for kernel, values in grid.items():
            kde_profile(kernel, np.zeros(1))
            for h in values:
                if not h > 0:
                    raise ContractError(f"bandwidth must be positive, got {h}")
                sb = kde_scores_from_distances(d_benign, kernel, h)
                sa = {a: kde_scores_from_distances(d_adv[a], kernel, h) for a in names}
                rows.append(_sweep_row(kernel, h, sb, sa, names))
    elif kind == "ocsvm":
        for kernel, values in grid.items():
            for nu in values:
                try:
                    model = ocsvm_fit(train_features, kernel, nu, standardize=standardize, **ocsvm_kw)
                except ConvergenceError as exc:
                    logger.warning("ocsvm %s nu=%s: %s", kernel, nu, exc)
                    rows.append(SweepRow(kernel, nu, float("nan"), {a: float("nan") for a in names}, note="no convergence"))
                    continue
                sb = ocsvm_score(model, benign)
                sa = {a: ocsvm_score(model, adv_features[a]) for a in names}
                rows.append(_sweep_row(kernel, nu, sb, sa, names))
    else:
        raise ValueError(f"unknown detector kind {kind!r}")
    table = SweepTable(kind, names, rows)
    if names and any(np.isfinite(r.auc_overall) for r in rows):
        table.best_row().best = True
    return table


def _sweep_row(kernel, param, sb, sa, names) -> SweepRow:
    per = {a: auc_score(sb, sa[a]) for a in names}
    overall = auc_score(sb, np.concatenate([sa[a] for a in names])) if names else float("nan")
    return SweepRow(kernel, float(param), overall, per)


# ---------------------------------------------------------------- files

_KINDS = {"kde": 0, "ocsvm": 1}
_KERNEL_IDS = {"kde": KDE_KERNELS, "ocsvm": OCSVM_KERNELS}


def save_detector(model, path) -> None:
    """Binary detector file: header, kernel parameters, standardizer, payload."""
    if isinstance(model, KdeModel):
        kind = "kde"
        params = struct.pack("<dddI", model.bandwidth, 0.0, 0.0, 0)
        payload = struct.pack("<I", model.train.shape[0]) + np.ascontiguousarray(model.train, "<f8").tobytes()
    elif isinstance(model, OcsvmModel):
        kind = "ocsvm"
        params = struct.pack("<dddI", model.nu, model.gamma, model.coef0, model.degree)
        payload = (
            struct.pack("<dI", model.rho, model.alpha.shape[0])
            + np.ascontiguousarray(model.alpha, "<f8").tobytes()
            + np.ascontiguousarray(model.support_vectors, "<f8").tobytes()
        )
    else:
        raise TypeError(f"not a detector model: {type(model).__name__}")
    s = model.standardizer
    head = DETECTOR_MAGIC + struct.pack("<BB", _KINDS[kind], _KERNEL_IDS[kind].index(model.kernel))
    body = params + struct.pack("<I", s.dim) + np.ascontiguousarray(s.mean, "<f8").tobytes()
    body += np.ascontiguousarray(s.std, "<f8").tobytes()
    Path(path).write_bytes(head + body + payload)


def load_detector(path):
    raw = Path(path).read_bytes()
    try:
        if raw[:8] != DETECTOR_MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {DETECTOR_MAGIC!r}")
        kind_id, kernel_id = struct.unpack_from("<BB", raw, 8)
        kind = {v: k for k, v in _KINDS.items()}[kind_id]
        kernel = _KERNEL_IDS[kind][kernel_id]
        p0, p1, p2, p3 = struct.unpack_from("<dddI", raw, 10)
        (k,) = struct.unpack_from("<I", raw, 38)
        off = 42
        mean = np.frombuffer(raw, "<f8", k, off).astype(np.float64)
        std = np.frombuffer(raw, "<f8", k, off + 8 * k).astype(np.float64)
        off += 16 * k
        s = Standardizer(mean, std, std <= STD_FLOOR)
        if kind == "kde":
            (n,) = struct.unpack_from("<I", raw, off)
            train = np.frombuffer(raw, "<f8", n * k, off + 4).reshape(n, k).astype(np.float64)
            end = off + 4 + 8 * n * k
            model = KdeModel(kernel, p0, train, s)
        else:
            rho, n_sv = struct.unpack_from("<dI", raw, off)
            off += 12
            alpha = np.frombuffer(raw, "<f8", n_sv, off).astype(np.float64)
            sv = np.frombuffer(raw, "<f8", n_sv * k, off + 8 * n_sv).reshape(n_sv, k).astype(np.float64)
            end = off + 8 * n_sv * (k + 1)
            model = OcsvmModel(kernel, p0, p1, int(p3), p2, alpha, rho, sv, s)
    except (struct.error, KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed detector file ({exc})") from exc
    if end != len(raw):
        raise FormatError(f"{path}: expected {end} bytes, got {len(raw)}")
    return model
