"""Untargeted l-infinity attacks and benign noise.

Inputs are flattened vectors (or batches of rows) with entries in the clamp
range, ``[0, 1]`` by default.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from headdet.errors import ShapeError
from headdet.parallel import map_chunks
from headdet.smallnet import NetworkModel, forward, grad_wrt_layer

DEFAULT_EPS = 8 / 255
ATTACK_KINDS = ("fgsm", "bim", "pgd")
NOISE_KINDS = ("gaussian", "uniform")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    eps: float = DEFAULT_EPS
    steps: int | None = None
    step_size: float | None = None
    random_start: bool | None = None
    clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        steps = self.steps if self.steps is not None else (1 if self.kind == "fgsm" else 10)
        step_size = self.step_size if self.step_size is not None else (
            self.eps if self.kind == "fgsm" else self.eps / 4
        )
        random_start = self.random_start if self.random_start is not None else self.kind == "pgd"
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if not step_size > 0:
            raise ValueError(f"step_size must be positive, got {step_size}")
        object.__setattr__(self, "steps", int(steps))
        object.__setattr__(self, "step_size", float(step_size))
        object.__setattr__(self, "random_start", bool(random_start))
        object.__setattr__(self, "clamp", (float(self.clamp[0]), float(self.clamp[1])))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"pgd{self.steps}" if self.kind == "pgd" else self.kind


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "gaussian"
    level: float = 0.0
    clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.level < 0:
            raise ValueError(f"noise level must be >= 0, got {self.level}")


def _input_grad(model: NetworkModel, x: np.ndarray, label) -> np.ndarray:
    return grad_wrt_layer(model, forward(model, x), label, 0)


def _check(model: NetworkModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.spec.n_inputs:
        raise ShapeError(f"input must have trailing dimension {model.spec.n_inputs}, got shape {x.shape}")
    return x


def fgsm(model: NetworkModel, x, label, cfg: AttackConfig | None = None) -> np.ndarray:
    """One signed-gradient step of size ``eps``, clamped to the input range."""
    cfg = cfg or AttackConfig("fgsm")
    x = _check(model, x)
    lo, hi = cfg.clamp
    return np.clip(x + cfg.eps * np.sign(_input_grad(model, x, label)), lo, hi)


def _iterate(model: NetworkModel, x0: np.ndarray, label, cfg: AttackConfig, start: np.ndarray) -> np.ndarray:
    lo, hi = cfg.clamp
    ball_lo, ball_hi = x0 - cfg.eps, x0 + cfg.eps
    x = start
    for _ in range(cfg.steps):
        x = np.clip(x + cfg.step_size * np.sign(_input_grad(model, x, label)), lo, hi)
        x = np.clip(x, ball_lo, ball_hi)
    return x


def bim(model: NetworkModel, x, label, cfg: AttackConfig | None = None) -> np.ndarray:
    """Iterated signed-gradient steps projected back onto the eps-ball."""
    cfg = cfg or AttackConfig("bim")
    x0 = _check(model, x)
    return _iterate(model, x0, label, cfg, x0)


def pgd(model: NetworkModel, x, label, cfg: AttackConfig | None = None) -> np.ndarray:
    """BIM with an optional uniform random start inside the eps-ball."""
    cfg = cfg or AttackConfig("pgd")
    x0 = _check(model, x)
    start = x0
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        lo, hi = cfg.clamp
        start = np.clip(x0 + rng.uniform(-cfg.eps, cfg.eps, size=x0.shape), lo, hi)
    return _iterate(model, x0, label, cfg, start)


_ATTACKS = {"fgsm": fgsm, "bim": bim, "pgd": pgd}


def run_attack(
    model: NetworkModel, x, label, cfg: AttackConfig, threads: int = 1, chunk: int | None = None
) -> np.ndarray:
    """Attack a batch, optionally in fixed-size row chunks spread over threads.

    Chunk ``i`` draws its random start from a seed derived from
    ``(cfg.seed, i)``, so the output depends on ``chunk`` but not on
    ``threads``.
    """
    attack = _ATTACKS[cfg.kind]
    if chunk is None or np.ndim(x) == 1:
        return attack(model, x, label, cfg)
    x = _check(model, x)
    labels = np.broadcast_to(np.asarray(label), x.shape[:1])

    def part(idx: np.ndarray, i: int) -> np.ndarray:
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        return attack(model, x[idx], labels[idx], replace(cfg, seed=seed))

    return map_chunks(part, np.arange(x.shape[0]), chunk, threads, with_index=True)


def add_noise(x, cfg: NoiseConfig) -> np.ndarray:
    """Zero-mean Gaussian (std = level) or uniform (+-level) noise, clamped."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "gaussian":
        noise = rng.normal(0.0, cfg.level, size=x.shape)
    else:
        noise = rng.uniform(-cfg.level, cfg.level, size=x.shape)
    lo, hi = cfg.clamp
    return np.clip(x + noise, lo, hi)
