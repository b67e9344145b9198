"""Experiment configuration and the end-to-end detection pipeline.

A run trains (or loads) the classifier, fits the eigenbasis and the
detector on benign training data only, attacks the benign test set, scores
everything and writes a report plus every intermediate artifact.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from headdet.attacks import NOISE_KINDS, AttackConfig, NoiseConfig, add_noise, run_attack
from headdet.curvature import NORMS, head_feature, save_features_bin
from headdet.data import Dataset, load_dataset, synthetic_images
from headdet.detect import (
    DEFAULT_BANDWIDTHS,
    DEFAULT_NUS,
    KDE_KERNELS,
    OCSVM_KERNELS,
    SweepTable,
    fit_detector,
    hyperparameter_sweep,
    save_detector,
    score,
)
from headdet.errors import ContractError, StageError
from headdet.metrics import auc_score
from headdet.parallel import map_chunks
from headdet.smallnet import NetworkModel, NetworkSpec, accuracy, init_model, load_model, save_model, train_sgd
from headdet.spectral import DEFAULT_LSCF_DIM, EigenBasis, fit_basis, save_basis

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

ATTACK_CHUNK = 128
SCORE_CHUNK = 512
FEATURE_SUBSETS = ("head", "lscf", "hf")
SEED_ENV = "HEAD_SEED"


@dataclass
class DataConfig:
    source: str = "synthetic"
    train: str | None = None
    test: str | None = None
    n_train: int = 2000
    n_test: int = 500
    synthetic: dict = field(default_factory=dict)


@dataclass
class ModelConfig:
    path: str | None = None
    hidden: tuple[int, ...] = (128, 64)
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class FeatureConfig:
    lscf_dim: int = DEFAULT_LSCF_DIM
    centered: bool = False
    norm: str = "l1"
    subset: str = "head"


@dataclass
class DetectorConfig:
    kind: str = "kde"
    kernel: str = "gaussian"
    param: float | None = None
    grid: tuple[float, ...] | None = None
    standardize: bool = True
    gamma: float | None = None
    degree: int = 3
    coef0: float = 0.0
    tol: float = 1e-6
    max_iter: int = 100_000

    def candidates(self) -> tuple[float, ...]:
        if self.param is not None:
            return (float(self.param),)
        if self.grid is not None:
            return tuple(float(v) for v in self.grid)
        return DEFAULT_BANDWIDTHS if self.kind == "kde" else DEFAULT_NUS

    def ocsvm_kw(self) -> dict:
        if self.kind != "ocsvm":
            return {}
        return {"gamma": self.gamma, "degree": self.degree, "coef0": self.coef0, "tol": self.tol, "max_iter": self.max_iter}


@dataclass
class NoiseSpec:
    kinds: tuple[str, ...] = NOISE_KINDS
    levels_255: tuple[float, ...] = (1, 2, 4, 8, 16, 32)


def _default_attacks() -> list[AttackConfig]:
    return [AttackConfig("fgsm"), AttackConfig("bim"), AttackConfig("pgd")]


@dataclass
class ExperimentConfig:
    """Everything a run needs; the defaults are the desk-scale reference setup."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    attacks: list[AttackConfig] = field(default_factory=_default_attacks)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    out: str = "runs/reference"
    seed: int | None = None
    threads: int = 1

    @property
    def resolved_seed(self) -> int:
        return resolve_seed(self.seed)

    def validate(self) -> None:
        d = self.data
        if d.source not in ("synthetic", "files"):
            raise ContractError(f"data.source must be 'synthetic' or 'files', got {d.source!r}")
        if d.source == "files":
            for key in ("train", "test"):
                path = getattr(d, key)
                if path is None:
                    raise ContractError(f"data.{key} is required when data.source = 'files'")
                if not Path(path).exists():
                    raise FileNotFoundError(f"data.{key}: {path} does not exist")
        if self.model.path is not None and not Path(self.model.path).exists():
            raise FileNotFoundError(f"model.path: {self.model.path} does not exist")
        if self.features.lscf_dim < 1:
            raise ContractError(f"features.lscf_dim must be >= 1, got {self.features.lscf_dim}")
        if self.features.norm not in NORMS:
            raise ContractError(f"features.norm must be one of {NORMS}, got {self.features.norm!r}")
        if self.features.subset not in FEATURE_SUBSETS:
            raise ContractError(f"features.subset must be one of {FEATURE_SUBSETS}, got {self.features.subset!r}")
        kernels = {"kde": KDE_KERNELS, "ocsvm": OCSVM_KERNELS}.get(self.detector.kind)
        if kernels is None:
            raise ContractError(f"detector.kind must be 'kde' or 'ocsvm', got {self.detector.kind!r}")
        if self.detector.kernel not in kernels:
            raise ContractError(f"detector.kernel {self.detector.kernel!r} is not one of {kernels}")
        for kind in self.noise.kinds:
            if kind not in NOISE_KINDS:
                raise ContractError(f"noise kind {kind!r} is not one of {NOISE_KINDS}")
        if self.threads < 1:
            raise ContractError(f"threads must be >= 1, got {self.threads}")


def resolve_seed(seed: int | None) -> int:
    """An explicit seed wins, then ``$HEAD_SEED``, then 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ContractError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return 0


# ------------------------------------------------------------ config files

_SECTIONS = {"data": DataConfig, "model": ModelConfig, "features": FeatureConfig, "detector": DetectorConfig, "noise": NoiseSpec}
_TOP_LEVEL = {"out", "seed", "threads", "attacks"} | set(_SECTIONS)
_ATTACK_KEYS = {f.name for f in dataclasses.fields(AttackConfig)}


def _build(cls, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ContractError(f"unknown key(s) {unknown} in [{where}]; valid: {sorted(names)}")
    kw = {}
    for key, value in values.items():
        if isinstance(value, list):
            value = tuple(value)
        kw[key] = value
    return cls(**kw)


def _attack_from(entry: dict, seed: int) -> AttackConfig:
    unknown = sorted(set(entry) - _ATTACK_KEYS)
    if unknown:
        raise ContractError(f"unknown key(s) {unknown} in [[attacks]]; valid: {sorted(_ATTACK_KEYS)}")
    entry = dict(entry)
    entry.setdefault("seed", seed)
    if "clamp" in entry:
        entry["clamp"] = tuple(entry["clamp"])
    return AttackConfig(**entry)


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ContractError(f"unknown top-level key(s) {unknown}; valid: {sorted(_TOP_LEVEL)}")
    kw = {name: _build(cls, raw[name], name) for name, cls in _SECTIONS.items() if name in raw}
    for key in ("out", "seed", "threads"):
        if key in raw:
            kw[key] = raw[key]
    cfg = ExperimentConfig(**kw)
    if "attacks" in raw:
        cfg.attacks = [_attack_from(a, cfg.resolved_seed) for a in raw["attacks"]]
    else:
        cfg.attacks = [dataclasses.replace(a, seed=cfg.resolved_seed) for a in cfg.attacks]
    return cfg


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as TOML) to a raw config."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep or not key.strip():
            raise ContractError(f"override {item!r} is not of the form key=value")
        *path, leaf = key.strip().split(".")
        node = raw
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ContractError(f"override {item!r}: {part!r} is not a table")
        node[leaf] = _parse_value(text.strip())
    return raw


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw = read_config_file(path) if path is not None else {}
    return config_from_dict(apply_overrides(raw, overrides))


# ------------------------------------------------------------------ stages


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "files":
        return load_dataset(d.train, "train"), load_dataset(d.test, "test")
    return synthetic_images(d.n_train, d.n_test, seed=cfg.resolved_seed, **d.synthetic)


def obtain_model(cfg: ExperimentConfig, train: Dataset) -> NetworkModel:
    m = cfg.model
    if m.path is not None:
        model = load_model(m.path)
        if model.spec.n_inputs != train.dim:
            raise ContractError(f"model expects {model.spec.n_inputs} inputs, data has {train.dim}")
        return model
    n_classes = max(train.n_classes, 2)
    spec = NetworkSpec((train.dim, *m.hidden, n_classes))
    seed = cfg.resolved_seed
    return train_sgd(
        init_model(spec, seed),
        train.samples,
        train.labels,
        epochs=m.epochs,
        batch_size=m.batch_size,
        learning_rate=m.learning_rate,
        seed=seed,
        momentum=m.momentum,
        weight_decay=m.weight_decay,
    )


def feature_columns(subset: str, lscf_dim: int) -> slice:
    return {"head": slice(None), "lscf": slice(0, lscf_dim), "hf": slice(lscf_dim, None)}[subset]


def extract_features(cfg: ExperimentConfig, model: NetworkModel, basis: EigenBasis, x) -> np.ndarray:
    f = cfg.features
    values = head_feature(x, basis, f.lscf_dim, model, f.norm, cfg.threads).values
    return values[..., feature_columns(f.subset, f.lscf_dim)]


def score_rows(detector, F: np.ndarray, threads: int = 1) -> np.ndarray:
    if F.shape[0] == 0:
        return np.zeros(0)
    return map_chunks(lambda part: np.atleast_1d(score(detector, part)), F, SCORE_CHUNK, threads)


def attack_labels(attacks) -> list[str]:
    """Unique display names; repeated entries get a ``_2``, ``_3`` suffix."""
    seen: dict[str, int] = {}
    names = []
    for a in attacks:
        base = a.label
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return names


@dataclass
class RunState:
    model: NetworkModel
    basis: EigenBasis
    detector: object
    train: Dataset
    test: Dataset
    features: dict[str, np.ndarray]
    scores: dict[str, np.ndarray]
    adversarial: dict[str, np.ndarray]


@dataclass
class ExperimentReport:
    clean_accuracy: float
    attack_accuracy: dict[str, float]
    auc: dict[str, float]
    overall_pooled: float | None
    overall_macro: float | None
    n_benign: int
    n_adv: dict[str, int]
    benign_stats: dict[str, float]
    detector_kind: str
    detector_kernel: str
    detector_param: float
    sweep: SweepTable | None = None
    out_dir: str | None = None
    incomplete: bool = False
    state: RunState | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "attack_accuracy": self.attack_accuracy,
            "auc": self.auc,
            "overall_pooled": self.overall_pooled,
            "overall_macro": self.overall_macro,
            "n_benign": self.n_benign,
            "n_adv": self.n_adv,
            "benign_score_stats": self.benign_stats,
            "detector": {"kind": self.detector_kind, "kernel": self.detector_kernel, "param": self.detector_param},
            "incomplete": self.incomplete,
        }


def _stats(s: np.ndarray) -> dict[str, float]:
    if s.size == 0:
        return {"n": 0}
    return {"n": int(s.size), "mean": float(s.mean()), "std": float(s.std()), "min": float(s.min()), "max": float(s.max())}


def select_param(cfg: ExperimentConfig, F_train, F_benign, F_adv: dict) -> tuple[float, SweepTable | None]:
    """The configured hyperparameter, or the best one over the grid (by pooled AUC)."""
    det = cfg.detector
    values = det.candidates()
    if len(values) == 1:
        return values[0], None
    if not F_adv:
        logger.warning("no attacks configured; using the first grid value %s", values[0])
        return values[0], None
    table = hyperparameter_sweep(
        F_train, F_benign, F_adv, det.kind, {det.kernel: values}, det.standardize, **det.ocsvm_kw()
    )
    return table.best_row().hyperparameter, table


class _Stages:
    """Runs named stages, turning any failure into a StageError."""

    def __init__(self):
        self.done: list[str] = []

    def __call__(self, name: str, fn, *args, **kw):
        logger.info("stage %s", name)
        try:
            result = fn(*args, **kw)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.done.append(name)
        return result


def _write_scores(path: Path, scores: np.ndarray, name: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "set"])
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s)), name])


def write_report_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "n_benign", "n_adv", "auc"])
        for name, auc in report.auc.items():
            w.writerow([name, report.n_benign, report.n_adv[name], f"{auc:.6f}"])
        if report.auc:
            total = sum(report.n_adv.values())
            w.writerow(["overall_pooled", report.n_benign, total, f"{report.overall_pooled:.6f}"])
            w.writerow(["overall_macro", report.n_benign, total, f"{report.overall_macro:.6f}"])


def _write_artifacts(out: Path, report: ExperimentReport) -> None:
    st = report.state
    out.mkdir(parents=True, exist_ok=True)
    save_model(st.model, out / "model.bin")
    save_basis(st.basis, out / "basis.bin")
    save_detector(st.detector, out / "detector.bin")
    for name, F in st.features.items():
        save_features_bin(out / f"features_{name}.bin", F)
    for name, s in st.scores.items():
        _write_scores(out / f"scores_{name}.csv", s, name)
    if report.sweep is not None:
        report.sweep.write_csv(out / f"sweep_{report.detector_kind}_{report.detector_kernel}.csv")
    write_report_csv(report, out / "report.csv")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")


def _mark_incomplete(out: Path, err: StageError, done: list[str]) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        info = {"incomplete": True, "failed_stage": err.stage, "error": str(err.cause), "completed_stages": done}
        (out / "summary.json").write_text(json.dumps(info, indent=2) + "\n")
    except OSError:
        logger.exception("could not record the failed run in %s", out)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    out = Path(cfg.out)
    stage = _Stages()
    try:
        stage("config", cfg.validate)
        train, test = stage("data", load_data, cfg)
        model = stage("model", obtain_model, cfg, train)
        basis = stage("basis", fit_basis, train.samples, cfg.features.centered)
        F_train = stage("features", extract_features, cfg, model, basis, train.samples)
        F_benign = stage("features", extract_features, cfg, model, basis, test.samples)

        names = attack_labels(cfg.attacks)
        adversarial, F_adv, adv_acc = {}, {}, {}
        for name, acfg in zip(names, cfg.attacks):
            xa = stage(f"attack:{name}", run_attack, model, test.samples, test.labels, acfg, cfg.threads, ATTACK_CHUNK)
            adversarial[name] = xa
            adv_acc[name] = accuracy(model, xa, test.labels)
            F_adv[name] = stage(f"features:{name}", extract_features, cfg, model, basis, xa)

        param, table = stage("select", select_param, cfg, F_train, F_benign, F_adv)
        det = cfg.detector
        # the fit only ever sees benign training features
        detector = stage("detector", fit_detector, det.kind, F_train, det.kernel, param, det.standardize, **det.ocsvm_kw())

        s_benign = stage("scores", score_rows, detector, F_benign, cfg.threads)
        s_adv = {name: stage("scores", score_rows, detector, F, cfg.threads) for name, F in F_adv.items()}
        auc = {name: auc_score(s_benign, s) for name, s in s_adv.items()}
        pooled = auc_score(s_benign, np.concatenate(list(s_adv.values()))) if s_adv else None
        macro = float(np.mean(list(auc.values()))) if auc else None

        features = {"train": F_train, "benign": F_benign, **F_adv}
        scores = {"benign": s_benign, **s_adv}
        report = ExperimentReport(
            clean_accuracy=accuracy(model, test.samples, test.labels),
            attack_accuracy=adv_acc,
            auc=auc,
            overall_pooled=pooled,
            overall_macro=macro,
            n_benign=len(test),
            n_adv={name: int(s.size) for name, s in s_adv.items()},
            benign_stats=_stats(s_benign),
            detector_kind=det.kind,
            detector_kernel=det.kernel,
            detector_param=float(param),
            sweep=table,
            out_dir=str(out) if write else None,
            state=RunState(model, basis, detector, train, test, features, scores, adversarial),
        )
        if write:
            stage("artifacts", _write_artifacts, out, report)
        return report
    except StageError as err:
        if write:
            _mark_incomplete(out, err, stage.done)
        raise


# ------------------------------------------------------- noise robustness


@dataclass(frozen=True)
class NoiseRow:
    noise: str
    level_255: float
    auc: float
    drop: float


def noise_robustness(
    cfg: ExperimentConfig, report: ExperimentReport, kinds=None, levels_255=None
) -> list[NoiseRow]:
    """AUC of noisy benign test images against the run's adversarial sets.

    The detector from ``report`` (fitted on clean benign data) is reused.
    ``drop`` is the change from the previous level, the first level being
    compared with the clean AUC.
    """
    st = report.state
    if st is None or report.overall_pooled is None:
        raise ContractError("noise robustness needs a completed run with at least one attack")
    kinds = tuple(cfg.noise.kinds if kinds is None else kinds)
    levels = tuple(cfg.noise.levels_255 if levels_255 is None else levels_255)
    pooled = np.concatenate([st.scores[name] for name in report.auc])
    rows = []
    for k, kind in enumerate(kinds):
        previous = report.overall_pooled
        for j, level in enumerate(levels):
            noise = NoiseConfig(kind, level / 255.0, seed=cfg.resolved_seed + 1 + 100 * k + j)
            F = extract_features(cfg, st.model, st.basis, add_noise(st.test.samples, noise))
            auc = auc_score(score_rows(st.detector, F, cfg.threads), pooled)
            rows.append(NoiseRow(kind, float(level), auc, auc - previous))
            previous = auc
    return rows


def write_noise_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["noise_type", "level_255", "auc", "drop"])
        for r in rows:
            w.writerow([r.noise, f"{r.level_255:g}", f"{r.auc:.6f}", f"{r.drop:+.6f}"])


# ---------------------------------------------------------------- sweeps


def sweep_tables(cfg: ExperimentConfig, report: ExperimentReport, kinds=("kde", "ocsvm"), grids=None) -> dict[str, SweepTable]:
    """Full kernel x hyperparameter grids on the run's features."""
    st = report.state
    if st is None or not report.auc:
        raise ContractError("a sweep needs a completed run with at least one attack")
    adv = {name: st.features[name] for name in report.auc}
    det = cfg.detector
    tables = {}
    for kind in kinds:
        kw = {"gamma": det.gamma, "degree": det.degree, "coef0": det.coef0, "tol": det.tol, "max_iter": det.max_iter}
        grid = None if grids is None else grids.get(kind)
        tables[kind] = hyperparameter_sweep(
            st.features["train"], st.features["benign"], adv, kind, grid, det.standardize, **(kw if kind == "ocsvm" else {})
        )
    return tables


__all__ = [
    "DataConfig",
    "DetectorConfig",
    "ExperimentConfig",
    "ExperimentReport",
    "FeatureConfig",
    "ModelConfig",
    "NoiseRow",
    "NoiseSpec",
    "RunState",
    "apply_overrides",
    "config_from_dict",
    "load_config",
    "noise_robustness",
    "resolve_seed",
    "run_experiment",
    "sweep_tables",
    "write_noise_csv",
    "write_report_csv",
]
