"""Command-line entry point: ``headdet <subcommand> [--config FILE] [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from headdet.attacks import run_attack
from headdet.curvature import (
    curvature_benchmark,
    load_features_bin,
    save_features_bin,
    save_features_csv,
    write_benchmark_csv,
)
from headdet.data import load_dataset, save_tensor_file
from headdet.detect import fit_detector, save_detector
from headdet.errors import StageError
from headdet.experiment import (
    ATTACK_CHUNK,
    ExperimentConfig,
    attack_labels,
    extract_features,
    load_config,
    load_data,
    noise_robustness,
    obtain_model,
    run_experiment,
    sweep_tables,
    write_noise_csv,
)
from headdet.smallnet import accuracy, load_model, save_model
from headdet.spectral import fit_basis, load_basis, save_basis

logger = logging.getLogger("headdet")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="TOML experiment config (defaults to the reference setup)")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. model.epochs=10 (repeatable)")
    g.add_argument("--seed", type=int, help="seed for data, training, attacks and noise (else $HEAD_SEED, else 0)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="headdet", description="Attack-agnostic adversarial example detection.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("train-net", parents=[common], help="train the classifier and write model.bin")
    sub.add_parser("fit-basis", parents=[common], help="fit the eigenbasis of the training images")

    p = sub.add_parser("extract-features", parents=[common], help="compute HEAD features for a tensor file")
    p.add_argument("--model", help="model file (default OUT/model.bin)")
    p.add_argument("--basis", help="basis file (default OUT/basis.bin)")
    p.add_argument("--input", help="tensor file or CIFAR batch (default: the configured training set)")
    p.add_argument("--output", help="feature file (default OUT/features.bin or .csv)")
    p.add_argument("--format", choices=("bin", "csv"), default="bin")

    p = sub.add_parser("fit-detector", parents=[common], help="fit a detector on benign training features")
    p.add_argument("--features", required=True, help="benign training feature file (.bin)")
    p.add_argument("--output", help="detector file (default OUT/detector.bin)")

    p = sub.add_parser("attack", parents=[common], help="generate adversarial tensor files and manifests")
    p.add_argument("--model", help="model file (default OUT/model.bin)")
    p.add_argument("--input", help="labelled tensor file (default: the configured test set)")
    p.add_argument("--only", action="append", default=[], metavar="NAME", help="restrict to these attack names")

    sub.add_parser("evaluate", parents=[common], help="run the full pipeline and write report.csv")

    p = sub.add_parser("sweep", parents=[common], help="kernel x hyperparameter grids for KDE and OCSVM")
    p.add_argument("--kind", choices=("kde", "ocsvm", "both"), default="both")

    sub.add_parser("noise-robustness", parents=[common], help="noisy benign versus adversarial AUC table")

    p = sub.add_parser("bench-curvature", parents=[common], help="GGN versus finite-difference Hessian timing")
    p.add_argument("--dims", default="16,64,256", help="comma-separated input sizes")
    p.add_argument("--repeats", type=int, default=5)
    return parser


def _config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    for key in ("seed", "out", "threads"):
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return load_config(args.config, overrides)


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(args, cfg: ExperimentConfig):
    return load_model(args.model or Path(cfg.out) / "model.bin")


def cmd_train_net(args, cfg):
    train, test = load_data(cfg)
    model = obtain_model(cfg, train)
    path = _out(cfg) / "model.bin"
    save_model(model, path)
    print(f"wrote {path} (train accuracy {accuracy(model, train.samples, train.labels):.4f}, "
          f"test accuracy {accuracy(model, test.samples, test.labels):.4f})")


def cmd_fit_basis(args, cfg):
    train, _ = load_data(cfg)
    basis = fit_basis(train.samples, cfg.features.centered)
    path = _out(cfg) / "basis.bin"
    save_basis(basis, path)
    print(f"wrote {path} (m = {basis.dim}, smallest eigenvalue {basis.values[-1]:.3e})")


def cmd_extract_features(args, cfg):
    model = _model(args, cfg)
    basis = load_basis(args.basis or Path(cfg.out) / "basis.bin")
    x = load_dataset(args.input).samples if args.input else load_data(cfg)[0].samples
    F = extract_features(cfg, model, basis, x)
    path = Path(args.output) if args.output else _out(cfg) / f"features.{args.format}"
    if args.format == "csv":
        lscf_dim = cfg.features.lscf_dim if cfg.features.subset != "hf" else 0
        save_features_csv(path, F, min(lscf_dim, F.shape[1]))
    else:
        save_features_bin(path, F)
    print(f"wrote {path} ({F.shape[0]} x {F.shape[1]})")


def cmd_fit_detector(args, cfg):
    det = cfg.detector
    if det.param is None:
        raise ValueError("fit-detector needs detector.param (bandwidth or nu); pass --set detector.param=...")
    F = load_features_bin(args.features)
    model = fit_detector(det.kind, F, det.kernel, det.param, det.standardize, **det.ocsvm_kw())
    path = Path(args.output) if args.output else _out(cfg) / "detector.bin"
    save_detector(model, path)
    print(f"wrote {path} ({det.kind}/{det.kernel}, param {det.param:g}, {F.shape[0]} training rows)")


def cmd_attack(args, cfg):
    model = _model(args, cfg)
    data = load_dataset(args.input) if args.input else load_data(cfg)[1]
    out = _out(cfg)
    names = attack_labels(cfg.attacks)
    unknown = sorted(set(args.only) - set(names))
    if unknown:
        raise ValueError(f"unknown attack name(s) {unknown}; configured: {names}")
    for name, acfg in zip(names, cfg.attacks):
        if args.only and name not in args.only:
            continue
        xa = run_attack(model, data.samples, data.labels, acfg, cfg.threads, ATTACK_CHUNK)
        save_tensor_file(out / f"adv_{name}.bin", xa, data.labels)
        manifest = {
            "name": name, "kind": acfg.kind, "eps": acfg.eps, "steps": acfg.steps, "step_size": acfg.step_size,
            "random_start": acfg.random_start, "seed": acfg.seed, "clamp": list(acfg.clamp),
            "n": int(xa.shape[0]), "accuracy": accuracy(model, xa, data.labels),
        }
        (out / f"adv_{name}.json").write_text(json.dumps(manifest, indent=2) + "\n")
        print(f"wrote {out / f'adv_{name}.bin'} (accuracy under attack {manifest['accuracy']:.4f})")


def _print_report(report) -> None:
    print(f"clean accuracy {report.clean_accuracy:.4f}; detector {report.detector_kind}/{report.detector_kernel} "
          f"param {report.detector_param:g}")
    for name, auc in report.auc.items():
        print(f"  {name:12s} auc {auc:.4f}  (accuracy under attack {report.attack_accuracy[name]:.4f})")
    if report.auc:
        print(f"  {'pooled':12s} auc {report.overall_pooled:.4f}")
        print(f"  {'macro':12s} auc {report.overall_macro:.4f}")


def cmd_evaluate(args, cfg):
    report = run_experiment(cfg)
    _print_report(report)
    print(f"wrote {Path(cfg.out) / 'report.csv'}")


def cmd_sweep(args, cfg):
    report = run_experiment(cfg)
    kinds = ("kde", "ocsvm") if args.kind == "both" else (args.kind,)
    for kind, table in sweep_tables(cfg, report, kinds).items():
        path = Path(cfg.out) / f"sweep_{kind}.csv"
        table.write_csv(path)
        best = table.best_row()
        print(f"wrote {path} ({len(table.rows)} rows; best {best.kernel} {best.hyperparameter:g} "
              f"auc {best.auc_overall:.4f})")


def cmd_noise_robustness(args, cfg):
    report = run_experiment(cfg)
    rows = noise_robustness(cfg, report)
    path = Path(cfg.out) / "noise_robustness.csv"
    write_noise_csv(rows, path)
    print(f"clean pooled auc {report.overall_pooled:.4f}")
    for r in rows:
        print(f"  {r.noise:8s} {r.level_255:4g}/255  auc {r.auc:.4f}  drop {r.drop:+.4f}")
    print(f"wrote {path}")


def cmd_bench_curvature(args, cfg):
    dims = [int(d) for d in args.dims.split(",") if d.strip()]
    rows = curvature_benchmark(dims, args.repeats, seed=cfg.resolved_seed)
    path = _out(cfg) / "curvature_bench.csv"
    write_benchmark_csv(rows, path)
    for r in rows:
        print(f"  dim {r.dim:5d}  ggn {r.ggn_seconds:.2e}s  fd {r.fd_seconds:.2e}s  ratio {r.ratio:.1f}")
    print(f"wrote {path}")


COMMANDS = {
    "train-net": cmd_train_net,
    "fit-basis": cmd_fit_basis,
    "extract-features": cmd_extract_features,
    "fit-detector": cmd_fit_detector,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "noise-robustness": cmd_noise_robustness,
    "bench-curvature": cmd_bench_curvature,
}


def _fail(code: int, kind: str, message: str) -> int:
    one_line = " ".join(str(message).split())
    print(f"error: {kind}: {one_line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.config is not None and not Path(args.config).is_file():
        return _fail(2, "config", f"config file not found: {args.config}")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except StageError as exc:
        return _fail(1, f"stage={exc.stage}", f"{type(exc.cause).__name__}: {exc.cause}")
    except Exception as exc:
        if args.verbose:
            logger.exception("command failed")
        return _fail(1, type(exc).__name__, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
