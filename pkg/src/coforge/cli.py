"""``coforge train|diagnose|sweep|plots``: config-driven runs that write CSV/JSON results.

Exit codes: 0 success, 2 config error, 3 data or checkpoint error, 4 numerical abort.
``COFORGE_THREADS`` caps the number of sweep worker processes.
"""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .attacks import AttackSpec, step_size_sweep
from .config import ExperimentConfig
from .data import Dataset, load_cifar10, subset, synthetic_dataset
from .diagnostics import (
    accuracy_delta_report,
    channel_variance,
    co_sweep,
    parameter_variance,
    prune_and_retrain,
    write_sweep_csv,
)
from .errors import ConfigError, DataError, MissingDataError, NonFiniteError, ShapeError
from .nn import build_model, load_checkpoint
from .training import accuracy, first_co_epoch, read_metrics_csv, rl_fgsm_accuracy, train

log = logging.getLogger("coforge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CIFAR_ENV = "COFORGE_CIFAR_DIR"
THREADS_ENV = "COFORGE_THREADS"
CURVES_HEADER = ("epoch", "train", "rl_train", "test_pgd")


# ---------------------------------------------------------------------------
# shared plumbing


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test sets for a config: CIFAR-10 binaries, or the synthetic stand-in.

    The CIFAR directory comes from ``data.dir``, else ``$COFORGE_CIFAR_DIR``.
    ``data.train_size`` draws a class-stratified subset (seeded by the run
    seed); ``data.test_size`` keeps the first items of the test split.
    """
    d = cfg.data
    shape = tuple(cfg.model.input_shape)
    data_dir = d.get("dir") or os.environ.get(CIFAR_ENV)
    if data_dir:
        train_set, test_set = load_cifar10(data_dir)
    elif d.get("synthetic"):
        s = d["synthetic"]
        kw = dict(num_classes=cfg.model.num_classes, seed=s["seed"], snr=s["snr"], shape=shape, amplitude=s["amplitude"])
        train_set = synthetic_dataset(s["n_train"], split="train", **kw)
        test_set = synthetic_dataset(s["n_test"], split="test", **kw)
    else:
        raise MissingDataError(
            f"no dataset: pass --data-dir or set {CIFAR_ENV} to a cifar-10-batches-bin directory "
            "(data_batch_1.bin .. data_batch_5.bin, test_batch.bin)"
        )
    if tuple(train_set.images.shape[1:]) != shape:
        raise ConfigError(f"model input_shape {list(shape)} does not match data {list(train_set.images.shape[1:])}",
                          keys=["model.input_shape"])
    if d.get("train_size") and d["train_size"] < len(train_set):
        train_set = subset(train_set, int(d["train_size"]), seed=cfg.seed)
    if d.get("test_size"):
        test_set = test_set.head(int(d["test_size"]))
    return train_set, test_set


def run_dir_for(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) if cfg.out else Path("runs") / f"{cfg.name}-seed{cfg.seed}"


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def co_label(epoch) -> object:
    return "none" if epoch is None else int(epoch)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}", keys=[THREADS_ENV]) from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1", keys=[THREADS_ENV])
    return n


def resolve(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config)
    return cfg.with_overrides(seed=args.seed, data_dir=args.data_dir, out=args.out)


def metrics_summary(metrics, horizon: int) -> dict:
    co = first_co_epoch(metrics)
    last = metrics[-1] if metrics else None
    return {
        "co_epoch": co_label(co),
        "epochs_run": len(metrics),
        "horizon": horizon,
        "final": None if last is None else {k: v for k, v in asdict(last).items() if k != "wall_time_s"},
        "max_test_pgd_acc": max((m.test_pgd_acc for m in metrics), default=None),
    }


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig, checkpoint=None) -> Path:
    """Train per ``cfg``; returns the run directory.

    Writes ``config.resolved.json``, ``metrics.csv``, ``checkpoints/`` and
    ``summary.json`` (first CO epoch or ``"none"``). ``prune_retrain`` runs add
    ``pruned/`` and ``unpruned/`` continuations from the first CO checkpoint.
    """
    if cfg.kind in ("diagnose", "sweep"):
        raise ConfigError(f"kind {cfg.kind!r} runs under `coforge {cfg.kind}`, not `train`", keys=["kind"])
    train_set, test_set = load_data(cfg)  # before touching the run dir, so a data error leaves nothing behind
    out = run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.resolved.json", cfg.to_dict())

    if checkpoint is not None and cfg.kind == "prune_retrain":
        result_metrics = []
        start_ckpt = Path(checkpoint)
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        result = train(model, train_set, test_set, cfg.train, run_dir=out)
        result_metrics = result.metrics
        start_ckpt = None
    summary = {"name": cfg.name, "kind": cfg.kind, "seed": cfg.seed, **metrics_summary(result_metrics, cfg.train.epochs)}

    if cfg.kind == "prune_retrain":
        if start_ckpt is None:
            pick = cfg.retrain["checkpoint_epoch"]
            if pick is None:
                pick = first_co_epoch(result_metrics)
            if pick is None:
                summary["retrain"] = {"status": "skipped: no CO epoch to start from"}
                write_json(out / "summary.json", summary)
                return out
            start_ckpt = out / "checkpoints" / f"epoch_{int(pick):03d}.cofg"
        summary["retrain"] = retrain_pair(cfg, start_ckpt, train_set, test_set, out)
    write_json(out / "summary.json", summary)
    log.info("run %s: first CO epoch %s", out, summary["co_epoch"])
    return out


def retrain_pair(cfg: ExperimentConfig, ckpt: Path, train_set, test_set, out: Path) -> dict:
    """Pruned and un-pruned continuations of ``ckpt`` with identical RNG state."""
    before = file_sha256(ckpt)
    k, extra = int(cfg.retrain["k_channels"]), int(cfg.retrain["extra_epochs"])
    runs = {}
    for label, kk in (("pruned", k), ("unpruned", 0)):
        model = load_checkpoint(ckpt)
        res = prune_and_retrain(model, train_set, test_set, cfg.train, k_channels=kk, extra_epochs=extra,
                                run_dir=out / label)
        runs[label] = res.metrics
    if file_sha256(ckpt) != before:
        raise DataError(f"checkpoint {ckpt} changed during retraining")
    start = load_checkpoint(ckpt).epoch

    def recur(metrics) -> object:
        co = first_co_epoch(metrics)
        # never recurring within the continuation counts as the horizon + 1
        return extra + 1 if co is None else co - start + 1

    pruned_pgd = [m.test_pgd_acc for m in runs["pruned"]]
    return {
        "checkpoint": str(ckpt),
        "start_epoch": start,
        "k_channels": k,
        "extra_epochs": extra,
        "pruned_test_pgd": pruned_pgd,
        "unpruned_test_pgd": [m.test_pgd_acc for m in runs["unpruned"]],
        "pruned_co_after": recur(runs["pruned"]),
        "unpruned_co_after": recur(runs["unpruned"]),
        "pruned_max_pgd_first3": max(pruned_pgd[:3], default=None),
    }


# ---------------------------------------------------------------------------
# diagnose


def default_diagnose_config(ckpt_model) -> ExperimentConfig:
    return config_mod.from_dict({"name": "diagnose", "kind": "diagnose", "model": ckpt_model.config.to_dict()})


def cmd_diagnose(cfg: ExperimentConfig, checkpoint, prune_top: int | None = None) -> Path:
    """Variance, pruning, self-fitting and step-size reports for one checkpoint.

    Variances use FGSM examples of the first ``diagnose.n_samples`` training
    items; accuracies use the first ``n_samples`` test items. The checkpoint
    file is hashed before and after and must not change.
    """
    ckpt = Path(checkpoint)
    before = file_sha256(ckpt)
    model = load_checkpoint(ckpt)
    cfg = replace(cfg, model=model.config)
    dg = cfg.diagnose
    eps = dg["eps"] if dg["eps"] is not None else cfg.eps
    k = int(prune_top if prune_top is not None else dg["prune_top"])
    n = int(dg["n_samples"])
    out = Path(cfg.out) if cfg.out else ckpt.parent.parent / f"diagnose_{ckpt.stem}"
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_data(cfg)
    var_set, acc_set = train_set.head(n), test_set.head(n)

    report = channel_variance(model, var_set, AttackSpec.fgsm(eps))
    clean_report = channel_variance(model, var_set, None)
    (out / "variance.json").write_text(report.to_json() + "\n")
    (out / "variance_clean.json").write_text(clean_report.to_json() + "\n")
    report.write_rank_csv(out / "rank_variance.csv")
    write_json(out / "param_variance.json", {"per_channel_var": parameter_variance(model)})

    summary = {"checkpoint": str(ckpt), "checkpoint_sha256": before, "epoch": model.epoch, "eps": eps,
               "max_var": report.max_var, "dead_count": report.dead_count}
    if k > 0:
        pr = accuracy_delta_report(model, acc_set, report.order[:k], eps, AttackSpec.pgd(eps, iters=int(dg["pgd_iters"])),
                                   seed=cfg.seed)
        (out / "prune_report.json").write_text(pr.to_json() + "\n")
        pr.write_csv(out / "prune_table.csv")
        summary["prune"] = {"channels": report.order[:k], **pr.deltas}
    summary["rl_fgsm_acc"] = rl_fgsm_accuracy(model, var_set, eps, seed=cfg.seed)
    summary["train_fgsm_acc"] = accuracy(model, var_set, AttackSpec.fgsm(eps))
    summary["step_size"] = write_step_size_csv(model, test_set, dg, eps, cfg.seed, out / "step_size_sweep.csv")
    write_json(out / "diagnose.json", summary)
    if file_sha256(ckpt) != before:
        raise DataError(f"checkpoint {ckpt} was modified during diagnosis")
    return out


def write_step_size_csv(model, test_set: Dataset, dg: dict, eps: float, seed: int, path: Path) -> dict:
    """Target probability vs step size for one test image, for every class as target."""
    idx = int(dg["image_index"])
    if not 0 <= idx < len(test_set):
        raise ConfigError(f"diagnose.image_index {idx} outside the test set", keys=["diagnose.image_index"])
    alphas = dg["alphas"] if dg["alphas"] is not None else [float(a) for a in np.linspace(0.0, eps, 17)]
    image, true = test_set.images[idx], int(test_set.labels[idx])
    rows = []
    for target in range(test_set.num_classes):
        for a, p in step_size_sweep(model, image, target, alphas):
            rows.append([target, int(target == true), repr(a), f"{a * 255:.4f}", repr(p)])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "is_true_class", "alpha", "alpha_255", "probability"])
        w.writerows(rows)
    # right arm of the U-shape: wrong-class probability at eps vs at eps/4
    wrong = (true + 1 + np.random.default_rng(seed).integers(0, test_set.num_classes - 1)) % test_set.num_classes
    probs = dict(step_size_sweep(model, image, int(wrong), [eps / 4, eps]))
    return {"image_index": idx, "true_class": true, "wrong_class": int(wrong),
            "p_wrong_at_eps_over_4": probs[eps / 4], "p_wrong_at_eps": probs[eps]}


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    """PGD-AT grid over ``sweep.iters`` x ``sweep.alphas``; writes ``grid.csv``.

    Finished cells are cached under ``cells/`` so a rerun resumes.
    """
    train_set, test_set = load_data(cfg)  # before touching the run dir, so a data error leaves nothing behind
    out = run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.resolved.json", cfg.to_dict())
    eps = cfg.sweep["eps"] if cfg.sweep["eps"] is not None else cfg.train.attack.eps
    factory = functools.partial(build_model, cfg.model, cfg.seed)
    cells = co_sweep(factory, train_set, test_set, cfg.train, cfg.sweep["iters"], cfg.sweep["alphas"], eps,
                     cache_dir=out / "cells", workers=worker_count())
    write_sweep_csv(out / "grid.csv", cells)
    write_json(out / "summary.json", {
        "name": cfg.name, "seed": cfg.seed, "eps": eps, "cells": len(cells),
        "errors": [c.key for c in cells if c.status != "ok"],
    })
    return out


# ---------------------------------------------------------------------------
# plots


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _run_eps(run: Path) -> float | None:
    resolved = run / "config.resolved.json"
    if not resolved.exists():
        return None
    train_cfg = json.loads(resolved.read_text())["train"]
    attack = train_cfg["attack"] if train_cfg["attack"]["kind"] != "none" else train_cfg["eval_attack"]
    return float(attack["eps"])


def emit_plots_data(run_dir, out=None) -> list:
    """Figure-shaped CSVs from whatever a run directory holds; reruns are byte-identical.

    * ``metrics.csv``        -> ``curves_eps<k>.csv`` (epoch, train, rl_train, test_pgd)
    * ``pruned/ + unpruned/`` -> ``retrain_curves.csv``
    * ``diagnose_*/``        -> ``rank_variance_<ckpt>.csv``, ``alpha_prob_<ckpt>.csv``
    * ``grid.csv``           -> ``grid_heat.csv`` (iters rows x alpha columns)
    """
    run = Path(run_dir)
    if not run.is_dir():
        raise MissingDataError(f"run directory not found: {run}")
    out = Path(out) if out is not None else run / "plots"
    written = []
    metrics_path = run / "metrics.csv"
    grid_path = run / "grid.csv"
    diag_dirs = sorted(p for p in run.iterdir() if p.is_dir() and (p / "rank_variance.csv").exists())
    if (run / "rank_variance.csv").exists():
        diag_dirs.insert(0, run)
    has_pair = (run / "pruned" / "metrics.csv").exists() and (run / "unpruned" / "metrics.csv").exists()
    if not (metrics_path.exists() or grid_path.exists() or diag_dirs or has_pair):
        raise MissingDataError(f"{run} has no metrics.csv, grid.csv, retraining pair or diagnosis outputs")

    if metrics_path.exists():
        metrics = read_metrics_csv(metrics_path)
        eps = _run_eps(run)
        tag = "unknown" if eps is None else f"{round(eps * 255):d}"
        rows = [[m.epoch, _fmt(m.train_fgsm_acc), _fmt(m.rl_fgsm_acc), _fmt(m.test_pgd_acc)] for m in metrics]
        written.append(_write_rows(out / f"curves_eps{tag}.csv", CURVES_HEADER, rows))
    if has_pair:
        pruned = read_metrics_csv(run / "pruned" / "metrics.csv")
        unpruned = {m.epoch: m for m in read_metrics_csv(run / "unpruned" / "metrics.csv")}
        rows = [[m.epoch, _fmt(m.test_pgd_acc), _fmt(unpruned[m.epoch].test_pgd_acc) if m.epoch in unpruned else ""]
                for m in pruned]
        written.append(_write_rows(out / "retrain_curves.csv", ("epoch", "pruned_test_pgd", "unpruned_test_pgd"), rows))
    for d in diag_dirs:
        suffix = "" if d == run else "_" + d.name.removeprefix("diagnose_")
        with (d / "rank_variance.csv").open(newline="") as fh:
            rows = [[r["rank"], r["channel"], _fmt(float(r["variance"]))] for r in csv.DictReader(fh)]
        written.append(_write_rows(out / f"rank_variance{suffix}.csv", ("rank", "channel", "variance"), rows))
        if (d / "step_size_sweep.csv").exists():
            with (d / "step_size_sweep.csv").open(newline="") as fh:
                rows = [[r["target"], r["is_true_class"], r["alpha_255"], _fmt(float(r["probability"]))]
                        for r in csv.DictReader(fh)]
            written.append(_write_rows(out / f"alpha_prob{suffix}.csv", ("target", "is_true_class", "alpha_255", "probability"), rows))
    if grid_path.exists():
        with grid_path.open(newline="") as fh:
            cells = list(csv.DictReader(fh))
        alphas = sorted({c["alpha_255"] for c in cells}, key=float)
        table = {}
        for c in cells:
            table.setdefault(int(c["iters"]), {})[c["alpha_255"]] = c["min_robust_acc"] if c["status"] == "ok" else "nan"
        rows = [[i, *(_fmt(float(table[i].get(a, "nan"))) for a in alphas)] for i in sorted(table)]
        written.append(_write_rows(out / "grid_heat.csv", ("iters", *(f"alpha_{a}" for a in alphas)), rows))
    return written


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", required=need_config,
                       help=f"JSON/TOML config path or preset name ({', '.join(config_mod.preset_names())})")
        p.add_argument("--data-dir", help=f"cifar-10-batches-bin directory (default ${CIFAR_ENV})")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train a model and write metrics, checkpoints and a CO summary")
    common(p)
    p.add_argument("--checkpoint", help="prune_retrain: continue from this checkpoint instead of training first")
    p = sub.add_parser("diagnose", help="variance / pruning / self-fitting reports for a checkpoint")
    common(p, need_config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prune-top", type=int, help="number of highest-variance channels to prune")
    p = sub.add_parser("sweep", help="PGD-AT grid over iterations and step sizes")
    common(p)
    p = sub.add_parser("plots", help="figure-shaped CSVs from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default RUN_DIR/plots)")
    return parser


def dispatch(args) -> Path | list:
    if args.command == "plots":
        return emit_plots_data(args.run_dir, args.out)
    if args.command == "diagnose":
        if args.config:
            cfg = resolve(args)
        else:
            cfg = default_diagnose_config(load_checkpoint(args.checkpoint)).with_overrides(
                seed=args.seed, data_dir=args.data_dir, out=args.out)
        return cmd_diagnose(cfg, args.checkpoint, args.prune_top)
    cfg = resolve(args)
    if args.command == "train":
        return cmd_train(cfg, args.checkpoint)
    return cmd_sweep(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = dispatch(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        where = f" (batch {exc.batch_index})" if exc.batch_index is not None else ""
        print(f"numerical abort{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(result, list):
        for p in result:
            print(p)
    else:
        print(result)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
