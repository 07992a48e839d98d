"""Scaled CO experiments and their pass/fail checks (3 seeds, 2-of-3 rule).

Each experiment is a shipped preset run through the same code paths as the
command line. Finished runs are reused from the run root, so an interrupted
acceptance pass resumes. The ``check_*`` functions are pure: they read run
outputs and return a :class:`Verdict`.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import cli
from . import config as config_mod
from .data import load_cifar10
from .diagnostics import co_sweep
from .errors import MissingDataError
from .nn import build_model
from .training import CO_FGSM_MIN, CO_PGD_MAX, first_co_epoch, read_metrics_csv

log = logging.getLogger(__name__)

SEEDS = (1, 2, 3)
NEEDED = 2
CIFAR_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]

# thresholds (fractions, not percentage points)
CO_PGD, CO_FGSM = CO_PGD_MAX, CO_FGSM_MIN
RL_AFTER_MIN, RL_BEFORE_MAX = 0.30, 0.12
PRUNE_FGSM_DROP, PRUNE_CLEAN_BAND, PRUNE_PRE_BAND = -0.40, 0.05, 0.10
VAR_RATIO = 3.0
RETRAIN_PGD, RETRAIN_WITHIN, RETRAIN_DELAY = 0.15, 3, 2
SWEEP_BIG_ALPHA, SWEEP_SMALL_CELL, SWEEP_SMALL_MIN = 12 / 255, (8, 4 / 255), 0.15


@dataclass
class Verdict:
    passed: bool
    detail: str
    per_seed: dict = field(default_factory=dict)


def cifar_dir() -> Path | None:
    """The CIFAR-10 binary directory from ``$COFORGE_CIFAR_DIR`` if it holds all six files."""
    raw = os.environ.get(cli.CIFAR_ENV)
    if not raw:
        return None
    d = Path(raw)
    return d if all((d / f).is_file() for f in CIFAR_FILES) else None


def majority(per_seed: dict, what: str) -> Verdict:
    ok = sum(bool(v[0]) for v in per_seed.values())
    detail = f"{ok}/{len(per_seed)} seeds pass (need {NEEDED}); " + "; ".join(
        f"seed {s}: {'ok' if v[0] else 'no'} ({v[1]})" for s, v in per_seed.items()
    )
    return Verdict(ok >= NEEDED, f"{what}: {detail}", per_seed)


# ---------------------------------------------------------------------------
# runners (cached by run directory)


class Runner:
    def __init__(self, root, data_dir):
        self.root = Path(root)
        self.data_dir = Path(data_dir)

    def cfg(self, preset: str, seed: int):
        return config_mod.load(preset).with_overrides(seed=seed, data_dir=self.data_dir,
                                                      out=self.root / f"{preset}-seed{seed}")

    def train(self, preset: str, seed: int, checkpoint=None) -> Path:
        cfg = self.cfg(preset, seed)
        out = Path(cfg.out)
        if (out / "summary.json").exists():
            return out
        log.info("running %s seed %d", preset, seed)
        return cli.cmd_train(cfg, checkpoint)

    def co_run(self, seed: int) -> Path:
        return self.train("fig2_eps16", seed)

    def pre_post(self, seed: int):
        """(pre-CO, post-CO) checkpoints of the eps=16/255 run, or None without a usable CO epoch."""
        run = self.co_run(seed)
        co = first_co_epoch(read_metrics_csv(run / "metrics.csv"))
        if co is None or co == 0:
            return None
        ck = run / "checkpoints"
        return ck / f"epoch_{co - 1:03d}.cofg", ck / f"epoch_{co:03d}.cofg"

    def diagnose(self, seed: int, ckpt: Path) -> dict:
        out = ckpt.parent.parent / f"diagnose_{ckpt.stem}"
        if not (out / "diagnose.json").exists():
            cfg = self.cfg("table1", seed)
            cli.cmd_diagnose(replace(cfg, out=str(out)), ckpt, prune_top=1)
        return json.loads((out / "diagnose.json").read_text())

    def retrain(self, seed: int) -> dict | None:
        pp = self.pre_post(seed)
        if pp is None:
            return None
        run = self.train("fig_retrain", seed, checkpoint=pp[1])
        return json.loads((run / "summary.json").read_text())["retrain"]

    def sweep_cells(self, seed: int, cells) -> dict:
        """Train the requested (iters, alpha) cells of the sweep preset; returns {(iters, alpha): SweepCell}."""
        cfg = self.cfg("fig_sweep", seed)
        out = Path(cfg.out)
        train_set, test_set = cli.load_data(cfg)
        eps = cfg.sweep["eps"]
        factory = _Factory(cfg.model, cfg.seed)
        got = {}
        for iters, alpha in cells:
            (cell,) = co_sweep(factory, train_set, test_set, cfg.train, [iters], [alpha], eps,
                               cache_dir=out / "cells")
            got[(iters, alpha)] = cell
        return got


class _Factory:
    def __init__(self, model_cfg, seed):
        self.model_cfg, self.seed = model_cfg, seed

    def __call__(self):
        return build_model(self.model_cfg, self.seed)


# ---------------------------------------------------------------------------
# checks on run outputs


def check_co(metrics) -> tuple[bool, str]:
    hits = [m for m in metrics if m.test_pgd_acc < CO_PGD and m.train_fgsm_acc > CO_FGSM]
    if not hits:
        best = min(metrics, key=lambda m: m.test_pgd_acc)
        return False, f"no CO epoch; lowest PGD {best.test_pgd_acc:.3f} at epoch {best.epoch} (train FGSM {best.train_fgsm_acc:.3f})"
    m = hits[0]
    return True, f"CO at epoch {m.epoch}: PGD {m.test_pgd_acc:.3f}, train FGSM {m.train_fgsm_acc:.3f}"


def check_self_fitting(metrics) -> tuple[bool, str]:
    co = first_co_epoch(metrics)
    if co is None:
        return False, "no CO epoch"
    before = [m.rl_fgsm_acc for m in metrics if m.epoch < co]
    after = [m.rl_fgsm_acc for m in metrics if m.epoch >= co]
    hi_before = max(before, default=0.0)
    ok = max(after) >= RL_AFTER_MIN and hi_before <= RL_BEFORE_MAX
    return ok, f"RL-FGSM max after CO {max(after):.3f} (>= {RL_AFTER_MIN}), max before {hi_before:.3f} (<= {RL_BEFORE_MAX})"


def check_prune(pre: dict, post: dict) -> tuple[bool, str]:
    p, q = post["prune"], pre["prune"]
    post_ok = p["fgsm"] <= PRUNE_FGSM_DROP and abs(p["clean"]) <= PRUNE_CLEAN_BAND
    pre_ok = all(abs(q[k]) <= PRUNE_PRE_BAND for k in ("clean", "fgsm", "pgd"))
    return post_ok and pre_ok, (
        f"post-CO deltas fgsm {100 * p['fgsm']:+.1f} clean {100 * p['clean']:+.1f} pts; "
        f"pre-CO deltas clean {100 * q['clean']:+.1f} fgsm {100 * q['fgsm']:+.1f} pgd {100 * q['pgd']:+.1f} pts"
    )


def check_variance(pre: dict, post: dict) -> tuple[bool, str]:
    ratio = post["max_var"] / pre["max_var"] if pre["max_var"] > 0 else float("inf")
    ok = ratio >= VAR_RATIO and post["dead_count"] > pre["dead_count"]
    return ok, f"max-variance ratio {ratio:.2f} (>= {VAR_RATIO}), dead {pre['dead_count']} -> {post['dead_count']}"


def check_retrain(summary: dict) -> tuple[bool, str]:
    first = summary["pruned_test_pgd"][:RETRAIN_WITHIN]
    delay = summary["pruned_co_after"] - summary["unpruned_co_after"]
    ok = max(first) > RETRAIN_PGD and delay >= RETRAIN_DELAY
    return ok, (f"pruned PGD max over first {RETRAIN_WITHIN} epochs {max(first):.3f} (> {RETRAIN_PGD}); "
                f"CO recurs after {summary['pruned_co_after']} vs {summary['unpruned_co_after']} epochs (delay {delay})")


def check_sweep(cells: dict) -> tuple[bool, str]:
    big = {k: c for k, c in cells.items() if k[1] >= SWEEP_BIG_ALPHA - 1e-12}
    small = cells[SWEEP_SMALL_CELL]
    bad = [f"({i},{a * 255:.0f}/255)={c.min_robust_acc:.3f}" for (i, a), c in sorted(big.items())
           if not (c.status == "ok" and c.min_robust_acc < CO_PGD)]
    ok = not bad and small.status == "ok" and small.min_robust_acc > SWEEP_SMALL_MIN
    return ok, (f"large-alpha cells CO-positive: {len(big) - len(bad)}/{len(big)}"
                + (f" (failing {', '.join(bad)})" if bad else "")
                + f"; (8, 4/255) min robust {small.min_robust_acc:.3f} (> {SWEEP_SMALL_MIN})")


def check_mitigation(gradalign_metrics, pgdinit_metrics) -> tuple[bool, str]:
    ga = first_co_epoch(gradalign_metrics)
    pi = first_co_epoch(pgdinit_metrics)
    return ga is None and pi is not None, f"GradAlign CO epoch {cli.co_label(ga)} (want none); PGD-7 init CO epoch {cli.co_label(pi)} (want finite)"


# ---------------------------------------------------------------------------
# criteria


def criterion_co(runner: Runner, seeds=SEEDS) -> Verdict:
    return majority({s: check_co(read_metrics_csv(runner.co_run(s) / "metrics.csv")) for s in seeds},
                    "CO reproduction at eps 16/255")


def criterion_self_fitting(runner: Runner, seeds=SEEDS) -> Verdict:
    return majority({s: check_self_fitting(read_metrics_csv(runner.co_run(s) / "metrics.csv")) for s in seeds},
                    "RL-FGSM self-fitting signal")


def _paired(runner: Runner, seeds, check, what) -> Verdict:
    per = {}
    for s in seeds:
        pp = runner.pre_post(s)
        if pp is None:
            per[s] = (False, "no pre/post-CO checkpoint pair")
            continue
        per[s] = check(runner.diagnose(s, pp[0]), runner.diagnose(s, pp[1]))
    return majority(per, what)


def criterion_prune(runner: Runner, seeds=SEEDS) -> Verdict:
    return _paired(runner, seeds, check_prune, "top-variance channel pruning")


def criterion_variance(runner: Runner, seeds=SEEDS) -> Verdict:
    return _paired(runner, seeds, check_variance, "variance curve")


def criterion_retrain(runner: Runner, seeds=SEEDS) -> Verdict:
    per = {}
    for s in seeds:
        summary = runner.retrain(s)
        per[s] = (False, "no CO checkpoint to continue from") if summary is None else check_retrain(summary)
    return majority(per, "prune-and-retrain")


def sweep_cells_needed(cfg) -> list:
    iters, alphas = cfg.sweep["iters"], cfg.sweep["alphas"]
    cells = [(i, a) for i in iters for a in alphas if a >= SWEEP_BIG_ALPHA - 1e-12]
    return cells + [SWEEP_SMALL_CELL]


def criterion_sweep(runner: Runner, seeds=SEEDS) -> Verdict:
    cells = sweep_cells_needed(config_mod.load("fig_sweep"))
    return majority({s: check_sweep(runner.sweep_cells(s, cells)) for s in seeds}, "multi-step sweep")


def criterion_mitigation(runner: Runner, seeds=SEEDS) -> Verdict:
    per = {}
    for s in seeds:
        ga = read_metrics_csv(runner.train("fig_gradalign", s) / "metrics.csv")
        pi = read_metrics_csv(runner.train("fig_pgdinit", s) / "metrics.csv")
        per[s] = check_mitigation(ga, pi)
    return majority(per, "GradAlign vs PGD-7 init")


CRITERIA = {
    4: ("CO reproduction", criterion_co),
    5: ("self-fitting signal", criterion_self_fitting),
    6: ("channel differentiation", criterion_prune),
    7: ("variance curve", criterion_variance),
    8: ("prune-and-retrain", criterion_retrain),
    9: ("multi-step CO sweep", criterion_sweep),
    10: ("mitigation pair", criterion_mitigation),
}


def runner_from_env(root=None) -> Runner:
    data = cifar_dir()
    if data is None:
        raise MissingDataError(
            f"CIFAR-10 binaries not found: set {cli.CIFAR_ENV} to a cifar-10-batches-bin directory "
            f"containing {', '.join(CIFAR_FILES)}"
        )
    root = root or os.environ.get("COFORGE_ACCEPTANCE_DIR", "acceptance_runs")
    load_cifar10(data)  # fail early on corrupt files
    return Runner(root, data)

