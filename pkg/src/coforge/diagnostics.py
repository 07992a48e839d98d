"""First-layer channel analysis: feature/parameter variance, pruning, prune-and-retrain, CO sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import AttackSpec
from .data import Dataset
from .nn import Model, first_layer_features
from .training import (
    CO_PGD_MAX,
    TrainConfig,
    TrainResult,
    accuracy,
    attack_batch,
    train,
)

log = logging.getLogger(__name__)

DEAD_THRESHOLD = 1e-6


@dataclass
class ChannelVarianceReport:
    per_channel_var: list
    order: list
    dead_count: int
    source: str
    n_samples: int

    @property
    def max_var(self) -> float:
        return max(self.per_channel_var)

    def rank_curve(self) -> list:
        """(rank, variance) pairs in descending-variance order."""
        return [(r, self.per_channel_var[c]) for r, c in enumerate(self.order)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write_rank_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "channel", "variance"])
            for r, c in enumerate(self.order):
                w.writerow([r, c, repr(self.per_channel_var[c])])
        return path


class _Welford:
    """Per-channel (count, mean, M2) accumulator; batches merge in arrival order."""

    def __init__(self, channels: int):
        self.count = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, values: np.ndarray) -> None:
        # values: (count_b, C)
        nb = values.shape[0]
        if nb == 0:
            return
        mb = values.mean(axis=0)
        m2b = ((values - mb) ** 2).sum(axis=0)
        n = self.count + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.count * nb / n)
        self.count = n

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / self.count


def descending_order(values) -> list:
    """Indices by descending value, ties broken by ascending index."""
    values = list(values)
    return sorted(range(len(values)), key=lambda i: (-values[i], i))


def channel_variance(
    model: Model,
    dataset: Dataset,
    attack: AttackSpec | None = None,
    batch_size: int = 256,
    seed: int = 0,
) -> ChannelVarianceReport:
    """Population variance of every first-layer post-ReLU channel over a dataset.

    Each channel pools all N*H1*W1 activations. With an ``attack`` the features
    are taken on its adversarial examples (crafted in eval mode).
    """
    if len(dataset) == 0:
        raise ValueError("channel_variance needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    acc = None
    with model.mode_as("eval"):
        for xb, yb in dataset.batches(batch_size):
            xa = attack_batch(model, xb, yb, attack, rng)
            feats = first_layer_features(model, xa).astype(np.float64)
            c = feats.shape[1]
            acc = acc or _Welford(c)
            acc.update(feats.transpose(0, 2, 3, 1).reshape(-1, c))
    var = [float(v) for v in np.maximum(acc.variance, 0.0)]
    source = "clean" if attack is None or attack.kind == "none" else attack.kind
    return ChannelVarianceReport(
        per_channel_var=var,
        order=descending_order(var),
        dead_count=sum(v < DEAD_THRESHOLD for v in var),
        source=source,
        n_samples=len(dataset),
    )


def parameter_variance(model: Model) -> list:
    """Population variance of each first-layer conv filter (over Cin*kh*kw values)."""
    head = model.head_layers()
    if head is None:
        raise ValueError("model has no conv -> bn -> relu head")
    w = head[0].weight.data.astype(np.float64)
    return [float(v) for v in w.reshape(w.shape[0], -1).var(axis=1)]


def prune_channel(model: Model, channel: int) -> Model:
    """Copy of ``model`` with first-layer channel ``channel`` zeroed.

    Zeroes the conv filter, the conv bias (if any), and the BN gamma and beta
    of that channel, so its post-ReLU feature is 0 whatever the running stats.
    The next layer's weights are left as they are.
    """
    head = model.head_layers()
    if head is None:
        raise ValueError("model has no conv -> bn -> relu head")
    c1 = head[0].weight.shape[0]
    if not 0 <= channel < c1:
        raise IndexError(f"channel {channel} out of range [0, {c1})")
    pruned = model.copy()
    conv, bn, _ = pruned.head_layers()
    conv.weight.data[channel] = 0
    if conv.bias is not None:
        conv.bias.data[channel] = 0
    bn.gamma.data[channel] = 0
    bn.beta.data[channel] = 0
    return pruned


def prune_top(model: Model, report: ChannelVarianceReport, k: int) -> Model:
    out = model
    for c in report.order[:k]:
        out = prune_channel(out, c)
    return out if k else model.copy()


@dataclass
class PruneReport:
    channel: object  # int, or list of ints when several were pruned
    clean_before: float
    clean_after: float
    fgsm_before: float
    fgsm_after: float
    pgd_before: float
    pgd_after: float
    eps: float = 0.0
    n_samples: int = 0

    @property
    def deltas(self) -> dict:
        return {
            "clean": self.clean_after - self.clean_before,
            "fgsm": self.fgsm_after - self.fgsm_before,
            "pgd": self.pgd_after - self.pgd_before,
        }

    def table_rows(self, label: str = "") -> list:
        """Two rows laid out like an accuracy-drop table: absolute %, then deltas in points."""
        prefix = f"{label}, " if label else ""
        d = self.deltas
        return [
            [f"{prefix}not pruned", *(f"{100 * v:.1f}%" for v in (self.clean_before, self.fgsm_before, self.pgd_before))],
            [f"{prefix}pruned", *(f"{100 * d[k]:+.1f}%" for k in ("clean", "fgsm", "pgd"))],
        ]

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "deltas": self.deltas}, indent=2)

    def write_csv(self, path, label: str = "") -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "clean", "fgsm", "pgd"])
            w.writerows(self.table_rows(label))
        return path


def accuracy_delta_report(
    model: Model,
    dataset: Dataset,
    channel,
    eps: float,
    pgd_spec: AttackSpec | None = None,
    batch_size: int = 256,
    seed: int = 0,
) -> PruneReport:
    """Clean / FGSM(alpha=eps) / PGD-10 accuracy before and after pruning ``channel``.

    ``channel`` may be a list to prune several channels. The input model is
    not modified.
    """
    channels = list(channel) if isinstance(channel, (list, tuple)) else [channel]
    fgsm_spec = AttackSpec.fgsm(eps)
    pgd_spec = pgd_spec or AttackSpec.pgd(eps, iters=10)
    pruned = model
    for c in channels:
        pruned = prune_channel(pruned, c)

    def measure(m):
        return (
            accuracy(m, dataset, None, batch_size),
            accuracy(m, dataset, fgsm_spec, batch_size),
            accuracy(m, dataset, pgd_spec, batch_size, seed=seed),
        )

    before = measure(model)
    after = measure(pruned)
    return PruneReport(
        channel=channels[0] if len(channels) == 1 else channels,
        clean_before=before[0],
        clean_after=after[0],
        fgsm_before=before[1],
        fgsm_after=after[1],
        pgd_before=before[2],
        pgd_after=after[2],
        eps=eps,
        n_samples=len(dataset),
    )


def prune_and_retrain(
    model: Model,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    k_channels: int = 1,
    extra_epochs: int = 5,
    variance_set: Dataset | None = None,
    run_dir=None,
) -> TrainResult:
    """Zero the top-``k`` variance channels of a (CO) model, then keep training.

    Variances come from FGSM examples (alpha = eps) of ``variance_set``
    (default: the first ``cfg.train_eval_size`` training samples). The zeroed
    parameters stay trainable. Training resumes from the model's saved epoch
    and RNG state and runs ``extra_epochs`` more epochs.
    """
    start = model
    if k_channels > 0:
        vs = variance_set if variance_set is not None else train_set.head(cfg.train_eval_size)
        report = channel_variance(model, vs, AttackSpec.fgsm(cfg.attack.eps))
        log.info("pruning channels %s (variances %s)", report.order[:k_channels],
                 [report.per_channel_var[c] for c in report.order[:k_channels]])
        start = prune_top(model, report, k_channels)
    else:
        start = model.copy()
    cont = replace(cfg, epochs=start.epoch + extra_epochs)
    return train(start, train_set, test_set, cont, run_dir=run_dir, resume=True)


# ---------------------------------------------------------------------------
# multi-step sweep


@dataclass
class SweepCell:
    iters: int
    alpha: float
    min_robust_acc: float = float("nan")
    co: Optional[bool] = None
    status: str = "ok"
    error: str = ""
    curve: list = field(default_factory=list)

    @property
    def key(self) -> str:
        return cell_key(self.iters, self.alpha)


def cell_key(iters: int, alpha: float) -> str:
    return f"iters{iters}_alpha{alpha * 255:.4f}"


def min_last_half(values) -> float:
    """Minimum over the last half of a per-epoch series (at least the final value)."""
    values = list(values)
    if not values:
        return float("nan")
    return min(values[len(values) // 2 :])


def sweep_cell_config(base_cfg: TrainConfig, iters: int, alpha: float, eps: float) -> TrainConfig:
    base = base_cfg.attack
    attack = AttackSpec("pgd", eps, alpha, iters, base.init, base.init_iters, base.init_alpha, base.clip_input)
    return replace(base_cfg, attack=attack, eval_attack=AttackSpec.pgd(eps, iters=10))


def run_sweep_cell(model_factory, train_set, test_set, base_cfg, iters, alpha, eps, run_dir=None) -> SweepCell:
    cfg = sweep_cell_config(base_cfg, iters, alpha, eps)
    result = train(model_factory(), train_set, test_set, cfg, run_dir=run_dir)
    curve = [m.test_pgd_acc for m in result.metrics]
    robust = min_last_half(curve)
    return SweepCell(iters, alpha, robust, bool(robust < CO_PGD_MAX), "ok", "", curve)


def _sweep_cell_safe(model_factory, train_set, test_set, base_cfg, iters, alpha, eps) -> SweepCell:
    try:
        return run_sweep_cell(model_factory, train_set, test_set, base_cfg, iters, alpha, eps)
    except Exception as exc:  # recorded per cell; the sweep continues
        log.exception("sweep cell %s failed", cell_key(iters, alpha))
        return SweepCell(iters, alpha, status="error", error=f"{type(exc).__name__}: {exc}")


def co_sweep(
    model_factory,
    train_set: Dataset,
    test_set: Dataset,
    base_cfg: TrainConfig,
    iters_list,
    alpha_list,
    eps: float,
    cache_dir=None,
    workers: int = 1,
) -> list:
    """PGD-AT for every (iters, alpha) pair; each cell reports the minimum test
    PGD-10 accuracy over the last half of training.

    ``model_factory()`` returns a fresh model per cell. With ``cache_dir`` each
    finished cell is stored as ``<key>.json`` and reused on the next call, so an
    interrupted sweep resumes. A failing cell is recorded with
    ``status="error"`` and the sweep moves on. ``workers > 1`` trains cells in
    separate processes (``model_factory`` must then be picklable); results are
    merged by cell key, so the grid is identical to a sequential run.
    """
    if not iters_list or not alpha_list:
        raise ValueError("iters_list and alpha_list must be non-empty")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    grid = [(i, a) for i in iters_list for a in alpha_list]
    done: dict = {}
    todo = []
    for iters, alpha in grid:
        cached = cache / f"{cell_key(iters, alpha)}.json" if cache is not None else None
        if cached is not None and cached.exists():
            done[cell_key(iters, alpha)] = SweepCell(**json.loads(cached.read_text()))
        else:
            todo.append((iters, alpha))

    def finish(cell: SweepCell) -> None:
        if cache is not None and cell.status == "ok":
            (cache / f"{cell.key}.json").write_text(json.dumps(asdict(cell)))
        done[cell.key] = cell

    args = (model_factory, train_set, test_set, base_cfg)
    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(todo))) as pool:
            futures = [pool.submit(_sweep_cell_safe, *args, i, a, eps) for i, a in todo]
            for fut in futures:
                finish(fut.result())
    else:
        for iters, alpha in todo:
            # looked up on the module so tests can substitute a cheap cell
            finish(_sweep_cell_safe(*args, iters, alpha, eps))
    return [done[cell_key(i, a)] for i, a in grid]


SWEEP_HEADER = ("iters", "alpha", "alpha_255", "min_robust_acc", "co", "status")


def write_sweep_csv(path, cells) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for c in cells:
            co = "" if c.co is None else int(c.co)
            w.writerow([c.iters, repr(c.alpha), f"{c.alpha * 255:.4f}", repr(c.min_robust_acc), co, c.status])
    return path


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    rho = spearmanr(a, b).correlation
    return float(rho) if not math.isnan(rho) else float("nan")
