"""FGSM-AT / PGD-AT training loops, SGD, LR schedule, augmentation and GradAlign.

One epoch: shuffle, (augment), craft adversarial examples against the current
parameters with train-mode batchnorm but frozen running statistics, take an
SGD step on the cross-entropy of those examples (+ GradAlign), then evaluate
the per-epoch metrics in eval mode and emit a CSV row and a checkpoint.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .attacks import AttackSpec, fgsm, init_perturbation, pgd, random_label_fgsm
from .data import Dataset
from .errors import ConfigError, NonFiniteError, ShapeError
from .nn import Model, rng_from_words, rng_state_words, save_checkpoint
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch",
    "lr",
    "train_loss",
    "train_fgsm_acc",
    "rl_fgsm_acc",
    "test_clean_acc",
    "test_pgd_acc",
    "wall_time_s",
)

# CO(epoch) := test PGD accuracy collapsed while train FGSM accuracy soars
CO_PGD_MAX = 0.05
CO_FGSM_MIN = 0.85


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_epochs: tuple = (80, 90)
    lr_decay_factor: float = 0.1
    attack: AttackSpec = field(default_factory=lambda: AttackSpec.fgsm(8 / 255))
    grad_align_lambda: float = 0.0
    seed: int = 0
    augment: bool = True
    eval_attack: Optional[AttackSpec] = None
    subset_size: Optional[int] = None
    train_eval_size: Optional[int] = 1000
    test_eval_size: Optional[int] = 1000
    eval_batch_size: int = 256

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if isinstance(self.attack, dict):
            self.attack = AttackSpec.from_dict(self.attack)
        if isinstance(self.eval_attack, dict):
            self.eval_attack = AttackSpec.from_dict(self.eval_attack)
        if self.eval_attack is None:
            self.eval_attack = AttackSpec.pgd(self.attack.eps, iters=10)
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", keys=["lr"])
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", keys=["momentum"])
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing", keys=["lr_decay_epochs"])
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1", keys=["epochs", "batch_size"])
        if self.grad_align_lambda < 0:
            raise ConfigError("grad_align_lambda must be >= 0", keys=["grad_align_lambda"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}", keys=sorted(unknown))
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_fgsm_acc: float
    rl_fgsm_acc: float
    test_clean_acc: float
    test_pgd_acc: float
    wall_time_s: float

    def row(self) -> list:
        return [getattr(self, k) for k in METRICS_HEADER]

    def replay_key(self) -> tuple:
        """Everything except wall-clock time, for reproducibility checks."""
        return tuple(getattr(self, k) for k in METRICS_HEADER if k != "wall_time_s")

    @property
    def co(self) -> bool:
        return is_co(self)


def is_co(m: EpochMetrics) -> bool:
    return m.test_pgd_acc < CO_PGD_MAX and m.train_fgsm_acc > CO_FGSM_MIN


def first_co_epoch(metrics) -> Optional[int]:
    for m in metrics:
        if is_co(m):
            return m.epoch
    return None


# ---------------------------------------------------------------------------
# optimizer and schedule


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float, weight_decay: float = 0.0) -> None:
    """Classical momentum SGD, in place: ``v = m*v + (g + wd*p); p -= lr*v``.

    ``params`` maps names to Tensors (or arrays); ``grads`` to arrays (missing
    or None entries are treated as zero); ``velocity`` is updated in place.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    lr = np.float32(lr)
    mom = np.float32(momentum)
    wd = np.float32(weight_decay)
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        step = np.zeros_like(data) if g is None else np.asarray(g, dtype=data.dtype)
        if weight_decay:
            step = step + wd * data
        if name in velocity:
            v = velocity[name]
            v *= mom
            v += step
        else:
            v = velocity[name] = step.copy()
        data -= lr * v


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr * factor ** (#decay epochs <= epoch)``; epochs are 0-based."""
    drops = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return float(cfg.lr * cfg.lr_decay_factor**drops)


# ---------------------------------------------------------------------------
# augmentation


def crop_and_flip(image: np.ndarray, dy: int, dx: int, flip: bool, pad: int = 4) -> np.ndarray:
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, dy : dy + h, dx : dx + w]
    return np.ascontiguousarray(out[:, :, ::-1] if flip else out)


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by 4, take a uniform random 32x32 crop, flip horizontally with p=0.5."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != (32, 32):
        raise ShapeError(f"augment expects a (C, 32, 32) image, got {image.shape}", axis=None)
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    flip = bool(rng.random() < 0.5)
    return crop_and_flip(image, dy, dx, flip, pad)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    return np.stack([augment(img, rng, pad) for img in images])


# ---------------------------------------------------------------------------
# GradAlign


def _flat_rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1).astype(np.float64)


def grad_align_penalty(
    model: Model,
    x: np.ndarray,
    y,
    eps: float,
    rng: np.random.Generator | None = None,
    delta0: np.ndarray | None = None,
    fd_step: float = 1e-3,
) -> Tensor:
    """``1 - cos(g1, g2)`` averaged over samples, as a differentiable scalar Tensor.

    ``g1 = grad_x loss(x, y)`` is a constant reference; ``g2 = grad_x loss(x + delta0, y)``
    with ``delta0 ~ U(-eps, eps)``. Differentiating g2 w.r.t. the parameters would
    need second derivatives, so the returned tensor is the first-order surrogate

        [loss(x + delta0 + h v) - loss(x + delta0 - h v)] / (2h)  +  const

    where ``v = d penalty / d g2`` is held fixed. Its parameter gradient is the
    central-difference estimate of ``d penalty / d params`` and the constant makes
    its value equal to the penalty. ``h`` scales so that ``max|h v| = fd_step``.
    Samples whose gradients vanish are skipped; if all vanish the penalty is 0.
    """
    from .attacks import input_gradient

    x = np.asarray(x, dtype=np.float32)
    if delta0 is None:
        delta0 = init_perturbation("uniform", eps, x.shape, rng) if eps > 0 else np.zeros_like(x)
    x2 = x + np.asarray(delta0, dtype=np.float32)

    with model.frozen_stats():
        g1 = _flat_rows(input_gradient(model, x, y))
        g2 = _flat_rows(input_gradient(model, x2, y))
    n1 = np.linalg.norm(g1, axis=1)
    n2 = np.linalg.norm(g2, axis=1)
    keep = (n1 > 0) & (n2 > 0)
    if not keep.any():
        log.warning("grad_align_penalty: all input gradients vanished; penalty set to 0")
        return Tensor(np.float32(0.0))
    m = int(keep.sum())
    cos = np.zeros(len(x))
    cos[keep] = (g1[keep] * g2[keep]).sum(1) / (n1[keep] * n2[keep])
    value = 1.0 - cos[keep].mean()

    # d(1 - mean cos)/d g2 for the kept rows
    v = np.zeros_like(g2)
    u1 = g1[keep] / n1[keep, None]
    u2 = g2[keep] / n2[keep, None]
    v[keep] = -(u1 - cos[keep, None] * u2) / n2[keep, None] / m
    vmax = np.abs(v).max()
    if vmax == 0 or not np.isfinite(vmax):
        return Tensor(np.float32(value))
    h = fd_step / vmax
    hv = (h * v).reshape(x.shape).astype(np.float32)

    with model.frozen_stats():
        plus = ops.cross_entropy(model(Tensor(x2 + hv)), y)
        minus = ops.cross_entropy(model(Tensor(x2 - hv)), y)
    surrogate = ops.scale(plus - minus, 1.0 / (2.0 * h))
    return surrogate + np.float32(value - float(surrogate.data))


# ---------------------------------------------------------------------------
# evaluation


def _predict(model: Model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return model(Tensor(images)).data.argmax(axis=1)


def accuracy(model: Model, dataset: Dataset, attack: AttackSpec | None = None, batch_size: int = 256, seed: int = 0) -> float:
    """Eval-mode accuracy on clean (attack None / kind none), FGSM or PGD examples."""
    if len(dataset) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    correct = 0
    with model.mode_as("eval"):
        for xb, yb in dataset.batches(batch_size):
            xa = attack_batch(model, xb, yb, attack, rng)
            correct += int((_predict(model, xa) == yb).sum())
    return correct / len(dataset)


def attack_batch(model, xb, yb, attack: AttackSpec | None, rng, project: bool = False) -> np.ndarray:
    """Adversarial version of a batch per ``attack``."""
    if attack is None or attack.kind == "none":
        return xb
    if attack.kind == "fgsm":
        delta0 = None
        if attack.init != "zero":
            delta0 = init_perturbation(
                attack.init, attack.eps, xb.shape, rng, model, xb, yb, attack.init_iters, attack.init_alpha, attack.clip_input
            )
        return fgsm(model, xb, yb, attack.alpha, delta0, attack.clip_input, eps=attack.eps if project else None)
    return pgd(model, xb, yb, attack, rng)


def rl_fgsm_accuracy(model: Model, dataset: Dataset, alpha: float, seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy against random labels of FGSM examples crafted with those random labels."""
    if len(dataset) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    hits = 0
    with model.mode_as("eval"):
        for xb, _ in dataset.batches(batch_size):
            xa, yr = random_label_fgsm(model, xb, dataset.num_classes, alpha, rng)
            hits += int((_predict(model, xa) == yr).sum())
    return hits / len(dataset)


def evaluate_epoch(model: Model, train_set: Dataset, test_set: Dataset, cfg: TrainConfig, epoch: int) -> dict:
    eps = cfg.attack.eps if cfg.attack.kind != "none" else cfg.eval_attack.eps
    fgsm_spec = AttackSpec.fgsm(eps)
    train_eval = train_set.head(cfg.train_eval_size)
    test_eval = test_set.head(cfg.test_eval_size)
    bs = cfg.eval_batch_size
    return {
        "train_fgsm_acc": accuracy(model, train_eval, fgsm_spec, bs),
        "rl_fgsm_acc": rl_fgsm_accuracy(model, train_eval, eps, seed=_derived_seed(cfg.seed, epoch, 1), batch_size=bs),
        "test_clean_acc": accuracy(model, test_eval, None, bs),
        "test_pgd_acc": accuracy(model, test_eval, cfg.eval_attack, bs, seed=_derived_seed(cfg.seed, epoch, 2)),
    }


def _derived_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    metrics: list
    checkpoints: list = field(default_factory=list)

    @property
    def co_epoch(self) -> Optional[int]:
        return first_co_epoch(self.metrics)


def write_metrics_csv(path, metrics) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())
    return path


def read_metrics_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [
            EpochMetrics(int(r["epoch"]), *(float(r[k]) for k in METRICS_HEADER[1:]))
            for r in reader
        ]


def train_step(model: Model, xb: np.ndarray, yb: np.ndarray, cfg: TrainConfig, rng, velocity: dict, lr: float) -> float:
    """One optimization step on adversarial examples of (xb, yb); returns the batch loss."""
    model.train()
    x_adv = attack_batch(model, xb, yb, cfg.attack, rng, project=True)
    model.zero_grad()
    with Tape() as tape:
        loss = ops.cross_entropy(model(Tensor(x_adv)), yb)
        ce = float(loss.data)
        if cfg.grad_align_lambda > 0:
            reg = grad_align_penalty(model, xb, yb, cfg.attack.eps, rng)
            loss = loss + ops.scale(reg, cfg.grad_align_lambda)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"non-finite loss {float(loss.data)}")
        tape.backward(loss)
    params = model.params
    sgd_step(params, {k: t.grad for k, t in params.items()}, velocity, lr, cfg.momentum, cfg.weight_decay)
    return ce


def train(
    model: Model,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    run_dir=None,
    resume: bool = False,
    callback: Callable | None = None,
) -> TrainResult:
    """Adversarially train ``model`` in place for epochs ``model.epoch .. cfg.epochs - 1``.

    With ``resume`` the training RNG continues from ``model.rng_state`` (as saved
    in a checkpoint); otherwise training starts at epoch 0 from ``cfg.seed``.
    When ``run_dir`` is set, ``metrics.csv`` is rewritten after every epoch and a
    checkpoint lands in ``run_dir/checkpoints/epoch_XXX.cofg``. ``callback`` is
    called with ``(metrics, model)`` after each epoch.
    """
    if cfg.subset_size is not None and cfg.subset_size < len(train_set):
        from .data import subset

        train_set = subset(train_set, cfg.subset_size, cfg.seed)
    if resume:
        rng = rng_from_words(model.rng_state)
        start = model.epoch
    else:
        rng = np.random.default_rng(cfg.seed)
        start = 0
        model.epoch = 0
    velocity: dict = {}
    history: list = []
    ckpts: list = []
    run_dir = Path(run_dir) if run_dir is not None else None

    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_set))
        losses = []
        for b, (xb, yb) in enumerate(train_set.batches(cfg.batch_size, order)):
            if cfg.augment:
                xb = augment_batch(xb, rng)
            try:
                losses.append(train_step(model, xb, yb, cfg, rng, velocity, lr))
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} batch {b}: {exc}", batch_index=b) from exc
        model.eval()
        ev = evaluate_epoch(model, train_set, test_set, cfg, epoch)
        model.train()
        m = EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            wall_time_s=round(time.perf_counter() - t0, 3),
            **ev,
        )
        history.append(m)
        model.epoch = epoch + 1
        model.rng_state = rng_state_words(rng)
        log.info(
            "epoch %d lr %.4g loss %.4f train-fgsm %.3f rl-fgsm %.3f clean %.3f pgd %.3f",
            epoch, lr, m.train_loss, m.train_fgsm_acc, m.rl_fgsm_acc, m.test_clean_acc, m.test_pgd_acc,
        )
        if run_dir is not None:
            write_metrics_csv(run_dir / "metrics.csv", history)
            ckpts.append(save_checkpoint(model, run_dir / "checkpoints" / f"epoch_{epoch:03d}.cofg"))
        if callback is not None:
            callback(m, model)
    return TrainResult(model, history, ckpts)
