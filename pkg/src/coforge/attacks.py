"""FGSM / PGD adversarial examples, perturbation initializers and self-fitting probes.

All budgets are in raw pixel units (``8/255`` etc.) because models normalize
internally. Attacks never touch parameters or batchnorm running statistics:
they run under :meth:`Model.attack_context`, keeping whatever train/eval mode
the caller set.
"""

from __future__ import annotations

import contextlib
import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

KINDS = ("none", "fgsm", "pgd")
INITS = ("zero", "uniform", "pgd")


@dataclass(frozen=True)
class AttackSpec:
    """Attack family and budget.

    ``init='pgd'`` runs ``init_iters`` PGD steps of size ``init_alpha``
    (default ``eps / 4``) to find the starting perturbation.
    """

    kind: str = "fgsm"
    eps: float = 8 / 255
    alpha: Optional[float] = None
    iters: int = 1
    init: str = "zero"
    init_iters: int = 7
    init_alpha: Optional[float] = None
    clip_input: bool = True
    restarts: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"attack kind must be one of {KINDS}, got {self.kind!r}", keys=["kind"])
        if self.init not in INITS:
            raise ConfigError(f"attack init must be one of {INITS}, got {self.init!r}", keys=["init"])
        if self.eps < 0:
            raise ConfigError("eps must be >= 0", keys=["eps"])
        if self.alpha is None:
            default = self.eps if self.kind != "pgd" else 2 * self.eps / max(self.iters, 1)
            object.__setattr__(self, "alpha", float(default))
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0", keys=["alpha"])
        if self.iters < 1:
            raise ConfigError("iters must be >= 1", keys=["iters"])
        if self.kind == "fgsm" and self.iters != 1:
            raise ConfigError("FGSM takes exactly one iteration", keys=["iters"])
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1", keys=["restarts"])
        if self.init_alpha is None:
            object.__setattr__(self, "init_alpha", float(self.eps / 4))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown attack keys: {sorted(unknown)}", keys=sorted(unknown))
        return cls(**d)

    @classmethod
    def fgsm(cls, eps: float, alpha: float | None = None, init: str = "zero", **kw) -> "AttackSpec":
        return cls("fgsm", eps, eps if alpha is None else alpha, 1, init, **kw)

    @classmethod
    def pgd(cls, eps: float, iters: int = 10, alpha: float | None = None, init: str = "uniform", **kw) -> "AttackSpec":
        return cls("pgd", eps, 2 * eps / iters if alpha is None else alpha, iters, init, **kw)


def _attack_scope(model):
    ctx = getattr(model, "attack_context", None)
    return ctx() if ctx is not None else contextlib.nullcontext()


def input_gradient(model, x: np.ndarray, y, loss_fn: Callable | None = None) -> np.ndarray:
    """Gradient of the batch loss w.r.t. the input pixels (parameters untouched)."""
    loss_fn = loss_fn or ops.cross_entropy
    with _attack_scope(model), Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        loss = loss_fn(model(xt), y)
        tape.backward(loss)
    return xt.grad


def _check_batch(x: np.ndarray, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim < 2:
        raise ShapeError(f"expected a batch of inputs, got shape {x.shape}")
    if np.shape(y) != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} inputs but labels have shape {np.shape(y)}", axis=0)
    return x


def fgsm(
    model,
    x: np.ndarray,
    y,
    alpha: float,
    init_delta: np.ndarray | None = None,
    clip: bool = True,
    eps: float | None = None,
    loss_fn: Callable | None = None,
) -> np.ndarray:
    """Single signed-gradient step ``x + delta0 + alpha * sign(grad_x loss(x + delta0, y))``.

    Args:
        model: callable mapping an input Tensor to logits.
        x: clean batch in [0, 1].
        y: integer labels.
        alpha: step size in pixel units.
        init_delta: starting perturbation (zero when omitted).
        clip: clamp the start point and the result to [0, 1].
        eps: if given, project the final perturbation onto the eps-ball.
        loss_fn: ``(logits, y) -> scalar Tensor``; cross-entropy by default.
    """
    x = _check_batch(x, y)
    start = x if init_delta is None else x + np.asarray(init_delta, dtype=np.float32)
    if clip and init_delta is not None:
        start = np.clip(start, 0, 1)
    grad = input_gradient(model, start, y, loss_fn)
    x_adv = start + np.float32(alpha) * np.sign(grad)
    if eps is not None:
        e = np.float32(eps)
        x_adv = np.clip(x_adv, x - e, x + e)
    if clip:
        x_adv = np.clip(x_adv, 0, 1)
    return x_adv.astype(np.float32, copy=False)


def pgd(model, x: np.ndarray, y, spec: AttackSpec, rng: np.random.Generator | None = None, loss_fn=None) -> np.ndarray:
    """Iterated signed-gradient steps, each followed by projection onto the eps-ball
    (and onto [0, 1] when ``spec.clip_input``).

    With ``spec.restarts > 1`` the restart with the highest per-sample loss is kept.
    """
    x = _check_batch(x, y)
    if spec.iters * spec.alpha < spec.eps:
        warnings.warn(
            f"under-powered PGD: iters*alpha={spec.iters * spec.alpha:.4g} < eps={spec.eps:.4g}", stacklevel=2
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    best, best_loss = None, None
    for _ in range(spec.restarts):
        x_adv = _pgd_once(model, x, y, spec, rng, loss_fn)
        if spec.restarts == 1:
            return x_adv
        with _attack_scope(model):
            losses = ops.per_sample_cross_entropy(model(Tensor(x_adv)).data, y)
        if best is None:
            best, best_loss = x_adv, losses
        else:
            better = losses > best_loss
            best = np.where(better[:, None, None, None], x_adv, best)
            best_loss = np.where(better, losses, best_loss)
    return best


def _pgd_once(model, x, y, spec: AttackSpec, rng, loss_fn) -> np.ndarray:
    e = np.float32(spec.eps)
    a = np.float32(spec.alpha)
    lo, hi = x - e, x + e
    delta0 = init_perturbation(spec.init, spec.eps, x.shape, rng, model, x, y, spec.init_iters, spec.init_alpha, spec.clip_input)
    x_adv = x + delta0
    if spec.clip_input:
        x_adv = np.clip(x_adv, 0, 1)
    for _ in range(spec.iters):
        grad = input_gradient(model, x_adv, y, loss_fn)
        x_adv = np.clip(x_adv + a * np.sign(grad), lo, hi)
        if spec.clip_input:
            x_adv = np.clip(x_adv, 0, 1)
    return x_adv.astype(np.float32, copy=False)


def init_perturbation(
    kind: str,
    eps: float,
    shape,
    rng: np.random.Generator | None = None,
    model=None,
    x: np.ndarray | None = None,
    y=None,
    k: int = 7,
    alpha: float | None = None,
    clip: bool = True,
) -> np.ndarray:
    """Starting perturbation for an attack.

    ``zero`` gives zeros, ``uniform`` draws U(-eps, eps) per element, and ``pgd``
    runs a ``k``-step PGD (uniform start, step ``alpha`` defaulting to eps/4)
    and returns its perturbation, which stays inside the eps-ball.
    """
    e = np.float32(eps)
    if kind == "zero":
        return np.zeros(shape, dtype=np.float32)
    if kind == "uniform":
        if rng is None:
            raise ValueError("uniform init needs an rng")
        return np.clip(rng.uniform(-eps, eps, size=shape).astype(np.float32), -e, e)
    if kind == "pgd":
        if model is None or x is None or y is None:
            raise ValueError("pgd init needs model, x and y")
        spec = AttackSpec("pgd", eps, eps / 4 if alpha is None else alpha, k, "uniform", clip_input=clip)
        x = np.asarray(x, dtype=np.float32)
        return np.clip(_pgd_once(model, x, y, spec, rng, None) - x, -e, e)
    raise ValueError(f"unknown init kind {kind!r}")


def random_label_fgsm(model, x: np.ndarray, num_classes: int, alpha: float, rng, clip: bool = True):
    """FGSM examples built against uniformly random labels (true label allowed).

    Returns ``(x_adv, y_random)``; a model whose predictions on ``x_adv`` match
    ``y_random`` well above chance is reading the label back out of the
    perturbation it produced.
    """
    x = np.asarray(x, dtype=np.float32)
    y_random = np.asarray(rng.integers(0, num_classes, size=x.shape[0]), dtype=np.int64)
    return fgsm(model, x, y_random, alpha, None, clip), y_random


def step_size_sweep(model, x: np.ndarray, target_class: int, alphas, clip: bool = True, full: bool = False):
    """Probability of ``target_class`` on ``x + alpha * sign(grad_x loss(x, target))`` per alpha.

    ``x`` is a single (C, H, W) image. With ``full=True`` each record carries the
    whole softmax row instead of the target probability.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeError(f"step_size_sweep takes one (C, H, W) image, got {x.shape}")
    alphas = [float(a) for a in alphas]
    if any(a < 0 for a in alphas) or any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be non-negative and ascending")
    batch = x[None]
    with _attack_scope(model):
        num_classes = model(Tensor(batch)).shape[1]
    if not 0 <= target_class < num_classes:
        raise ValueError(f"target class {target_class} outside [0, {num_classes})")
    y = np.array([target_class])
    direction = np.sign(input_gradient(model, batch, y))
    stack = np.stack([batch[0] + np.float32(a) * direction[0] for a in alphas])
    if clip:
        stack = np.clip(stack, 0, 1)
    with _attack_scope(model):
        probs = ops.softmax(model(Tensor(stack)).data.astype(np.float64))
    if full:
        return [(a, p) for a, p in zip(alphas, probs)]
    return [(a, float(p[target_class])) for a, p in zip(alphas, probs)]
