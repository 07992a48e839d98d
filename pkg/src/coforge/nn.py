"""Layers, the SmallCNN / MiniResNet builders, first-layer feature extraction and checkpoints.

Reference architectures (desk-scale stand-ins for ResNet18 and WRN28-10):

* ``SmallCNN`` with widths ``[w1, ..., wk]``: for each stage ``s`` two
  ``conv3x3 -> bn -> relu`` blocks of width ``ws``; the first conv of every
  stage after the first has stride 2. Global average pool, linear head.
* ``MiniResNet`` with widths ``[16, 32, 64]``: stem ``conv3x3 -> bn -> relu``
  of width ``widths[0]``, then one stage per width of two basic residual
  blocks (stride 2 at the start of every stage after the first, 1x1
  conv + bn projection shortcut when the shape changes), pool, linear head.

Both start with ``conv -> bn -> relu``, which the diagnostics rely on.
Inputs are raw pixels in [0, 1]; per-channel normalization is a fixed first
transform inside the model so attack budgets stay in pixel units.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    ShapeError,
    UnsupportedVersionError,
)
from .tensor import Tensor, no_grad

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2471, 0.2435, 0.2616)

ARCHS = ("SmallCNN", "MiniResNet")


@dataclass
class ModelConfig:
    arch: str = "SmallCNN"
    widths: list = field(default_factory=lambda: [32, 64, 128])
    num_classes: int = 10
    input_shape: list = field(default_factory=lambda: [3, 32, 32])
    mean: Optional[list] = field(default_factory=lambda: list(CIFAR10_MEAN))
    std: Optional[list] = field(default_factory=lambda: list(CIFAR10_STD))

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.input_shape = [int(s) for s in self.input_shape]
        if self.arch not in ARCHS:
            raise ConfigError(f"unsupported arch {self.arch!r}; choose one of {ARCHS}", keys=["arch"])
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive ints", keys=["widths"])
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (C, H, W)", keys=["input_shape"])
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", keys=["num_classes"])
        if (self.mean is None) != (self.std is None):
            raise ConfigError("mean and std must be given together", keys=["mean", "std"])
        if self.mean is not None:
            c = self.input_shape[0]
            if len(self.mean) != c or len(self.std) != c:
                raise ConfigError("mean/std length must match input channels", keys=["mean", "std"])
            self.mean = [float(v) for v in self.mean]
            self.std = [float(v) for v in self.std]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}", keys=sorted(unknown))
        return cls(**d)


# ---------------------------------------------------------------------------
# layers


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Layer:
    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def running_stats(self) -> Iterator[tuple[str, ops.RunningStats]]:
        return iter(())

    def __call__(self, x: Tensor, model: "Model") -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name, cin, cout, kernel=3, stride=1, padding=1, bias=False, rng=None):
        rng = rng or np.random.default_rng(0)
        self.name, self.stride, self.padding = name, stride, padding
        self.weight = Tensor(_kaiming(rng, (cout, cin, kernel, kernel), cin * kernel * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None

    def parameters(self):
        yield f"{self.name}.weight", self.weight
        if self.bias is not None:
            yield f"{self.name}.bias", self.bias

    def __call__(self, x, model):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Layer):
    def __init__(self, name, channels):
        self.name = name
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.state = ops.RunningStats.fresh(channels)

    def parameters(self):
        yield f"{self.name}.gamma", self.gamma
        yield f"{self.name}.beta", self.beta

    def running_stats(self):
        yield self.name, self.state

    def __call__(self, x, model):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.state, mode=model.mode, update_stats=model.track_stats)


class ReLU(Layer):
    def __call__(self, x, model):
        return ops.relu(x)


class GlobalAvgPool(Layer):
    def __call__(self, x, model):
        return ops.global_avg_pool(x)


class Flatten(Layer):
    def __call__(self, x, model):
        return ops.flatten(x)


class Linear(Layer):
    def __init__(self, name, din, dout, rng=None, bias=True):
        rng = rng or np.random.default_rng(0)
        self.name = name
        bound = 1.0 / np.sqrt(din)
        self.weight = Tensor(rng.uniform(-bound, bound, (dout, din)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, dout).astype(np.float32), requires_grad=True) if bias else None

    def parameters(self):
        yield f"{self.name}.weight", self.weight
        if self.bias is not None:
            yield f"{self.name}.bias", self.bias

    def __call__(self, x, model):
        return ops.linear(x, self.weight, self.bias)


class BasicBlock(Layer):
    """conv-bn-relu-conv-bn plus shortcut, then relu."""

    def __init__(self, name, cin, cout, stride, rng):
        self.conv1 = Conv2d(f"{name}.conv1", cin, cout, 3, stride, 1, rng=rng)
        self.bn1 = BatchNorm2d(f"{name}.bn1", cout)
        self.conv2 = Conv2d(f"{name}.conv2", cout, cout, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm2d(f"{name}.bn2", cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = (
                Conv2d(f"{name}.short.conv", cin, cout, 1, stride, 0, rng=rng),
                BatchNorm2d(f"{name}.short.bn", cout),
            )

    def _children(self):
        yield from (self.conv1, self.bn1, self.conv2, self.bn2)
        if self.shortcut:
            yield from self.shortcut

    def parameters(self):
        for child in self._children():
            yield from child.parameters()

    def running_stats(self):
        for child in self._children():
            yield from child.running_stats()

    def __call__(self, x, model):
        out = ops.relu(self.bn1(self.conv1(x, model), model))
        out = self.bn2(self.conv2(out, model), model)
        short = x if self.shortcut is None else self.shortcut[1](self.shortcut[0](x, model), model)
        return ops.relu(ops.add(out, short))


# ---------------------------------------------------------------------------
# model


class Model:
    """Ordered layer stack with named parameters and a train/eval mode.

    ``track_stats`` controls whether train-mode batchnorm updates its running
    statistics; attacks switch it off. ``epoch`` and ``rng_state`` travel with
    checkpoints so training can resume.
    """

    def __init__(self, layers, config: ModelConfig | None = None, normalize: bool = True):
        self.layers = list(layers)
        self.config = config
        self.mode = "train"
        self.track_stats = True
        self.epoch = 0
        self.rng_state = (0, 0, 0, 0)
        self._shift = self._scale = None
        if normalize and config is not None and config.mean is not None:
            self._shift = np.asarray(config.mean, np.float32)
            self._scale = (1.0 / np.asarray(config.std, np.float64)).astype(np.float32)
        names = [n for n, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in model")

    # -- parameter access
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers:
            yield from layer.parameters()

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    @property
    def bn_states(self) -> dict[str, ops.RunningStats]:
        return {n: s for layer in self.layers for n, s in layer.running_stats()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array by name: parameters then running stats."""
        out = {name: t.data for name, t in self.named_parameters()}
        for name, st in self.bn_states.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- modes
    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    @contextlib.contextmanager
    def mode_as(self, mode: str):
        prev = self.mode
        self.mode = mode
        try:
            yield self
        finally:
            self.mode = prev

    @contextlib.contextmanager
    def frozen_stats(self):
        """Train-mode batchnorm uses batch statistics without updating running ones."""
        prev = self.track_stats
        self.track_stats = False
        try:
            yield self
        finally:
            self.track_stats = prev

    @contextlib.contextmanager
    def attack_context(self):
        """Parameters stop requiring grad and running stats are frozen."""
        params = [t for _, t in self.named_parameters()]
        flags = [t.requires_grad for t in params]
        for t in params:
            t.requires_grad = False
        try:
            with self.frozen_stats():
                yield self
        finally:
            for t, f in zip(params, flags):
                t.requires_grad = f

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # -- forward
    def __call__(self, batch) -> Tensor:
        return forward(self, batch)

    def head_layers(self):
        """First (conv, bn, relu) triple, or None when the model lacks one."""
        if len(self.layers) >= 3:
            conv, bn, act = self.layers[:3]
            if isinstance(conv, Conv2d) and isinstance(bn, BatchNorm2d) and isinstance(act, ReLU):
                return conv, bn, act
        return None


def _normalize(model: Model, x: Tensor) -> Tensor:
    if model._shift is None:
        return x
    return ops.channel_affine(x, model._shift, model._scale)


def forward(model: Model, batch) -> Tensor:
    """Logits for a batch of raw [0, 1] images; differentiable w.r.t. ``batch`` if it requires grad."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    if cfg is not None and (x.ndim != 4 or list(x.shape[1:]) != cfg.input_shape):
        axis = 1 if x.ndim == 4 and x.shape[1] != cfg.input_shape[0] else None
        raise ShapeError(f"model expects (N, {', '.join(map(str, cfg.input_shape))}) input, got {x.shape}", axis=axis)
    x = _normalize(model, x)
    for layer in model.layers:
        x = layer(x, model)
    return x


def first_layer_features(model: Model, batch) -> np.ndarray:
    """relu(bn(conv(normalize(batch)))) with running statistics, no gradient tracking."""
    head = model.head_layers()
    if head is None:
        raise ValueError("model does not start with a conv -> bn -> relu block")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    with no_grad(), model.mode_as("eval"):
        h = _normalize(model, x.detach())
        for layer in head:
            h = layer(h, model)
    return h.data


# ---------------------------------------------------------------------------
# builders


def small_cnn(config: ModelConfig, rng: np.random.Generator) -> list[Layer]:
    layers: list[Layer] = []
    cin = config.input_shape[0]
    for s, width in enumerate(config.widths):
        for b in range(2):
            stride = 2 if (s > 0 and b == 0) else 1
            name = f"stage{s}.{b}"
            layers += [Conv2d(f"{name}.conv", cin, width, 3, stride, 1, rng=rng), BatchNorm2d(f"{name}.bn", width), ReLU()]
            cin = width
    layers += [GlobalAvgPool(), Linear("head", cin, config.num_classes, rng=rng)]
    return layers


def mini_resnet(config: ModelConfig, rng: np.random.Generator) -> list[Layer]:
    w0 = config.widths[0]
    layers: list[Layer] = [
        Conv2d("stem.conv", config.input_shape[0], w0, 3, 1, 1, rng=rng),
        BatchNorm2d("stem.bn", w0),
        ReLU(),
    ]
    cin = w0
    for s, width in enumerate(config.widths):
        for b in range(2):
            stride = 2 if (s > 0 and b == 0) else 1
            layers.append(BasicBlock(f"stage{s}.block{b}", cin, width, stride, rng))
            cin = width
    layers += [GlobalAvgPool(), Linear("head", cin, config.num_classes, rng=rng)]
    return layers


_BUILDERS = {"SmallCNN": small_cnn, "MiniResNet": mini_resnet}


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Fresh model with Kaiming fan-in init (conv), uniform fan-in init (linear), gamma=1, beta=0."""
    if config.arch not in _BUILDERS:
        raise ConfigError(f"unsupported arch {config.arch!r}")
    rng = np.random.default_rng(seed)
    return Model(_BUILDERS[config.arch](config, rng), config)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"COFG"
VERSION = 1
_TRAILER = 8 + 4 * 8


def rng_state_words(rng: np.random.Generator) -> tuple[int, int, int, int]:
    """PCG64 state as four u64 words: state hi/lo, increment hi/lo."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return (s >> 64) & mask, s & mask, (inc >> 64) & mask, inc & mask


def rng_from_words(words) -> np.random.Generator:
    s_hi, s_lo, i_hi, i_lo = (int(w) for w in words)
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": (s_hi << 64) | s_lo, "inc": (i_hi << 64) | i_lo},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)


def checkpoint_bytes(model: Model) -> bytes:
    if model.config is None:
        raise ValueError("only models built from a ModelConfig can be checkpointed")
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    for name, arr in model.state_arrays().items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", model.epoch))
    parts.append(struct.pack("<4Q", *model.rng_state))
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CorruptCheckpointError(f"checkpoint truncated at byte {pos} (needed {n} more)")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    buf = Path(path).read_bytes()
    magic, pos = _take(buf, 0, 4)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}; not a coforge checkpoint")
    head, pos = _take(buf, pos, 8)
    version, cfg_len = struct.unpack("<II", head)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    raw_cfg, pos = _take(buf, pos, cfg_len)
    try:
        config = ModelConfig.from_dict(json.loads(raw_cfg))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable model config: {exc}") from exc
    model = build_model(config, seed=0)
    expected = model.state_arrays()
    seen = set()
    while len(buf) - pos > _TRAILER:
        nlen_b, pos = _take(buf, pos, 2)
        (nlen,) = struct.unpack("<H", nlen_b)
        raw_name, pos = _take(buf, pos, nlen)
        try:
            name = raw_name.decode()
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("tensor name is not UTF-8") from exc
        ndim_b, pos = _take(buf, pos, 1)
        ndim = ndim_b[0]
        dims_b, pos = _take(buf, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", dims_b)
        count = int(np.prod(shape, dtype=np.int64))
        payload, pos = _take(buf, pos, 4 * count)
        if name not in expected or expected[name].shape != tuple(shape):
            raise CorruptCheckpointError(f"unexpected tensor record {name!r} with shape {shape}")
        expected[name][...] = np.frombuffer(payload, dtype="<f4").reshape(shape)
        seen.add(name)
    if len(buf) - pos != _TRAILER:
        raise CorruptCheckpointError("checkpoint truncated inside trailer")
    missing = set(expected) - seen
    if missing:
        raise CorruptCheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    (model.epoch,) = struct.unpack("<Q", buf[pos : pos + 8])
    model.rng_state = struct.unpack("<4Q", buf[pos + 8 : pos + _TRAILER])
    return model
