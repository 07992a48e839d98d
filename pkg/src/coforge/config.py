"""Experiment documents (JSON or TOML) for the command-line harness.

A document names an experiment ``kind`` and embeds the model, training,
attack and dataset settings. Every section is checked against its schema
before any compute starts; all unknown keys are reported at once.
Budgets may be written as ``"16/255"`` strings.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional

from .attacks import AttackSpec
from .errors import ConfigError
from .nn import ModelConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

KINDS = ("standard", "fgsm_at", "pgd_at", "prune_retrain", "diagnose", "sweep")

DEFAULT_MODEL = {"arch": "SmallCNN", "widths": [16, 32, 64], "num_classes": 10, "input_shape": [3, 32, 32]}

_SECTIONS = {
    "data": {"dir": None, "synthetic": None, "train_size": None, "test_size": None},
    "synthetic": {"n_train": 2000, "n_test": 500, "snr": 5.0, "amplitude": 0.15, "seed": 0},
    "diagnose": {"eps": None, "prune_top": 1, "n_samples": 1000, "image_index": 0, "alphas": None, "pgd_iters": 10},
    "retrain": {"k_channels": 1, "extra_epochs": 5, "checkpoint_epoch": None},
    "sweep": {"iters": [1], "alphas": [], "eps": None},
}
_TOP = {"name", "kind", "seed", "model", "train", "data", "out", "diagnose", "retrain", "sweep", "notes"}
_PIXEL_KEYS = {"eps", "alpha", "init_alpha"}


def parse_pixels(value, where: str = "value") -> float:
    """``0.0627``, ``16`` (ints are not budgets: rejected), or ``"16/255"`` -> float."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number or 'a/b' string", keys=[where])
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{where}: cannot parse {value!r} as a pixel budget", keys=[where]) from exc
    raise ConfigError(f"{where}: expected a number or 'a/b' string, got {type(value).__name__}", keys=[where])


def _unknown(d: dict, allowed, prefix: str) -> list:
    return [f"{prefix}{k}" for k in d if k not in allowed]


def _attack(d, where: str) -> Optional[AttackSpec]:
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a table", keys=[where])
    d = {k: (parse_pixels(v, f"{where}.{k}") if k in _PIXEL_KEYS and v is not None else v) for k, v in d.items()}
    return AttackSpec.from_dict(d)


def _section(doc: dict, name: str) -> dict:
    raw = doc.get(name) or {}
    out = dict(_SECTIONS[name])
    out.update(raw)
    return out


@dataclass
class ExperimentConfig:
    name: str
    kind: str
    seed: int
    model: ModelConfig
    train: TrainConfig
    data: dict
    out: Optional[str] = None
    diagnose: dict = field(default_factory=lambda: dict(_SECTIONS["diagnose"]))
    retrain: dict = field(default_factory=lambda: dict(_SECTIONS["retrain"]))
    sweep: dict = field(default_factory=lambda: dict(_SECTIONS["sweep"]))
    notes: str = ""

    @property
    def eps(self) -> float:
        return self.train.attack.eps if self.train.attack.kind != "none" else self.train.eval_attack.eps

    def to_dict(self) -> dict:
        """Fully resolved document; loading it back gives an equal config."""
        return {
            "name": self.name,
            "kind": self.kind,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data,
            "out": self.out,
            "diagnose": self.diagnose,
            "retrain": self.retrain,
            "sweep": self.sweep,
            "notes": self.notes,
        }

    def with_overrides(self, seed: Optional[int] = None, data_dir=None, out=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), train=replace(cfg.train, seed=int(seed)))
        if data_dir is not None:
            cfg = replace(cfg, data={**cfg.data, "dir": str(data_dir), "synthetic": None})
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg


def from_dict(doc: dict) -> ExperimentConfig:
    """Validate a raw document. Raises ConfigError listing every offending key."""
    if not isinstance(doc, dict):
        raise ConfigError("experiment config must be a table/object")
    bad = _unknown(doc, _TOP, "")
    for name, allowed in _SECTIONS.items():
        if name in doc and name != "synthetic":
            sec = doc[name]
            if sec is not None and not isinstance(sec, dict):
                bad.append(name)
            elif sec:
                bad += _unknown(sec, allowed, f"{name}.")
    syn = (doc.get("data") or {}).get("synthetic")
    if isinstance(syn, dict):
        bad += _unknown(syn, _SECTIONS["synthetic"], "data.synthetic.")
    train_raw = dict(doc.get("train") or {})
    bad += _unknown(train_raw, TrainConfig.__dataclass_fields__, "train.")
    for key in ("attack", "eval_attack"):
        if isinstance(train_raw.get(key), dict):
            bad += _unknown(train_raw[key], AttackSpec.__dataclass_fields__, f"train.{key}.")
    model_raw = {**DEFAULT_MODEL, **(doc.get("model") or {})}
    bad += _unknown(model_raw, ModelConfig.__dataclass_fields__, "model.")
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(bad))}", keys=sorted(bad))

    kind = doc.get("kind", "fgsm_at")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}", keys=["kind"])
    seed = int(doc.get("seed", train_raw.get("seed", 0)))

    try:
        model = ModelConfig.from_dict(model_raw)
        train_raw["attack"] = _attack(train_raw.get("attack", {"kind": "fgsm", "eps": "8/255"}), "train.attack")
        train_raw["eval_attack"] = _attack(train_raw.get("eval_attack"), "train.eval_attack")
        train_raw["seed"] = seed
        if kind == "standard" and train_raw["attack"].kind != "none":
            train_raw["attack"] = replace(train_raw["attack"], kind="none")
        train = TrainConfig.from_dict(train_raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc

    data = _section(doc, "data")
    if isinstance(data.get("synthetic"), dict):
        data["synthetic"] = {**_SECTIONS["synthetic"], **data["synthetic"]}
    diagnose = _section(doc, "diagnose")
    if diagnose["eps"] is not None:
        diagnose["eps"] = parse_pixels(diagnose["eps"], "diagnose.eps")
    if diagnose["alphas"] is not None:
        diagnose["alphas"] = [parse_pixels(a, "diagnose.alphas") for a in diagnose["alphas"]]
    sweep = _section(doc, "sweep")
    sweep["alphas"] = [parse_pixels(a, "sweep.alphas") for a in sweep["alphas"]]
    sweep["iters"] = [int(i) for i in sweep["iters"]]
    if sweep["eps"] is not None:
        sweep["eps"] = parse_pixels(sweep["eps"], "sweep.eps")
    if kind == "sweep" and (not sweep["alphas"] or not sweep["iters"]):
        raise ConfigError("sweep needs non-empty sweep.iters and sweep.alphas", keys=["sweep.iters", "sweep.alphas"])
    return ExperimentConfig(
        name=str(doc.get("name", kind)),
        kind=kind,
        seed=seed,
        model=model,
        train=train,
        data=data,
        out=doc.get("out"),
        diagnose=diagnose,
        retrain=_section(doc, "retrain"),
        sweep=sweep,
        notes=str(doc.get("notes", "")),
    )


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("coforge.presets").iterdir() if p.name.endswith(".json"))


def load(source) -> ExperimentConfig:
    """Load a config from a ``.json`` / ``.toml`` path or a shipped preset name."""
    path = Path(source)
    if not path.exists():
        name = str(source)
        if name in preset_names():
            return from_dict(json.loads(resources.files("coforge.presets").joinpath(f"{name}.json").read_text()))
        raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(preset_names())})", keys=["--config"])
    text = path.read_text()
    try:
        doc = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    return from_dict(doc)
