import json

import pytest

from coforge import config
from coforge.errors import ConfigError


def base_doc(**over):
    doc = {
        "name": "t",
        "kind": "fgsm_at",
        "seed": 3,
        "model": {"widths": [4, 8], "input_shape": [3, 16, 16]},
        "train": {"epochs": 2, "attack": {"kind": "fgsm", "eps": "8/255"}},
        "data": {"synthetic": {"n_train": 100, "n_test": 50}},
    }
    doc.update(over)
    return doc


def test_fraction_budgets():
    cfg = config.from_dict(base_doc())
    assert cfg.train.attack.eps == 8 / 255
    assert cfg.train.attack.alpha == 8 / 255
    assert config.parse_pixels("16 / 255") == 16 / 255
    assert config.parse_pixels(0.5) == 0.5
    for bad in ("eight", "1/0", True, [1]):
        with pytest.raises(ConfigError):
            config.parse_pixels(bad)


def test_unknown_keys_collected_at_every_level():
    doc = base_doc(extra=1)
    doc["train"]["optimiser"] = "adam"
    doc["train"]["attack"]["budget"] = 3
    doc["model"]["depth"] = 18
    doc["data"]["synthetic"]["noise"] = 1.0
    doc["sweep"] = {"grid": []}
    with pytest.raises(ConfigError) as err:
        config.from_dict(doc)
    assert err.value.keys == sorted([
        "extra", "train.optimiser", "train.attack.budget", "model.depth", "data.synthetic.noise", "sweep.grid",
    ])


def test_bad_kind_and_values():
    with pytest.raises(ConfigError):
        config.from_dict(base_doc(kind="finetune"))
    doc = base_doc()
    doc["train"]["lr"] = -1
    with pytest.raises(ConfigError):
        config.from_dict(doc)
    with pytest.raises(ConfigError):
        config.from_dict(base_doc(kind="sweep"))  # empty grid


def test_standard_kind_disables_training_attack():
    cfg = config.from_dict(base_doc(kind="standard"))
    assert cfg.train.attack.kind == "none"
    assert cfg.eps == 8 / 255  # the evaluation attack keeps the budget


def test_resolved_round_trip():
    cfg = config.from_dict(base_doc())
    again = config.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_seed_override_reaches_training():
    cfg = config.from_dict(base_doc()).with_overrides(seed=11, data_dir="/x", out="o")
    assert cfg.seed == cfg.train.seed == 11
    assert cfg.data["dir"] == "/x" and cfg.data["synthetic"] is None and cfg.out == "o"


def test_toml_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        'name = "toml"\nkind = "pgd_at"\nseed = 2\n'
        "[train]\nepochs = 1\n[train.attack]\nkind = \"pgd\"\neps = \"8/255\"\niters = 3\n"
        "[data.synthetic]\nn_train = 20\n"
    )
    cfg = config.load(path)
    assert cfg.kind == "pgd_at" and cfg.train.attack.iters == 3
    assert cfg.train.attack.alpha == pytest.approx(2 * (8 / 255) / 3)
    assert cfg.data["synthetic"]["n_test"] == 500


def test_unparseable_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        config.load(path)
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json")


@pytest.mark.parametrize("name", config.preset_names())
def test_presets_validate(name):
    cfg = config.load(name)
    assert cfg.name == name and cfg.notes


def test_required_presets_present():
    for name in ("fig2_eps8", "fig2_eps16", "table1", "fig_retrain", "fig_pgdinit", "fig_sweep"):
        assert name in config.preset_names()
    assert config.load("fig_pgdinit").train.attack.init == "pgd"
    assert config.load("fig_pgdinit").train.attack.init_iters == 7
    assert config.load("fig_gradalign").train.grad_align_lambda > 0
    sweep = config.load("fig_sweep")
    assert 8 in sweep.sweep["iters"] and 4 / 255 in sweep.sweep["alphas"]
    assert sweep.sweep["eps"] == 16 / 255
