import csv
import json

import pytest

from coforge import cli, config
from coforge.diagnostics import min_last_half
from coforge.errors import NonFiniteError
from coforge.training import read_metrics_csv


def write_cfg(tmp_path, name="c.json", **over):
    doc = {
        "name": "tiny",
        "kind": "fgsm_at",
        "seed": 5,
        "model": {"widths": [4, 6], "input_shape": [3, 16, 16]},
        "train": {
            "epochs": 2,
            "batch_size": 50,
            "augment": False,
            "train_eval_size": 60,
            "test_eval_size": 60,
            "attack": {"kind": "fgsm", "eps": "8/255"},
        },
        "data": {"synthetic": {"n_train": 150, "n_test": 60}},
    }
    for k, v in over.items():
        doc[k] = {**doc[k], **v} if isinstance(v, dict) and isinstance(doc.get(k), dict) else v
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp / "run")]) == 0
    return tmp, cfg, tmp / "run"


def test_train_outputs(trained):
    _, _, run = trained
    assert {p.name for p in run.iterdir()} >= {"config.resolved.json", "metrics.csv", "summary.json", "checkpoints"}
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["epoch_000.cofg", "epoch_001.cofg"]
    summary = json.loads((run / "summary.json").read_text())
    metrics = read_metrics_csv(run / "metrics.csv")
    assert len(metrics) == 2
    co = [m.epoch for m in metrics if m.co]
    assert summary["co_epoch"] == (co[0] if co else "none")


def test_resolved_config_replays_bitwise(trained, tmp_path):
    _, _, run = trained
    assert cli.main(["train", "--config", str(run / "config.resolved.json"), "--out", str(tmp_path / "again")]) == 0
    a = read_metrics_csv(run / "metrics.csv")
    b = read_metrics_csv(tmp_path / "again" / "metrics.csv")
    assert [m.replay_key() for m in a] == [m.replay_key() for m in b]
    for name in ("epoch_000.cofg", "epoch_001.cofg"):
        assert (run / "checkpoints" / name).read_bytes() == (tmp_path / "again" / "checkpoints" / name).read_bytes()


def test_seed_flag_changes_run(trained, tmp_path):
    _, cfg, run = trained
    assert cli.main(["train", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "s6")]) == 0
    assert json.loads((tmp_path / "s6" / "config.resolved.json").read_text())["seed"] == 6
    assert (run / "checkpoints" / "epoch_001.cofg").read_bytes() != (tmp_path / "s6" / "checkpoints" / "epoch_001.cofg").read_bytes()


def test_diagnose_reports_and_leaves_checkpoint_alone(trained, tmp_path):
    _, cfg, run = trained
    ckpt = run / "checkpoints" / "epoch_001.cofg"
    before = ckpt.read_bytes()
    out = tmp_path / "diag"
    assert cli.main(["diagnose", "--config", str(cfg), "--checkpoint", str(ckpt), "--prune-top", "1", "--out", str(out)]) == 0
    assert ckpt.read_bytes() == before
    names = {p.name for p in out.iterdir()}
    assert names >= {"variance.json", "rank_variance.csv", "param_variance.json", "prune_report.json",
                     "prune_table.csv", "step_size_sweep.csv", "diagnose.json"}
    summary = json.loads((out / "diagnose.json").read_text())
    variance = json.loads((out / "variance.json").read_text())
    assert summary["prune"]["channels"] == variance["order"][:1]
    assert 0 <= summary["rl_fgsm_acc"] <= 1
    with (out / "step_size_sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10 * 17  # every class as target, 17 step sizes
    assert float(rows[0]["alpha"]) == 0.0


def test_diagnose_without_config_uses_checkpoint_model(trained, tmp_path, monkeypatch):
    _, _, run = trained
    monkeypatch.delenv(cli.CIFAR_ENV, raising=False)
    code = cli.main(["diagnose", "--checkpoint", str(run / "checkpoints" / "epoch_001.cofg"), "--out", str(tmp_path)])
    assert code == cli.EXIT_DATA  # no dataset reachable


def test_plots_schema_and_idempotence(trained, tmp_path):
    tmp, cfg, run = trained
    diag = run / "diagnose_epoch_000"
    cli.main(["diagnose", "--config", str(cfg), "--checkpoint", str(run / "checkpoints" / "epoch_000.cofg"), "--out", str(diag)])
    assert cli.main(["plots", str(run), "--out", str(tmp_path / "p1")]) == 0
    assert cli.main(["plots", str(run), "--out", str(tmp_path / "p2")]) == 0
    files = sorted(p.name for p in (tmp_path / "p1").iterdir())
    assert files == ["alpha_prob_epoch_000.csv", "curves_eps8.csv", "rank_variance_epoch_000.csv"]
    for name in files:
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()
    lines = (tmp_path / "p1" / "curves_eps8.csv").read_text().splitlines()
    assert lines[0] == "epoch,train,rl_train,test_pgd" and len(lines) == 3
    rank_rows = (tmp_path / "p1" / "rank_variance_epoch_000.csv").read_text().splitlines()[1:]
    assert len(rank_rows) == 4  # C1


def test_plots_missing_run(tmp_path):
    assert cli.main(["plots", str(tmp_path / "none")]) == cli.EXIT_DATA
    assert cli.main(["plots", str(tmp_path)]) == cli.EXIT_DATA


def test_exit_code_config_error(tmp_path, capsys):
    doc = json.loads(write_cfg(tmp_path).read_text())
    doc["train"]["optimiser"] = "adam"
    doc["bogus"] = 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "train.optimiser" in err and "bogus" in err
    assert cli.main(["train", "--config", "no_such_preset"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", "table1"]) == cli.EXIT_CONFIG  # diagnose kind under train


def test_exit_code_data_errors(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.CIFAR_ENV, raising=False)
    cfg = write_cfg(tmp_path, data={"synthetic": None})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == cli.EXIT_DATA
    monkeypatch.chdir(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--data-dir", str(tmp_path / "nowhere")]) == cli.EXIT_DATA
    assert not (tmp_path / "runs").exists()
    junk = tmp_path / "junk.cofg"
    junk.write_bytes(b"NOPE" + bytes(40))
    assert cli.main(["diagnose", "--config", str(write_cfg(tmp_path)), "--checkpoint", str(junk)]) == cli.EXIT_DATA


def test_data_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.CIFAR_ENV, str(tmp_path / "empty"))
    cfg = config.load(write_cfg(tmp_path, data={"synthetic": None}))
    with pytest.raises(FileNotFoundError, match="empty"):
        cli.load_data(cfg)


def test_exit_code_numerical_abort(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteError("loss is nan", batch_index=3)

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "r")]) == cli.EXIT_NUMERIC


def test_threads_env(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.worker_count() == 3
    for bad in ("0", "x"):
        monkeypatch.setenv(cli.THREADS_ENV, bad)
        with pytest.raises(config.ConfigError):
            cli.worker_count()


def sweep_cfg(tmp_path, iters, alphas):
    return write_cfg(
        tmp_path,
        name="sweep.json",
        kind="sweep",
        train={"epochs": 2, "batch_size": 50, "augment": False, "train_eval_size": 30, "test_eval_size": 30,
               "attack": {"kind": "pgd", "eps": "8/255", "iters": 1}},
        sweep={"iters": iters, "alphas": alphas, "eps": "8/255"},
        data={"synthetic": {"n_train": 60, "n_test": 30}},
    )


def read_grid(path):
    with path.open() as fh:
        return list(csv.DictReader(fh))


def test_degenerate_sweep_matches_train(tmp_path):
    cfg = sweep_cfg(tmp_path, [2], ["4/255"])
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")]) == 0
    grid = read_grid(tmp_path / "sw" / "grid.csv")
    assert len(grid) == 1 and grid[0]["status"] == "ok"

    doc = json.loads(cfg.read_text())
    doc["kind"] = "pgd_at"
    doc["train"]["attack"] = {"kind": "pgd", "eps": "8/255", "iters": 2, "alpha": "4/255"}
    del doc["sweep"]
    tcfg = tmp_path / "train.json"
    tcfg.write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(tcfg), "--out", str(tmp_path / "tr")]) == 0
    curve = [m.test_pgd_acc for m in read_metrics_csv(tmp_path / "tr" / "metrics.csv")]
    assert float(grid[0]["min_robust_acc"]) == min_last_half(curve)


@pytest.mark.filterwarnings("ignore:under-powered PGD")
def test_sweep_grid_workers_and_cache(tmp_path, monkeypatch):
    cfg = sweep_cfg(tmp_path, [1, 2], ["4/255", "8/255"])
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "seq")]) == 0
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "par")]) == 0
    seq, par = read_grid(tmp_path / "seq" / "grid.csv"), read_grid(tmp_path / "par" / "grid.csv")
    assert len(seq) == 4 and seq == par
    assert len(list((tmp_path / "seq" / "cells").glob("*.json"))) == 4
    # a rerun is served from the cell cache
    monkeypatch.setattr(cli, "build_model", lambda *a, **k: pytest.fail("cache miss"))
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "seq")]) == 0
    assert cli.main(["plots", str(tmp_path / "seq")]) == 0
    heat = (tmp_path / "seq" / "plots" / "grid_heat.csv").read_text().splitlines()
    assert heat[0] == "iters,alpha_4.0000,alpha_8.0000" and len(heat) == 3


def test_prune_retrain_pair(trained, tmp_path):
    _, cfg, run = trained
    doc = json.loads(cfg.read_text())
    doc.update(kind="prune_retrain", retrain={"k_channels": 1, "extra_epochs": 2})
    rcfg = tmp_path / "r.json"
    rcfg.write_text(json.dumps(doc))
    ckpt = run / "checkpoints" / "epoch_000.cofg"
    before = ckpt.read_bytes()
    out = tmp_path / "rt"
    assert cli.main(["train", "--config", str(rcfg), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    assert ckpt.read_bytes() == before
    summary = json.loads((out / "summary.json").read_text())["retrain"]
    assert summary["start_epoch"] == 1
    assert len(summary["pruned_test_pgd"]) == len(summary["unpruned_test_pgd"]) == 2
    assert 1 <= summary["pruned_co_after"] <= 3 and 1 <= summary["unpruned_co_after"] <= 3
    assert [m.epoch for m in read_metrics_csv(out / "pruned" / "metrics.csv")] == [1, 2]
    assert cli.main(["plots", str(out)]) == 0
    lines = (out / "plots" / "retrain_curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,pruned_test_pgd,unpruned_test_pgd" and len(lines) == 3


def test_prune_retrain_without_co_is_skipped(tmp_path):
    cfg = write_cfg(tmp_path, kind="prune_retrain")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    if summary["co_epoch"] == "none":
        assert summary["retrain"]["status"].startswith("skipped")


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "coforge", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("train", "diagnose", "sweep", "plots"):
        assert sub in res.stdout
