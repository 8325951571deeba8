import json
import os

import pytest
import yaml

from recunlearn.cli import main
from recunlearn.config import ConfigError, ExperimentConfig, dump_config, env_overrides, load_config

SMALL = {
    "data": {"synthetic": {"num_users": 80, "num_items": 120, "min_per_user": 8, "max_per_user": 14}},
    "model": {"epochs": 15},
    "mio": {"epochs": 5},
    "repetitions": 1,
}


@pytest.fixture
def small_config(tmp_path, monkeypatch):
    for key in [k for k in os.environ if k.startswith("RECUNLEARN_")]:
        monkeypatch.delenv(key)
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def test_env_overrides_nest_and_parse():
    env = {"RECUNLEARN_MODEL__EPOCHS": "7", "RECUNLEARN_ALPHAS": "[1, 2.5]", "OTHER": "x"}
    assert env_overrides(env) == {"model": {"epochs": 7}, "alphas": [1, 2.5]}
    cfg = load_config(None, {"seed": 3}, environ=env)
    assert cfg.model.epochs == 7 and cfg.alphas == (1, 2.5) and cfg.seed == 3
    assert cfg.model.embed_dim == ExperimentConfig().model.embed_dim


@pytest.mark.parametrize("over", [{"nope": 1}, {"model": {"nope": 1}}, {"cka_m": 1},
                                  {"strategies": ["magic"]}, {"alphas": [0]}, {"model": 3}])
def test_bad_config_values(over):
    with pytest.raises(ConfigError):
        load_config(None, over, environ={})


def test_config_round_trip(tmp_path):
    cfg = load_config(None, {"alphas": [2.0, 4.0], "model": {"epochs": 9}}, environ={})
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml", environ={}) == cfg
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")


def test_seed_fan_out_is_stable():
    a, b = ExperimentConfig(seed=1, repetitions=3).seeds(), ExperimentConfig(seed=1, repetitions=3).seeds()
    assert a == b
    assert len(set(a["model"])) == 3
    assert ExperimentConfig(seed=2).seeds()["split"] != a["split"]


def test_prepare_missing_file_exits_2(tmp_path, capsys):
    assert main(["prepare", "--data", str(tmp_path / "none.dat"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err.lower()


def test_prepare_is_byte_reproducible(tmp_path, small_config):
    for name in ("a", "b"):
        assert main(["prepare", "--config", str(small_config), "--out", str(tmp_path / name)]) == 0
    for f in ("train.csv", "test.csv"):
        assert (tmp_path / "a/data" / f).read_bytes() == (tmp_path / "b/data" / f).read_bytes()
    a, b = (json.loads((tmp_path / n / "data/stats.json").read_text()) for n in "ab")
    assert a.pop("config")["out_dir"] != b.pop("config")["out_dir"]
    assert a == b


def test_stage_chain(tmp_path, small_config):
    out = str(tmp_path)
    base = ["--config", str(small_config), "--out", out]
    assert main(["prepare", *base]) == 0
    assert main(["train", *base]) == 0
    params = tmp_path / "model/params.npz"
    assert main(["unlearn", *base, "--params", str(params), "--alpha", "10"]) == 0
    request = tmp_path / "unlearn/request.json"
    assert len(json.loads(request.read_text())["target_users"]) == 8
    for s in ("retrain", "if_full", "scif"):
        assert (tmp_path / f"unlearn/{s}.npz").exists()
    assert main(["attack", *base, "--params", str(tmp_path / "unlearn/scif.npz"), "--request", str(request)]) == 0
    assert 0.0 <= json.loads((tmp_path / "attack/scif.json").read_text())["query"]["auc"] <= 1.0
    assert main(["eval", *base, "--params", str(params), "--request", str(request)]) == 0
    report = json.loads((tmp_path / "eval/params.json").read_text())
    assert set(report["per_k"]) == {"5", "10", "15", "20"}


def test_cka_command(tmp_path, small_config):
    assert main(["cka", "--config", str(small_config), "--out", str(tmp_path), "--m", "2"]) == 0
    report = json.loads((tmp_path / "cka/cka.json").read_text())
    assert set(report["mean"]) == {"UE_unlearn", "UE_remain", "item_emb"}


def test_run_grid_cells(tmp_path, small_config):
    code = main(["run", "--config", str(small_config), "--out", str(tmp_path), "--alpha", "5,10"])
    assert code == 0
    cells = list((tmp_path / "cells").glob("*.json"))
    # one original cell plus three strategies per alpha
    assert len(cells) == 2 * 4
    assert (tmp_path / "config.resolved.yaml").exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["failed_cells"] == []
