import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslpoison import experiment as E
from sslpoison.errors import ConfigError
from sslpoison.experiment import ExperimentConfig, run_experiment

from conftest import tiny_config


def test_hash_ignores_out_dir_and_key_order():
    a = ExperimentConfig.from_dict({"seed": 1, "attack": "phantom", "out_dir": "x"})
    b = ExperimentConfig.from_dict({"attack": "phantom", "out_dir": "y", "seed": 1})
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert a.run_dir().name == a.hash()


@settings(max_examples=30, deadline=None)
@given(pdr=st.floats(0, 1), pv=st.floats(0, 1), seed=st.integers(0, 100))
def test_hash_is_a_function_of_content(pdr, pv, seed):
    d = {"attack": "phantom", "attack_params": {"pdr": pdr, "pv": pv}, "seed": seed}
    h = ExperimentConfig.from_dict(d).hash()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(d))).hash() == h
    assert ExperimentConfig.from_dict({**d, "seed": seed + 1}).hash() != h


def test_defaults_are_filled():
    c = ExperimentConfig.from_dict({"attack": "phantom"})
    assert c.attack_params["pdr"] == 0.05 and c.attack_params["pv"] == 0.1
    assert c.ssl["lambda_u"] == 1.0 and c.schedule["epochs"] == 30
    assert c.schedule["batch_labeled"] == 64 and c.model["backbone"] == "small-cnn"
    assert ExperimentConfig.from_dict({"attack": "3u1l"}).attack_params["pattern_arity"] == 4


@pytest.mark.parametrize("bad,match", [
    ({"attak": "phantom"}, "attak"),
    ({"attack": "blend"}, "phantom"),
    ({"attack": "empty", "attack_params": {"pv": 0.1}}, "pv"),
    ({"attack": "phantom", "attack_params": {"pdr": 1.5}}, "pdr"),
    ({"dataset": "svhn"}, "svhn"),
    ({"platform": "myspace"}, "instagram"),
    ({"ssl": {"algorithm": "meanteacher"}}, "algorithm"),
    ({"attack": "interp", "attack_params": {"density": "x2"}}, "density"),
    ({"corruption": {"kind": "fog"}}, "fog"),
])
def test_config_errors(bad, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(bad)


def test_load_yaml_and_json(tmp_path):
    (tmp_path / "c.yaml").write_text("attack: empty\nseed: 3\n")
    (tmp_path / "c.json").write_text('{"attack": "empty", "seed": 3}')
    assert ExperimentConfig.load(tmp_path / "c.yaml").hash() == ExperimentConfig.load(tmp_path / "c.json").hash()
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.yaml")


def test_run_layout_and_reuse(toy_folder, tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(toy_folder, tmp_path, attack="phantom",
                                                 attack_params={"pdr": 0.2, "pv": 0.5}))
    rec = run_experiment(cfg)
    assert rec.ok, rec.error
    d = tmp_path / cfg.hash()
    for f in ("config.json", "trace.csv", "result.json", "manifest.csv", "model.pt"):
        assert (d / f).exists(), f
    assert len(list((d / "images").glob("*.png"))) == 2
    assert rec.n_poisoned == 30 and rec.n_unlabeled == 152
    assert 0 <= rec.acc_test <= 1 and rec.naive_acc > 0
    stamp = (d / "result.json").stat().st_mtime_ns
    again = run_experiment(cfg)
    assert again == rec and (d / "result.json").stat().st_mtime_ns == stamp
    forced = run_experiment(cfg, force=True)
    assert forced.acc_test == rec.acc_test


def test_failure_names_stage(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(tmp_path / "nowhere", tmp_path / "runs"))
    rec = run_experiment(cfg)
    assert rec.status == "failed" and rec.stage == "load"
    assert (cfg.run_dir() / "error.txt").exists()


def test_zero_pdr_equals_benign(toy_folder, tmp_path):
    benign = run_experiment(ExperimentConfig.from_dict(tiny_config(toy_folder, tmp_path)))
    zero = run_experiment(ExperimentConfig.from_dict(
        tiny_config(toy_folder, tmp_path, attack="phantom", attack_params={"pdr": 0.0})))
    assert benign.config_hash != zero.config_hash
    assert zero.acc_test == benign.acc_test and zero.n_poisoned == 0
    assert open(benign.trace).read() == open(zero.trace).read()


@pytest.mark.parametrize("attack", [a for a in E.ATTACKS if a != "none"])
def test_every_attack_runs(toy_folder, tmp_path, attack):
    params = {"pdr": 0.1}
    if attack == "3u1l":
        params["pattern_arity"] = 4
    rec = run_experiment(ExperimentConfig.from_dict(tiny_config(toy_folder, tmp_path, attack=attack,
                                                                attack_params=params)))
    assert rec.ok, rec.error
    if attack == "remove":
        assert rec.n_unlabeled == 152 - 15 and rec.n_poisoned == 0
    else:
        assert rec.n_poisoned == 15


def test_defense_platform_and_corruption_stages(toy_folder, tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(
        toy_folder, tmp_path, attack="phantom", attack_params={"pdr": 0.2, "pv": 1.0},
        defense={"warmup_epochs": 1}, platform="instagram", corruption={"kind": "smoothing"}))
    rec = run_experiment(cfg)
    assert rec.ok, rec.error
    assert 0.5 <= rec.defense["auc"] <= 1.0
    with open(cfg.run_dir() / "scores.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 152 and set(rows[0]) == {"id", "score", "verdict"}
    assert (cfg.run_dir() / "histograms.csv").exists()


def test_expand_grid():
    cs = E.expand_grid({"attack": "phantom"}, {"attack_params.pdr": [0.1, 0.2], "seed": [0, 1, 2]})
    assert len(cs) == 6 and len({c.hash() for c in cs}) == 6


def test_load_sweep_grid_list(tmp_path):
    (tmp_path / "s.yaml").write_text(
        "base: {attack: phantom}\n"
        "grid:\n"
        "  - {seed: [0, 1]}\n"
        "  - {seed: [1, 2], attack_params.pv: [0.1]}\n")
    configs, keys, par = E.load_sweep(tmp_path / "s.yaml")
    # pv 0.1 is the default, so seed 1 appears once
    assert len(configs) == 3 and keys == ["seed", "attack_params.pv"] and par == 1


def test_sweep_resumes_and_writes_csv(toy_folder, tmp_path):
    base = tiny_config(toy_folder, tmp_path / "runs", attack="phantom")
    configs = E.expand_grid(base, {"attack_params.pdr": [0.0, 0.2], "seed": [0, 1]})
    out = tmp_path / "results.csv"
    recs = E.sweep(configs, 1, out)
    assert all(r.ok for r in recs)
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4 and {"attack_params.pdr", "seed", "hash", "acc_test"} <= set(rows[0])
    victim = configs[1].run_dir() / "result.json"
    victim.unlink()
    stamps = {c.hash(): (c.run_dir() / "result.json").stat().st_mtime_ns for c in configs if c.hash() != configs[1].hash()}
    recs2 = E.sweep(configs, 1, out)
    assert [r.acc_test for r in recs2] == [r.acc_test for r in recs]
    assert victim.exists()
    for c in configs:
        if c.hash() in stamps:
            assert (c.run_dir() / "result.json").stat().st_mtime_ns == stamps[c.hash()]


def test_report(toy_folder, tmp_path):
    base = tiny_config(toy_folder, tmp_path / "runs", attack="phantom")
    recs = E.sweep(E.expand_grid(base, {"attack_params.pdr": [0.0, 0.2], "attack_params.pv": [0.1, 0.5]}))
    files = E.emit_report(recs, tmp_path / "rep")
    names = {f.name for f in files}
    assert names == {"scenarios.csv", "pdr_pv_matrix.csv", "pdr_curve.png", "pv_curve.png"}
    lines = (tmp_path / "rep" / "scenarios.csv").read_text().splitlines()
    assert lines[0] == "scenario,mixmatch,uda,fixmatch"
    assert lines[1].startswith("benign,,,")


def test_scenario_labels():
    c = ExperimentConfig.from_dict({"attack": "phantom", "attack_params": {"pdr": 0.2, "pv": 0.3},
                                    "platform": "instagram"}).canonical()
    assert E.scenario_label(c) == "phantom pdr=0.2 pv=0.3 [instagram]"
    assert E.scenario_label(ExperimentConfig.from_dict({"attack": "remove"}).canonical()) == "remove 0.1"


def test_naive_accuracy():
    assert E.naive_accuracy([0, 0, 1, 2]) == 0.5
    assert np.isnan(E.naive_accuracy([]))
