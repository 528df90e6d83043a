import csv
import json
import os

import pytest

from ddr.cli import level_name, main

TINY = ["--epochs", "1", "--widths", "8,8", "--batch-size", "64", "--max-steps", "6"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = str(d / "d.csv")
    assert main(["generate", "--family", "linear-constant", "--n", "300", "--seed", "1", "--out", data]) == 0
    for mode in ("ddr-joint", "ddr-q", "fcnn"):
        assert main(["train", "--data", data, "--out", str(d / f"{mode}.ddr"), "--mode", mode, *TINY]) == 0
    return d, data


def test_level_names():
    assert [level_name(t) for t in (0.1, 0.5, 0.9, 0.025)] == ["q10", "q50", "q90", "q2.5"]


def test_generate_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(capsys, "generate", "--family", "sin-constant", "--n", "1000", "--seed", "7", "--out", p)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_csv(a)
    assert rows[0] == ["x1", "y"] and len(rows) == 1001
    spec = json.loads((tmp_path / "a.csv.oracle.json").read_text())
    assert spec["family"] == "sin-constant" and spec["seed"] == 7


def test_generate_bad_family(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--family", "bogus", "--out", tmp_path / "x.csv")
    assert code == 2 and err.startswith("ddr: error: usage:") and "linear-constant" in err
    assert len(err.strip().splitlines()) == 1


def test_train_artifacts(work):
    d, _ = work
    for f in ("ddr-joint.ddr", "ddr-joint.ddr.log.json", "ddr-joint.ddr.epochs.csv"):
        assert (d / f).exists()
    log = json.loads((d / "ddr-joint.ddr.log.json").read_text())
    assert log["mode"] == "ddr-joint" and log["config"]["max_steps"] == 6
    names = sorted(p.name for p in d.iterdir() if p.name.startswith("fcnn.ddr.q"))
    assert names == sorted(f"fcnn.ddr.q{10 * i}" for i in range(1, 10))


def test_train_missing_data_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", tmp_path / "m.ddr")
    assert code == 2 and "--data" in err


def test_train_config_precedence(work, tmp_path, capsys):
    _, data = work
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": data, "out": str(tmp_path / "m.ddr"), "lr": 0.02, "epochs": 1,
                               "feature_widths": [4], "regression_widths": [4], "max_steps": 2, "seed": 5}))
    assert run(capsys, "train", "--config", cfg, "--lr", "0.005")[0] == 0
    log = json.loads((tmp_path / "m.ddr.log.json").read_text())
    assert log["config"]["lr"] == 0.005 and log["config"]["seed"] == 5 and log["config"]["feature_widths"] == [4]
    cfg.write_text(json.dumps({"bogus": 1}))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", data, "--out", tmp_path / "n.ddr")
    assert code == 2 and "bogus" in err


def test_train_seed_replicates(work, tmp_path, capsys):
    _, data = work
    out = tmp_path / "r.ddr"
    code, stdout, _ = run(capsys, "train", "--data", data, "--out", out, "--seeds", "1,2", *TINY)
    assert code == 0 and stdout.split() == [f"{out}.seed1", f"{out}.seed2"]
    code, stdout, _ = run(capsys, "evaluate", "--model", f"{out}.seed1,{out}.seed2", "--data", data)
    doc = json.loads(stdout)
    assert doc["summary"]["q_s"]["n"] == 2 and len(doc["reports"]) == 2


def test_evaluate_with_oracle(work, tmp_path, capsys):
    d, data = work
    out = tmp_path / "e.json"
    code, _, _ = run(capsys, "evaluate", "--model", d / "ddr-joint.ddr", "--data", data, "--out", out)
    doc = json.loads(out.read_text())
    assert code == 0 and "oracle_gap" in doc and doc["oracle_gap"] is not None
    assert abs(doc["q_s"] - sum(doc["per_decile"])) <= 1e-12
    rows = read_csv(tmp_path / "e.csv")
    assert len(rows) == 2 and "oracle_gap_q10" in rows[0]


def test_evaluate_dual_guard(work, capsys):
    d, data = work
    code, _, err = run(capsys, "evaluate", "--model", d / "ddr-q.ddr", "--data", data, "--dual")
    assert code != 0 and err.startswith("ddr: error:") and "F" in err
    code, _, err = run(capsys, "evaluate", "--model", d / "fcnn.ddr", "--data", data, "--dual")
    assert code != 0
    assert run(capsys, "evaluate", "--model", d / "ddr-joint.ddr", "--data", data, "--dual")[0] == 0


def test_evaluate_fcnn_set(work, capsys):
    d, data = work
    code, out, _ = run(capsys, "evaluate", "--model", d / "fcnn.ddr", "--data", data)
    assert code == 0 and json.loads(out)["recover_Q"] is None


def test_evaluate_dimension_mismatch(work, tmp_path, capsys):
    d, _ = work
    other = tmp_path / "o.csv"
    other.write_text("a,b,y\n1,2,3\n")
    code, _, err = run(capsys, "evaluate", "--model", d / "ddr-joint.ddr", "--data", other)
    assert code == 1 and "x1" in err


def test_predict_columns(work, tmp_path, capsys):
    d, data = work
    out = tmp_path / "p.csv"
    code, _, _ = run(capsys, "predict", "--model", d / "ddr-joint.ddr", "--data", data,
                     "--tau", "0.1,0.5,0.9", "--mean", "--n", "999", "--cdf", "1.0", "--out", out)
    rows = read_csv(out)
    assert code == 0 and rows[0][:3] == ["q10", "q50", "q90"] and "mean_trapz" in rows[0]
    assert any(h.startswith("cdf_") for h in rows[0]) and len(rows) == 301
    p = float(rows[1][rows[0].index([h for h in rows[0] if h.startswith("cdf_")][0])])
    assert 0 < p < 1


def test_predict_default_deciles_to_stdout(work, capsys):
    d, data = work
    code, out, _ = run(capsys, "predict", "--model", d / "fcnn.ddr", "--data", data)
    assert code == 0 and out.splitlines()[0].split(",") == [f"q{10 * i}" for i in range(1, 10)]


def test_predict_bad_tau(work, capsys):
    d, data = work
    code, _, err = run(capsys, "predict", "--model", d / "ddr-joint.ddr", "--data", data, "--tau", "1.5")
    assert code == 2 and "(0, 1)" in err


def test_curves_shape(work, tmp_path, capsys):
    d, _ = work
    out = tmp_path / "c.csv"
    code, _, _ = run(capsys, "curves", "--model", d / "ddr-joint.ddr", "--grid", "101", "--out", out)
    rows = read_csv(out)
    assert code == 0 and len(rows) == 102 and len(rows[0]) == 10 and rows[0][0] == "x1"


def test_missing_model_file(tmp_path, capsys):
    code, _, err = run(capsys, "predict", "--model", tmp_path / "none.ddr", "--data", tmp_path / "x.csv")
    assert code == 1 and err.startswith("ddr: error:")


def test_train_deterministic_files(work, tmp_path, capsys):
    _, data = work
    outs = [tmp_path / "a.ddr", tmp_path / "b.ddr"]
    for o in outs:
        assert run(capsys, "train", "--data", data, "--out", o, "--seed", "3", *TINY)[0] == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    reps = []
    for o in outs:
        run(capsys, "evaluate", "--model", o, "--data", data, "--out", str(o) + ".eval.json")
        reps.append((tmp_path / (o.name + ".eval.json")).read_bytes())
    assert reps[0] == reps[1]
