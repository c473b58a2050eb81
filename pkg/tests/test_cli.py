import csv
import json

import numpy as np
import pytest

from fixseg import __version__, cli
from fixseg.fixpoint import FixpointReport, load_model, save_model
from fixseg.synth import read_manifest

SMALL_NET = ["--width", "6", "--code-dim", "6", "--head-hidden", "6", "--mixed-layers", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--templates", "lamp", "--n", 2, "--n-points", 40, "--test-states", 3, "--out", d / "data") == 0
    assert run("train", "--data", d / "data", "--out-ckpt", d / "m.ckpt", "--epochs", 3, *SMALL_NET) == 0
    return d


def test_gen_is_deterministic_and_schema_valid(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "--templates", "oven", "--n", 2, "--n-points", 32, "--test-states", 2, "--seed", 1,
                   "--out", tmp_path / name) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert read_manifest(tmp_path / "a")["seed"] == 1


def test_missing_out_exits_with_usage(capsys):
    assert run("gen", "--templates", "oven") == 2
    err = capsys.readouterr().err
    assert "usage" in err and "--out" in err


def test_seed_environment_default(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert run("gen", "--n", 1, "--n-points", 16, "--test-states", 1, "--out", tmp_path / "env") == 0
    monkeypatch.delenv(cli.SEED_ENV)
    assert run("gen", "--n", 1, "--n-points", 16, "--test-states", 1, "--seed", 5, "--out", tmp_path / "flag") == 0
    assert tree(tmp_path / "env") == tree(tmp_path / "flag")
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    assert run("gen", "--out", tmp_path / "x") == 2


def test_config_file_mirrors_flags_and_flags_win(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"templates": "cabinet", "n": 1, "n-points": 20, "test_states": 1, "seed": 2}))
    assert run("gen", "--config", cfg, "--out", tmp_path / "d", "--n-points", 24) == 0
    m = read_manifest(tmp_path / "d")
    assert set(m["templates"]) == {"cabinet"} and m["n_points"] == 24 and m["seed"] == 2
    cfg.write_text(json.dumps({"n_point": 3}))
    assert run("gen", "--config", cfg, "--out", tmp_path / "e") == 2
    cfg.write_text("[1, 2]")
    assert run("gen", "--config", cfg, "--out", tmp_path / "e") == 2


def test_train_outputs_and_reports(workdir):
    rows = list(csv.DictReader(open(workdir / "m.losses.csv")))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    report = json.loads((workdir / "m.train.json").read_text())
    assert report["version"] == __version__
    assert report["run_config"]["command"] == "train" and report["run_config"]["params"]["epochs"] == 3
    assert report["net"]["k"] == 40  # defaults to the dataset's points per shape
    assert "time" not in json.dumps(report)


def test_resume_continues_the_curve_bit_exactly(workdir, tmp_path):
    data = workdir / "data"
    assert run("train", "--data", data, "--out-ckpt", tmp_path / "a.ckpt", "--epochs", 2, *SMALL_NET) == 0
    assert run("train", "--data", data, "--out-ckpt", tmp_path / "b.ckpt", "--resume", tmp_path / "a.ckpt",
               "--losses", tmp_path / "a.losses.csv", "--epochs", 1) == 0
    assert (tmp_path / "a.losses.csv").read_text() == (workdir / "m.losses.csv").read_text()
    full, _, meta = load_model(workdir / "m.ckpt")
    resumed, _, meta2 = load_model(tmp_path / "b.ckpt")
    assert meta["epoch"] == meta2["epoch"] == 3
    a, b = full.state_dict(), resumed.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_infer_is_deterministic(workdir, tmp_path):
    inp = workdir / "data" / "test_states" / "lamp_0000.txt"
    outputs = []
    for _ in range(2):
        assert run("infer", "--ckpt", workdir / "m.ckpt", "--input", inp, "--out", tmp_path / "p.txt") == 0
        outputs.append(((tmp_path / "p.txt").read_bytes(), (tmp_path / "p.txt.json").read_bytes()))
    assert outputs[0] == outputs[1]
    rep = json.loads((tmp_path / "p.txt.json").read_text())
    assert len(rep["report"]["residuals"]) == rep["report"]["steps"]
    assert 0 <= rep["matched_iou"] <= 1


def test_infer_init_parsing(workdir, tmp_path):
    inp = workdir / "data" / "train" / "lamp_0000.txt"
    args = ["infer", "--ckpt", workdir / "m.ckpt", "--input", inp, "--out", tmp_path / "o.txt"]
    assert run(*args, "--init", "noisy:0.3") == 0
    for bad in ("noisy:2", "noisy:", "gauss", "noisy:x"):
        assert run(*args, "--init", bad) == 2


def test_divergence_exit_code(workdir, tmp_path, monkeypatch):
    def fake(net, X, y0, *a, **k):
        return FixpointReport([1.0, 2.0, 3.0, 4.0], False, 4, np.asarray(y0.assign), diverged=True)

    monkeypatch.setattr(cli, "banach_infer", fake)
    args = ["infer", "--ckpt", workdir / "m.ckpt", "--input", workdir / "data" / "train" / "lamp_0000.txt",
            "--out", tmp_path / "o.txt"]
    assert run(*args) == 4
    assert json.loads((tmp_path / "o.txt.json").read_text())["report"]["diverged"]
    assert run(*args, "--allow-diverged") == 0


def test_nan_parameters_exit_numeric_with_layer_name(workdir, tmp_path, capsys):
    net, _, _ = load_model(workdir / "m.ckpt")
    net.lift.lin.W.data[:] = np.nan
    save_model(tmp_path / "nan.ckpt", net)
    rc = run("train", "--data", workdir / "data", "--out-ckpt", tmp_path / "o.ckpt", "--resume", tmp_path / "nan.ckpt",
             "--epochs", 1)
    assert rc == 3
    assert "lift" in capsys.readouterr().err


def test_part_count_mismatch_is_a_config_error(workdir, tmp_path):
    assert run("gen", "--templates", "bracket", "--n", 1, "--n-points", 24, "--test-states", 1,
               "--out", tmp_path / "three") == 0
    assert run("eval", "--ckpt", workdir / "m.ckpt", "--data", tmp_path / "three", "--out", tmp_path / "e.csv") == 2
    assert run("eval", "--ckpt", tmp_path / "missing.ckpt", "--data", workdir / "data", "--out", tmp_path / "e.csv") == 2


def test_eval_is_thread_count_independent(workdir, tmp_path):
    common = ["eval", "--ckpt", workdir / "m.ckpt", "--data", workdir / "data"]
    assert run(*common, "--out", tmp_path / "one.csv") == 0
    assert run(*common, "--out", tmp_path / "two.csv", "--threads", 2) == 0
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "one.csv")))
    assert len(rows) == 3
    summary = json.loads((tmp_path / "one.csv.json").read_text())
    assert summary["n"] == 3 and np.isclose(summary["mean_iou"], np.mean([float(r["iou"]) for r in rows]))


def test_audit_lipschitz_and_sweep_reports(workdir, tmp_path):
    ck, data = workdir / "m.ckpt", workdir / "data"
    assert run("audit-equiv", "--ckpt", ck, "--data", data, "--out", tmp_path / "a.json", "--trials", 5) == 0
    assert json.loads((tmp_path / "a.json").read_text())["max_residual"] < 1e-5
    assert run("lipschitz", "--ckpt", ck, "--data", data, "--out", tmp_path / "l.json", "--samples", 3) == 0
    lip = json.loads((tmp_path / "l.json").read_text())
    for r in lip["instances"]:
        assert {"L_hat", "eps", "bound", "holds", "distance"} <= set(r)
    assert run("sweep-noise", "--ckpt", ck, "--data", data, "--out", tmp_path / "s.csv", "--trials", 2) == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [float(r["alpha"]) for r in rows] == [0, 0.25, 0.5, 0.75, 1]
    assert run("sweep-noise", "--ckpt", ck, "--data", data, "--out", tmp_path / "s.csv", "--alphas", "0,x") == 2
