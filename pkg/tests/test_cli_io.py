import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddesign import cli
from fddesign.estimators import estimate_effect
from fddesign.io import (
    config_digest,
    dump_config,
    load_config,
    read_dataset,
    read_json,
    read_manifest,
    write_dataset,
)
from fddesign.sem import ConfigError, ConstantPolicy, coarsen, reference_model

MODEL = reference_model()


def run(*argv):
    return cli.main([str(a) for a in argv])


def config_doc():
    return json.loads(json.dumps(MODEL.to_dict()))


@pytest.fixture
def sim(tmp_path):
    path = tmp_path / "full.csv"
    assert run("simulate", "--n", 2000, "--seed", 1, "--out", path) == 0
    return path


# ---------------------------------------------------------------------------
# io


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1), st.floats(0.05, 1))
def test_csv_round_trip(tmp_path_factory, seed, p1, p2):
    d = coarsen(MODEL.sample(40, seed), ConstantPolicy(p1, p2), seed + 1)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(d, path)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.stage, d.stage)
    np.testing.assert_array_equal(back.x_C, d.x_C)
    np.testing.assert_array_equal(back.x_t, d.x_t)
    np.testing.assert_array_equal(back.x_M, d.x_M)
    np.testing.assert_array_equal(back.x_r, d.x_r)


def test_config_round_trip_and_digest(tmp_path):
    p = tmp_path / "c.json"
    dump_config(MODEL, p)
    model, raw = load_config(p)
    assert model.to_dict() == MODEL.to_dict()
    assert config_digest(raw) == config_digest(p.read_bytes())


def test_json_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "dims": {\n    "d_C": 2,,\n  }\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_missing_field_named(tmp_path):
    doc = config_doc()
    del doc["beta"]["Mt"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="Mt"):
        load_config(p)


def test_bad_delta_token(tmp_path, sim):
    lines = sim.read_text().splitlines()
    lines[1] = "7" + lines[1][lines[1].index(","):]
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigError, match="line 2"):
        read_dataset(bad)


# ---------------------------------------------------------------------------
# simulate


def test_simulate_rows_and_determinism(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("simulate", "--n", 3, "--seed", 7, "--out", a) == 0
    assert run("simulate", "--n", 3, "--seed", 7, "--out", b) == 0
    lines = a.read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("delta,")
    assert all(l.startswith("inf,") for l in lines[1:])
    assert a.read_bytes() == b.read_bytes()
    m = read_manifest(a)
    assert m["command"] == "simulate" and m["outputs"] == [str(a)]


def test_simulate_non_pd_config(tmp_path, capsys):
    doc = config_doc()
    doc["errors"]["M"]["matrix"] = [[1, 2, 0], [2, 1, 0], [0, 0, 1]]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert run("simulate", "--config", p, "--n", 3, "--out", tmp_path / "x.csv") == 2
    assert "Sigma_M" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# design


def test_design_ratio_one(tmp_path):
    out = tmp_path / "d.json"
    assert run("design", "--from-model", "--mc-n", 2000, "--budget-ratio", 1.0, "--out", out) == 0
    doc = read_json(out)
    assert doc["policy"] == {"kind": "constant", "p1": 1.0, "p2": 1.0}
    assert doc["relative_efficiency"] == pytest.approx(1.0)


def test_design_fixture(tmp_path):
    out = tmp_path / "d.json"
    assert run("design", "--fixture", 4, 1, 1, 1, "--c0", 1, "--b0", 2, "--out", out) == 0
    assert read_json(out)["lambda_star"] == pytest.approx(9.0, abs=1e-6)


def test_design_infeasible(tmp_path):
    assert run("design", "--mc-n", 500, "--budget-ratio", 0, "--out", tmp_path / "d.json") == 3


def test_design_from_pilot(tmp_path, sim):
    out = tmp_path / "d.json"
    assert run("design", "--pilot", sim, "--budget-ratio", 0.67, "--out", out) == 0
    doc = read_json(out)
    assert doc["expected_cost"] == pytest.approx(doc["b0"], rel=1e-3)


def test_design_rank_failure(tmp_path):
    path = tmp_path / "tiny.csv"
    assert run("simulate", "--n", 2, "--out", path) == 0
    assert run("design", "--pilot", path, "--budget-ratio", 0.5, "--out", tmp_path / "d.json") == 4


# ---------------------------------------------------------------------------
# coarsen


def test_coarsen_constant_one(tmp_path, sim):
    out = tmp_path / "c.csv"
    assert run("coarsen", "--data", sim, "--constant", 1, 1, "--out", out) == 0
    assert out.read_bytes() == sim.read_bytes()


def test_coarsen_design_reproducible(tmp_path, sim):
    design = tmp_path / "d.json"
    run("design", "--from-model", "--mc-n", 2000, "--budget-ratio", 0.6, "--out", design)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run("coarsen", "--data", sim, "--design", design, "--seed", 3, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_dataset(a).counts()["1"] > 0


def test_coarsen_dimension_mismatch(tmp_path, sim):
    doc = config_doc()
    doc["dims"]["d_C"] = 1
    doc["beta"]["tC"] = [0.5]
    doc["beta"]["MC"] = [[0.3], [0.5], [-0.1]]
    doc["beta"]["rC"] = [0.2]
    doc["errors"]["C"]["matrix"] = [[1.0]]
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(doc))
    design = tmp_path / "d.json"
    assert run("design", "--config", cfg, "--mc-n", 2000, "--budget-ratio", 0.6, "--out", design) == 0
    assert run("coarsen", "--data", sim, "--design", design, "--out", tmp_path / "x.csv") == 2


# ---------------------------------------------------------------------------
# estimate


def test_estimate_matches_library(tmp_path, sim):
    out = tmp_path / "e.json"
    assert run("estimate", "--data", sim, "--constant", 1, 1, "--out", out) == 0
    lib = estimate_effect(read_dataset(sim), ConstantPolicy(1, 1), 0.95)
    doc = read_json(out)
    assert doc["xi_hat"] == lib.xi_hat and doc["se"] == lib.se


def test_estimate_digest_mismatch(tmp_path, sim):
    coarse = tmp_path / "c.csv"
    assert run("coarsen", "--data", sim, "--constant", 0.5, 0.5, "--out", coarse) == 0
    out = tmp_path / "e.json"
    assert run("estimate", "--data", coarse, "--constant", 0.6, 0.5, "--out", out) == 5
    assert run("estimate", "--data", coarse, "--constant", 0.6, 0.5, "--force", "--out", out) == 0
    assert run("estimate", "--data", coarse, "--constant", 0.5, 0.5, "--out", out) == 0


def test_full_pipeline_converges(tmp_path):
    full, design, coarse, est = (tmp_path / f for f in ("f.csv", "d.json", "c.csv", "e.json"))
    assert run("simulate", "--n", 100_000, "--seed", 2, "--out", full) == 0
    assert run("design", "--from-model", "--mc-n", 5000, "--budget-ratio", 0.67, "--out", design) == 0
    assert run("coarsen", "--data", full, "--design", design, "--seed", 3, "--out", coarse) == 0
    assert run("estimate", "--data", coarse, "--design", design, "--out", est) == 0
    doc = read_json(est)
    assert abs(doc["xi_hat"] - 0.4) <= 4 * doc["se"]


# ---------------------------------------------------------------------------
# experiment and usage


def test_experiment_calibrate_smoke(tmp_path):
    out = tmp_path / "cal.csv"
    assert run("experiment", "calibrate", "--replications", 1, "--sizes", 100, "--out", out) == 0
    assert len(out.read_text().splitlines()) == 3
    assert read_manifest(out)["extra"]["config"]["replications"] == 1


def test_experiment_sensitivity_rows(tmp_path):
    out = tmp_path / "s.csv"
    assert run("experiment", "sensitivity", "--target", "beta_Mt", "--replications", 1,
               "--n", 300, "--out", out) == 0
    assert len(out.read_text().splitlines()) == 1 + 15


def test_unknown_subcommand_exits_usage(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["experiment", "bogus", "--out", "x"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "fddesign.cli", "oracle", "--fixture", "4", "1", "1",
                          "1", "--c0", "1", "--b0", "2", "--out", str(tmp_path / "o.json")],
                         capture_output=True, text=True)
    assert out.returncode == 0
    doc = read_json(tmp_path / "o.json")
    assert doc["design_var_inf"] == pytest.approx(9.0)
