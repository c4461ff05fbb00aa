import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coed.lqr import known_theta_cost
from coed.model import SystemParams
from coed.harness import (BETA_HEADER, PRESETS, PRIOR_HEADER, SCALING_HEADER, RunConfig,
                          build_problem, load_config, load_plan, main, parse_config,
                          rows_to_csv, run_beta_sweep, run_prior_sweep, run_scaling, save_plan,
                          serialize_config)

TINY = """
[run]
seed = 3

[problem]
n_cars = 2
N = 5
T = 5

[design]
eta0 = 0.1
baseline_eta0 = 100.0
decay = 0.9
batch = 8
max_iters = 3
grad_window = 2
grad_tol = 1e-9

[eval]
n_samples = 64

[sweep]
methods = coed, a_opt
betas = 1.0, 2.0
n_cars = 2, 3
prior_scales = 0.5, 1.0
"""


def drop_timing(text, column):
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r.pop(column)
    return rows


def test_preset_matches_published_setup():
    cfg = load_config(preset="paper-carstring")
    prior, spec = build_problem(cfg.problem)
    np.testing.assert_allclose(np.diag(np.linalg.inv(prior.col_precision)),
                               [0.1, 0.01, 0.05, 0.1, 0.01, 0.05, 0.1, 0.05])
    np.testing.assert_allclose(prior.noise_cov, 1e-2 * np.eye(5))
    np.testing.assert_allclose(spec.x0, [0, -4.3, 0, 2.1, 2.5])
    assert (cfg.problem.T, spec.N, cfg.design.batch, cfg.design.eta0) == (20, 30, 1000, 0.01)
    assert (cfg.design.alpha1, cfg.design.alpha2) == (1e3, 1e6)


def test_config_round_trip():
    for text in (TINY, *PRESETS.values()):
        cfg = parse_config(text)
        once = serialize_config(cfg)
        assert parse_config(once) == cfg
        assert serialize_config(parse_config(once)) == once


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63), beta=st.floats(1e-3, 1e3),
       betas=st.lists(st.floats(0, 1e3), min_size=1, max_size=5),
       relative=st.booleans())
def test_config_round_trip_property(seed, beta, betas, relative):
    cfg = RunConfig(seed=seed)
    cfg.design.beta = beta
    cfg.design.relative_tol = relative
    cfg.sweep.betas = tuple(betas)
    assert parse_config(serialize_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[design]\nfoo = 1\n",
    "[design]\nmethod = d_opt\n",
    "[problem]\nn_cars = 3\nmasses = 1, 2\n",
    "[eval]\nn_samples = 1\n",
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_beta_sweep_rows_and_determinism():
    cfg = parse_config(TINY)
    text = rows_to_csv(run_beta_sweep(cfg), BETA_HEADER)
    assert text.splitlines()[0] == ",".join(BETA_HEADER)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [r["method"] for r in rows] == ["lower_bound", "no_experiment",
                                           "coed", "a_opt", "coed", "a_opt"]
    lower = float(rows[0]["mean_cost"])
    assert all(float(r["mean_cost"]) >= lower for r in rows)
    again = rows_to_csv(run_beta_sweep(cfg, parallel=True), BETA_HEADER)
    assert drop_timing(text, "seconds") == drop_timing(again, "seconds")


def test_zero_budget_matches_no_experiment():
    cfg = parse_config(TINY)
    cfg.sweep.betas = (0.0,)
    cfg.sweep.methods = ("coed",)
    cfg.eval.n_samples = 2000
    rows = run_beta_sweep(cfg)
    ref, coed = rows[1], rows[2]
    assert coed["u_norm"] == 0.0
    assert abs(coed["mean_cost"] - ref["mean_cost"]) <= coed["ci95"] + ref["ci95"]


def test_scaling_rows():
    cfg = parse_config(TINY)
    rows = run_scaling(cfg)
    text = rows_to_csv(rows, SCALING_HEADER)
    assert text.splitlines()[0] == ",".join(SCALING_HEADER)
    assert [r["n_x"] for r in rows] == [3, 5]
    assert all(r["norm_final_objective"] >= 1.0 for r in rows)
    again = rows_to_csv(run_scaling(cfg), SCALING_HEADER)
    assert drop_timing(text, "grad_sample_ms") == drop_timing(again, "grad_sample_ms")


def test_prior_sweep_rows():
    cfg = parse_config(TINY)
    rows = run_prior_sweep(cfg)
    assert rows_to_csv(rows, PRIOR_HEADER).splitlines()[0] == ",".join(PRIOR_HEADER)
    assert rows[0]["prior_trace"] < rows[1]["prior_trace"]
    for r in rows:
        assert r["p5"] <= r["mean_cost"] <= r["p95"]
    assert rows == run_prior_sweep(cfg)


def test_point_prior_sweep_reaches_known_cost():
    cfg = parse_config(TINY)
    cfg.sweep.prior_scales = (1e-12,)
    row = run_prior_sweep(cfg)[0]
    prior, spec = build_problem(cfg.problem)
    best = known_theta_cost(SystemParams.from_theta(prior.mean, prior.n_x), spec)
    assert row["mean_cost"] == pytest.approx(best, rel=1e-6)


def test_plan_file_round_trip(tmp_path, rng):
    U = rng.standard_normal((3, 7))
    save_plan(tmp_path / "U.csv", U)
    assert np.array_equal(load_plan(tmp_path / "U.csv"), U)
    assert len((tmp_path / "U.csv").read_text().splitlines()) == 3


def test_cli_design_and_evaluate(tmp_path, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["design", "--config", str(cfg), "--out", str(tmp_path), "--beta", "1.5"]) == 0
    U = load_plan(tmp_path / "U.csv")
    assert U.shape == (2, 5)
    assert np.linalg.norm(U) <= 1.5
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "iter,grad_norm,u_norm,eta,elapsed_s" and len(trace) == 4
    capsys.readouterr()
    assert main(["evaluate", str(tmp_path / "U.csv"), "--config", str(cfg)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "mean_cost,ci95,u_norm"
    assert float(out[1].split(",")[2]) == pytest.approx(np.linalg.norm(U))


def test_cli_sweeps_write_files(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY.replace("betas = 1.0, 2.0", "betas = 1.0"))
    for cmd, name in (("sweep-beta", "beta_sweep.csv"), ("scaling", "scaling.csv"),
                      ("prior-sweep", "prior_sweep.csv")):
        assert main([cmd, "--config", str(cfg), "--out", str(tmp_path), "--seed", "5"]) == 0
        assert (tmp_path / name).exists()


def test_cli_seed_override_changes_design(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    main(["design", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["design", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "1"])
    main(["design", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "2"])
    a, b, c = (load_plan(tmp_path / d / "U.csv") for d in "abc")
    assert np.array_equal(a, b) and not np.array_equal(a, c)
