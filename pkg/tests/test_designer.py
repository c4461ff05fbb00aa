import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coed.designer import (TRACE_HEADER, DesignConfig, DesignError, DesignTrace, TraceRecord,
                           design, evaluate_objective, initial_plan, project, reference_costs,
                           sample_costs)
from coed.grad import pathwise_estimate
from coed.model import LqrSpec, MatrixNormalPrior, car_string_lqr, car_string_prior


def scalar_problem():
    # parameter standard deviation ~0.3, so identification matters
    prior = MatrixNormalPrior.from_col_covariance(np.array([[0.9, 0.5]]), np.diag([10.0, 10.0]),
                                                  np.array([[0.01]]))
    spec = LqrSpec(Q=[[1.0]], Q_N=[[1.0]], R=[[1.0]], N=3, x0=[1.0], noise_cov=[[0.01]])
    return prior, spec


def test_project_inside_unchanged():
    U = np.array([[0.3, 0.4]])
    np.testing.assert_array_equal(project(U, 1.0), U)


def test_project_scales_to_boundary():
    U = np.array([[3.0, 4.0], [0.0, 0.0]])
    P = project(U, 2.5)
    assert np.linalg.norm(P) <= 2.5
    assert np.linalg.norm(P) == pytest.approx(2.5, rel=1e-15)
    np.testing.assert_allclose(P / np.linalg.norm(P), U / 5.0, rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(U=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                elements=st.floats(-1e6, 1e6)),
       beta=st.floats(1e-6, 1e3))
def test_project_idempotent_and_feasible(U, beta):
    P = project(U, beta)
    assert np.linalg.norm(P) <= beta
    assert np.array_equal(project(P, beta), P)


def test_project_zero_budget():
    np.testing.assert_array_equal(project(np.ones((2, 2)), 0.0), 0.0)


def test_initial_plan_range_and_determinism():
    U = initial_plan(3, 20, seed=4)
    assert U.shape == (3, 20)
    assert np.all((U >= 1e-3) & (U <= 1e-2))
    assert np.array_equal(U, initial_plan(3, 20, seed=4))
    assert np.linalg.norm(initial_plan(3, 20, seed=4, beta=1e-3)) <= 1e-3


@pytest.mark.parametrize("kwargs", [
    dict(beta=-1.0), dict(beta=1.0, eta0=0.0), dict(beta=1.0, decay=1.5),
    dict(beta=1.0, batch=0), dict(beta=1.0, max_iters=10, grad_window=20),
    dict(beta=1.0, grad_tol=0.0),
])
def test_config_validation(kwargs):
    with pytest.raises(DesignError):
        DesignConfig(**kwargs).validate()


def test_trace_rejects_non_monotone_iterations():
    tr = DesignTrace()
    tr.append(TraceRecord(1, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        tr.append(TraceRecord(1, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0))
    assert tr.to_csv().splitlines()[0] == ",".join(TRACE_HEADER)


def test_infinite_tolerance_stops_after_one_step():
    prior, spec = car_string_prior(3), car_string_lqr(3, N=5)
    cfg = DesignConfig(beta=2.0, eta0=0.05, batch=16, max_iters=50, grad_window=5,
                       grad_tol=math.inf, seed=3)
    U0 = initial_plan(3, 5, seed=3)
    U1, trace = design(prior, spec, cfg, U0)
    assert trace.iterations == 1 and trace.converged
    from coed.designer import DESIGN_TAG
    g, _ = pathwise_estimate(prior, U0, spec, 16, seed=3, keys=(DESIGN_TAG, 0))
    np.testing.assert_array_equal(U1, project(U0 - 0.05 * g, 2.0))


def test_design_requires_horizon():
    prior, spec = scalar_problem()
    with pytest.raises(DesignError):
        design(prior, spec, DesignConfig(beta=1.0))


def test_design_iterates_stay_feasible_and_reproduce():
    prior, spec = car_string_prior(3), car_string_lqr(3, N=5)
    cfg = DesignConfig(beta=3.0, eta0=0.5, decay=0.98, batch=32, max_iters=15, grad_window=5,
                       grad_tol=1e-12, seed=9)
    norms = []
    U, trace = design(prior, spec, cfg, T=5, callback=lambda r, V: norms.append(r.u_norm))
    assert max(norms) <= 3.0
    assert [r.iteration for r in trace.records] == list(range(1, 16))
    U2, trace2 = design(prior, spec, cfg, T=5)
    assert np.array_equal(U, U2)
    strip = lambda t: [(r.iteration, r.grad_norm, r.u_norm, r.eta) for r in t.records]
    assert strip(trace) == strip(trace2)
    cfg.workers = 3
    U3, trace3 = design(prior, spec, cfg, T=5)
    assert np.array_equal(U, U3) and strip(trace) == strip(trace3)


def test_design_improves_scalar_objective():
    prior, spec = scalar_problem()
    cfg = DesignConfig(beta=1.0, eta0=0.5, decay=0.99, batch=256, max_iters=150, seed=1)
    U0 = initial_plan(1, 3, seed=1)
    U, _ = design(prior, spec, cfg, U0)
    c0 = sample_costs(prior, U0, spec, 10_000, seed=5)
    c1 = sample_costs(prior, U, spec, 10_000, seed=5)
    d = c1 - c0
    assert d.mean() + 1.96 * d.std(ddof=1) / np.sqrt(d.size) < 0


def test_active_budget_on_car_string():
    prior, spec = car_string_prior(3), car_string_lqr(3)
    cfg = DesignConfig(beta=5.0, eta0=1.0, decay=0.99, batch=64, max_iters=40, grad_window=10,
                       seed=2)
    U, _ = design(prior, spec, cfg, T=20)
    assert abs(np.linalg.norm(U) - 5.0) <= 1e-9 * 5.0


def test_evaluate_objective_needs_two_samples():
    prior, spec = scalar_problem()
    with pytest.raises(ValueError):
        evaluate_objective(prior, np.ones((1, 3)), spec, 1, seed=0)


def test_evaluate_deterministic_and_zero_width_for_point_prior():
    prior, spec = scalar_problem()
    U = np.ones((1, 3))
    assert evaluate_objective(prior, U, spec, 100, 7) == evaluate_objective(prior, U, spec, 100, 7)
    point = MatrixNormalPrior(np.array([[0.9, 0.5]]), 1e16 * np.eye(2), np.array([[1e-16]]))
    spec0 = LqrSpec(Q=[[1.0]], Q_N=[[1.0]], R=[[1.0]], N=3, x0=[1.0], noise_cov=[[0.0]])
    mean, ci = evaluate_objective(point, U, spec0, 50, 1)
    assert ci <= 1e-6 * mean


def test_costs_bracketed_by_references():
    prior, spec = car_string_prior(3), car_string_lqr(3)
    U = initial_plan(3, 20, seed=0, beta=None) * 200
    costs = sample_costs(prior, U, spec, 500, seed=3)
    lower, _ = reference_costs(prior, spec, 500, seed=3)
    assert np.all(costs >= lower * (1 - 1e-9))


def test_finite_tolerance_waits_for_full_window():
    prior, spec = scalar_problem()
    cfg = DesignConfig(beta=1.0, eta0=0.1, batch=8, max_iters=30, grad_window=7, grad_tol=1e6,
                       relative_tol=False, seed=2)
    _, trace = design(prior, spec, cfg, T=3)
    assert trace.iterations == 7 and trace.converged
