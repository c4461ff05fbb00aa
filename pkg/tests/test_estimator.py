import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coed.estimator import posterior, posterior_batch, weight, weight_matrix
from coed.model import Dataset, MatrixNormalPrior, car_string_prior
from coed.sim import make_dataset, rollout, sample_batch

from conftest import random_system

A1, A2 = 1e3, 1e6


def test_weight_at_threshold_is_half():
    assert weight(np.array([3.0, 4.0]), 5.0, 2.0) == pytest.approx(0.5)


def test_weight_limits():
    assert weight(np.array([1e12]), A1, A2) < 1e-12
    assert weight(np.zeros(3), A1, A2) == pytest.approx(1.0, abs=1e-9)


def test_weight_monotone_non_increasing():
    r = np.linspace(0, 3e3, 2001)
    w = [weight(np.array([v]), A1, 1e-2) for v in r]
    assert np.all(np.diff(w) <= 0)
    assert all(0 <= v <= 1 for v in w)


def test_weight_rejects_bad_alpha2():
    with pytest.raises(ValueError):
        weight(np.zeros(2), 1.0, 0.0)


def test_weight_matrix_cases():
    S = weight_matrix(np.full((3, 4), 0.1), A1, A2)
    np.testing.assert_allclose(S, np.eye(4), atol=1e-9)
    X = np.zeros((2, 3))
    X[0, 1] = 1e9
    S = weight_matrix(X, A1, A2)
    assert S[1, 1] <= 1e-6
    assert weight_matrix(np.zeros((2, 0)), A1, A2).shape == (0, 0)


def test_empty_dataset_returns_prior(rng):
    prior = MatrixNormalPrior(rng.standard_normal((2, 3)), np.diag([1.0, 2.0, 3.0]), np.eye(2))
    d = Dataset(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((1, 0)))
    post = posterior(prior, d, A1, A2)
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-14)
    np.testing.assert_allclose(post.col_precision, prior.col_precision)


def test_noiseless_rich_data_matches_least_squares(rng):
    theta = random_system(rng, 3, 2, radius=0.8)
    prior = MatrixNormalPrior(np.zeros((3, 5)), 1e-6 * np.eye(5), np.eye(3))
    U = rng.standard_normal((2, 200))
    W = 1e-6 * rng.standard_normal((3, 200))  # covariance 1e-12 I
    d = make_dataset(rollout(theta, U, W, np.zeros(3)), U)
    post = posterior(prior, d, A1, A2)
    ols = np.linalg.lstsq(d.Z.T, d.x_plus.T, rcond=None)[0].T
    assert np.linalg.norm(post.mean - theta.theta) <= 1e-3
    np.testing.assert_allclose(post.mean, ols, atol=1e-6)


def small_prior():
    """Two states, one input, correlated noise."""
    return MatrixNormalPrior.from_col_covariance(
        np.array([[0.9, 0.2, 0.5], [-0.1, 0.8, 1.0]]), np.diag([0.2, 0.1, 0.3]),
        np.array([[0.05, 0.02], [0.02, 0.03]]))


def error_covariance_experiment(prior, M=40, trials=2000, seed=0):
    """Monte-Carlo covariance of vec(Theta_hat - Theta) with an exogenous regressor block."""
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((prior.n_z, M))
    thetas, _ = sample_batch(prior, 1, seed, (99,), np.arange(trials))
    W = np.linalg.cholesky(prior.noise_cov) @ rng.standard_normal((trials, prior.n_x, M))
    errs = []
    for Th, Wk in zip(thetas, W):
        xp = Th @ Z + Wk
        post = posterior(prior, Dataset(xp, Z[:prior.n_x], Z[prior.n_x:]), A1, A2)
        errs.append((post.mean - Th).reshape(-1, order="F"))
    emp = np.cov(np.array(errs).T)
    return emp, post.error_covariance()


def test_error_covariance_law():
    emp, law = error_covariance_experiment(small_prior())
    assert np.linalg.norm(emp - law) / np.linalg.norm(law) < 0.10


@pytest.mark.slow
def test_error_covariance_law_car_string():
    # 40 free entries need more trials before sampling error drops under 10%
    emp, law = error_covariance_experiment(car_string_prior(3), trials=20_000)
    assert np.linalg.norm(emp - law) / np.linalg.norm(law) < 0.10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(0, 15))
def test_posterior_properties(seed, M):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((4, 4))
    prior = MatrixNormalPrior(rng.standard_normal((2, 4)), G @ G.T + np.eye(4), np.eye(2))
    d = Dataset(rng.standard_normal((2, M)), 3 * rng.standard_normal((2, M)),
                rng.standard_normal((2, M)))
    post = posterior(prior, d, A1, A2)
    # Lambda_n - Lambda_0 is PSD
    assert np.linalg.eigvalsh(post.col_precision - prior.col_precision)[0] >= -1e-9
    # permutation equivariance
    perm = rng.permutation(M)
    d2 = Dataset(d.x_plus[:, perm], d.x[:, perm], d.u[:, perm])
    post2 = posterior(prior, d2, A1, A2)
    np.testing.assert_allclose(post2.mean, post.mean, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(post2.col_precision, post.col_precision, rtol=1e-12, atol=1e-9)


def test_vanishing_weights_recover_prior_mean(rng):
    prior = MatrixNormalPrior(rng.standard_normal((2, 3)), np.eye(3), np.eye(2))
    d = Dataset(rng.standard_normal((2, 6)), rng.standard_normal((2, 6)),
                rng.standard_normal((1, 6)))
    # alpha1 far below the state norms drives every weight to ~0
    post = posterior(prior, d, -1e6, 1e6)
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-9)


def test_batch_posterior_matches_single(rng):
    prior = car_string_prior(3)
    thetas, W = sample_batch(prior, 20, 1, (0,), np.arange(3))
    U = rng.standard_normal((3, 20))
    from coed.sim import rollout_batch
    X = rollout_batch(thetas[:, :, :5], thetas[:, :, 5:], U, W, np.zeros(5))
    est = posterior_batch(prior, X, U, A1, A2)
    for k in range(3):
        d = Dataset(X[k, :, 1:], X[k, :, :-1], U)
        np.testing.assert_allclose(est.theta_hat[k], posterior(prior, d, A1, A2).mean,
                                   rtol=1e-10, atol=1e-12)


def test_exploded_states_are_dropped(rng):
    prior = MatrixNormalPrior(np.zeros((2, 3)), np.eye(3), np.eye(2))
    x = rng.standard_normal((2, 5))
    xp = rng.standard_normal((2, 5))
    u = rng.standard_normal((1, 5))
    xp_bad = xp.copy()
    xp_bad[0, 4] = np.inf
    x_bad = x.copy()
    x_bad[1, 3] = np.nan
    post = posterior(prior, Dataset(xp_bad, x_bad, u), A1, A2)
    ref = posterior(prior, Dataset(xp[:, :3], x[:, :3], u[:, :3]), A1, A2)
    assert np.all(np.isfinite(post.mean))
    np.testing.assert_allclose(post.mean, ref.mean, atol=1e-12)
