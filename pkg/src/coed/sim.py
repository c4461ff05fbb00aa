"""Reparameterized simulation of the experiment.

Randomness enters only through standard-normal draws taken from per-sample
substreams, so a batch of samples is a deterministic function of
``(seed, keys, sample index)`` no matter how the batch is split up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, InvalidModelError, MatrixNormalPrior, SystemParams

NEG_EIG_TOL = 1e-10


@dataclass(frozen=True)
class NoiseBlock:
    W: np.ndarray

    @property
    def T(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class StateTrajectory:
    """States ``x_0 .. x_{T-1}`` as columns of ``X`` plus the terminal ``x_T``."""

    X: np.ndarray
    x_T: np.ndarray

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def full(self) -> np.ndarray:
        return np.column_stack([self.X, self.x_T])


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def psd_sqrt(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetric square root ``C`` with ``C @ C.T == M``; eigenvalues floored at 0."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -NEG_EIG_TOL * scale:
        raise InvalidModelError(f"{name} is not positive semidefinite (min eig {w[0]:.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def prior_factors(prior: MatrixNormalPrior) -> tuple[np.ndarray, np.ndarray]:
    """Row and column factors ``(C_r, C_c)`` with ``C_r C_r' = Sigma_w``, ``C_c C_c' = inv(Lambda0)``."""
    col_cov = np.linalg.inv(prior.col_precision)
    return psd_sqrt(prior.noise_cov, "noise_cov"), psd_sqrt(col_cov, "prior column covariance")


def sample_theta(prior: MatrixNormalPrior, rng: np.random.Generator) -> SystemParams:
    C_r, C_c = prior_factors(prior)
    E = rng.standard_normal(prior.mean.shape)
    return SystemParams.from_theta(prior.mean + C_r @ E @ C_c.T, prior.n_x)


def sample_noise(noise_cov: np.ndarray, T: int, rng: np.random.Generator) -> NoiseBlock:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    C = psd_sqrt(noise_cov, "noise_cov")
    return NoiseBlock(C @ rng.standard_normal((C.shape[0], T)))


def sample_batch(prior: MatrixNormalPrior, T: int, seed: int, keys: tuple[int, ...],
                 indices) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(Theta, W)`` for each sample index.

    Returns arrays of shape ``(L, n_x, n_z)`` and ``(L, n_x, T)``. Sample ``i``
    only depends on ``(seed, *keys, i)``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    n_x, n_z = prior.mean.shape
    E = np.empty((indices.size, n_x, n_z))
    V = np.empty((indices.size, n_x, T))
    for k, i in enumerate(indices):
        rng = substream(seed, *keys, i)
        E[k] = rng.standard_normal((n_x, n_z))
        V[k] = rng.standard_normal((n_x, T))
    C_r, C_c = prior_factors(prior)
    thetas = prior.mean + C_r @ E @ C_c.T
    W = C_r @ V
    return thetas, W


def rollout(theta: SystemParams, U: np.ndarray, W: NoiseBlock | np.ndarray,
            x0: np.ndarray) -> StateTrajectory:
    """Simulate ``x_{t+1} = A x_t + B u_t + w_t`` for ``t = 0 .. T-1``."""
    U = np.asarray(U, dtype=float)
    W = np.asarray(W.W if isinstance(W, NoiseBlock) else W, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if U.ndim != 2 or U.shape[0] != theta.n_u:
        raise InvalidModelError(f"U must be {theta.n_u} x T, got {U.shape}")
    if W.shape != (theta.n_x, U.shape[1]):
        raise InvalidModelError(f"W must be {theta.n_x} x {U.shape[1]}, got {W.shape}")
    if x0.shape != (theta.n_x,):
        raise InvalidModelError(f"x0 must have length {theta.n_x}, got {x0.shape}")
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(W)) and np.all(np.isfinite(x0))):
        raise InvalidModelError("rollout inputs must be finite")
    full = rollout_batch(theta.A[None], theta.B[None], U, W[None], x0)[0]
    return StateTrajectory(full[:, :-1], full[:, -1])


def rollout_batch(A: np.ndarray, B: np.ndarray, U: np.ndarray, W: np.ndarray,
                  x0: np.ndarray) -> np.ndarray:
    """Batched rollout; returns states ``x_0 .. x_T`` with shape ``(L, n_x, T+1)``.

    Unstable samples may overflow to inf; those are handled downstream.
    """
    L, n_x, T = W.shape
    X = np.empty((L, n_x, T + 1))
    X[:, :, 0] = x0
    drive = B @ U + W  # (L, n_x, T)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            X[:, :, t + 1] = np.einsum("lij,lj->li", A, X[:, :, t]) + drive[:, :, t]
    return X


def make_dataset(trajectory: StateTrajectory, U: np.ndarray) -> Dataset:
    """Single-run dataset: triples ``(x_{t+1}, x_t, u_t)`` for ``t = 0 .. T-1``."""
    U = np.asarray(U, dtype=float)
    if U.shape[1] != trajectory.T:
        raise InvalidModelError(
            f"U has {U.shape[1]} columns but trajectory has {trajectory.T} states")
    full = trajectory.full
    return Dataset(x_plus=full[:, 1:], x=full[:, :-1], u=U)
