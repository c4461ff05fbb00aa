"""Weighted Bayesian (matrix-normal) identification of ``Theta = [A, B]``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import spd_solve, sym
from .model import Dataset, InvalidModelError, MatrixNormalPrior

# States beyond this magnitude (or non-finite) are treated as exploded.
SENTINEL = 1e30


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    col_precision: np.ndarray
    noise_cov: np.ndarray

    def error_covariance(self) -> np.ndarray:
        """Covariance of ``vectorize(Theta_hat - Theta)``: ``kron(inv(Lambda_n), Sigma_w)``."""
        return np.kron(np.linalg.inv(self.col_precision), self.noise_cov)


def weight(x, alpha1: float, alpha2: float) -> float:
    """Down-weight large states: ``0.5 - arctan((|x| - alpha1) * alpha2) / pi``."""
    if not alpha2 > 0:
        raise ValueError(f"alpha2 must be positive, got {alpha2}")
    r = float(np.linalg.norm(np.asarray(x, dtype=float)))
    return 0.5 - np.arctan((r - alpha1) * alpha2) / np.pi


def weights_from_norms(r: np.ndarray, alpha1: float, alpha2: float) -> np.ndarray:
    return 0.5 - np.arctan((r - alpha1) * alpha2) / np.pi


def weight_slope(r: np.ndarray, alpha1: float, alpha2: float) -> np.ndarray:
    """Derivative of the weight with respect to the state norm."""
    return -alpha2 / (np.pi * (1.0 + ((r - alpha1) * alpha2) ** 2))


def weight_matrix(X: np.ndarray, alpha1: float, alpha2: float) -> np.ndarray:
    """Diagonal matrix of per-column weights of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InvalidModelError(f"X must be 2-dimensional, got {X.shape}")
    if not alpha2 > 0:
        raise ValueError(f"alpha2 must be positive, got {alpha2}")
    r = np.linalg.norm(np.nan_to_num(X, nan=SENTINEL, posinf=SENTINEL, neginf=-SENTINEL),
                       axis=0)
    return np.diag(weights_from_norms(np.minimum(r, SENTINEL), alpha1, alpha2))


def posterior(prior: MatrixNormalPrior, data: Dataset, alpha1: float,
              alpha2: float) -> Posterior:
    """Weighted posterior mean ``Theta_hat`` and column precision ``Lambda_n``."""
    if data.x.shape[0] != prior.n_x or data.u.shape[0] != prior.n_u:
        raise InvalidModelError("dataset dimensions do not match the prior")
    valid = _valid_columns(data.x[None], data.x_plus[None])[0]
    x = np.where(valid, data.x, 0.0)
    xp = np.where(valid, data.x_plus, 0.0)
    r = np.linalg.norm(x, axis=0)
    s = np.where(valid, weights_from_norms(r, alpha1, alpha2), 0.0)
    Z = np.vstack([x, data.u])
    lam_n = sym(prior.col_precision + (Z * s) @ Z.T)
    psi = prior.mean @ prior.col_precision + (xp * s) @ Z.T
    theta_hat = spd_solve(lam_n, psi.T).T
    return Posterior(theta_hat, lam_n, prior.noise_cov)


def _valid_columns(x: np.ndarray, x_plus: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        ok_x = np.all(np.isfinite(x), axis=-2) & (np.max(np.abs(x), axis=-2, initial=0) < SENTINEL)
        ok_p = (np.all(np.isfinite(x_plus), axis=-2)
                & (np.max(np.abs(x_plus), axis=-2, initial=0) < SENTINEL))
    return ok_x & ok_p


@dataclass
class BatchEstimate:
    """Posterior means for a batch of single-run datasets plus the pieces
    the input-gradient code reuses."""

    theta_hat: np.ndarray  # (L, n_x, n_z)
    lam_n: np.ndarray      # (L, n_z, n_z)
    Z: np.ndarray          # (L, n_z, T), exploded columns zeroed
    Y: np.ndarray          # (L, n_x, T), exploded columns zeroed
    s: np.ndarray          # (L, T)
    r: np.ndarray          # (L, T) state norms
    valid: np.ndarray      # (L, T) bool


def posterior_batch(prior: MatrixNormalPrior, X_full: np.ndarray, U: np.ndarray,
                    alpha1: float, alpha2: float) -> BatchEstimate:
    """Posterior for each trajectory in ``X_full`` (shape ``(L, n_x, T+1)``).

    Transitions touching an exploded state get weight exactly zero so that
    inf/NaN never reaches the regression.
    """
    L, n_x, T1 = X_full.shape
    T = T1 - 1
    x, xp = X_full[:, :, :-1], X_full[:, :, 1:]
    valid = _valid_columns(x, xp)
    x = np.where(valid[:, None, :], x, 0.0)
    xp = np.where(valid[:, None, :], xp, 0.0)
    r = np.linalg.norm(x, axis=1)
    s = np.where(valid, weights_from_norms(r, alpha1, alpha2), 0.0)
    Z = np.concatenate([x, np.broadcast_to(U, (L,) + U.shape)], axis=1)
    Zs = Z * s[:, None, :]
    lam_n = sym(prior.col_precision + Zs @ np.swapaxes(Z, 1, 2))
    psi = prior.mean @ prior.col_precision + xp @ np.swapaxes(Zs, 1, 2)
    theta_hat = np.swapaxes(spd_solve(lam_n, np.swapaxes(psi, 1, 2)), 1, 2)
    return BatchEstimate(theta_hat, lam_n, Z, xp, s, r, valid)
