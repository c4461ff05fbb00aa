"""A- and L-optimal experiment design on the same projected-SGD machinery.

Both minimize ``E[(theta_hat - theta)' H (theta_hat - theta)]`` over column-
stacked parameter vectors; A-optimal uses ``H = I``, L-optimal uses the
(shifted) Hessian of the control optimality gap at the prior mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .designer import DesignConfig, DesignError, initial_plan, sgd
from .grad import ALPHA1, ALPHA2, sample_objective_batch
from .lqr import cost_from_values, known_theta_cost_batch, lyapunov_batch, riccati_batch
from .model import LqrSpec, MatrixNormalPrior, SystemParams
from .sim import NoiseBlock


@dataclass(frozen=True)
class WeightSpec:
    kind: str                 # "A" or "L"
    H: np.ndarray
    mu_floor: float = 1e-8
    mu: float = 0.0           # shift actually applied
    raw_hessian: np.ndarray | None = None


def a_optimal_weight(prior: MatrixNormalPrior) -> WeightSpec:
    return WeightSpec("A", np.eye(prior.n_x * prior.n_z))


@dataclass(frozen=True)
class ParameterErrorObjective:
    """``e' H e`` with ``e = vec(Theta_hat - Theta)`` (column stacking)."""

    H: np.ndarray

    def values(self, thetas, theta_hat):
        e = _vec_batch(theta_hat - thetas)
        return np.einsum("lp,pq,lq->l", e, self.H, e)

    def __call__(self, thetas, theta_hat):
        e = _vec_batch(theta_hat - thetas)
        He = e @ self.H.T
        values = np.einsum("lp,lp->l", e, He)
        grad_vec = He + e @ self.H  # H need not be exactly symmetric
        L, n_x, n_z = thetas.shape
        return values, grad_vec.reshape(L, n_z, n_x).transpose(0, 2, 1)


def _vec_batch(M: np.ndarray) -> np.ndarray:
    return M.transpose(0, 2, 1).reshape(M.shape[0], -1)


def baseline_objective_sample(prior: MatrixNormalPrior, theta_sample: SystemParams, W, U,
                              weight: WeightSpec, alpha1: float = ALPHA1,
                              alpha2: float = ALPHA2, x0=None) -> float:
    W = np.asarray(W.W if isinstance(W, NoiseBlock) else W, dtype=float)
    v, _ = sample_objective_batch(prior, theta_sample.theta[None], W[None],
                                  np.asarray(U, float), ParameterErrorObjective(weight.H),
                                  alpha1, alpha2, x0, with_grad=False)
    return float(v[0])


def baseline_sample_gradient(prior: MatrixNormalPrior, theta_sample: SystemParams, W, U,
                             weight: WeightSpec, alpha1: float = ALPHA1,
                             alpha2: float = ALPHA2, x0=None) -> np.ndarray:
    W = np.asarray(W.W if isinstance(W, NoiseBlock) else W, dtype=float)
    _, g = sample_objective_batch(prior, theta_sample.theta[None], W[None],
                                  np.asarray(U, float), ParameterErrorObjective(weight.H),
                                  alpha1, alpha2, x0)
    return g[0]


def optimality_gap_batch(thetas: np.ndarray, gains: np.ndarray, spec: LqrSpec) -> np.ndarray:
    """``J(K; theta) - min_K J(K; theta)`` for a stack of parameter matrices."""
    n_x = spec.n_x
    A, B = thetas[:, :, :n_x], thetas[:, :, n_x:]
    J = cost_from_values(lyapunov_batch(A, B, gains, spec), spec)
    return J - known_theta_cost_batch(A, B, spec)


def fd_hessian(f, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central second differences of a batched scalar function ``f(X) -> (L,)``."""
    n = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    E = np.diag(h)
    pts = [x[None]]
    pts += [x + E, x - E]
    iu, ju = np.triu_indices(n, 1)
    for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        pts.append(x + si * E[iu] + sj * E[ju])
    vals = f(np.concatenate(pts))
    f0 = vals[0]
    fp, fm = vals[1:1 + n], vals[1 + n:1 + 2 * n]
    m = iu.size
    fpp, fpm, fmp, fmm = (vals[1 + 2 * n + k * m:1 + 2 * n + (k + 1) * m] for k in range(4))
    H = np.diag((fp - 2 * f0 + fm) / h ** 2)
    off = (fpp - fpm - fmp + fmm) / (4 * h[iu] * h[ju])
    H[iu, ju] = off
    H[ju, iu] = off
    return H


def l_optimal_weight(prior: MatrixNormalPrior, spec: LqrSpec, policy_gains=None,
                     mu_floor: float = 1e-8, rel_step: float = 1e-4) -> WeightSpec:
    """Hessian of the optimality gap of the prior-mean CE policy, shifted to be PSD."""
    n_x, n_z = prior.n_x, prior.n_z
    if policy_gains is None:
        K, _ = riccati_batch(prior.mean[None, :, :n_x], prior.mean[None, :, n_x:], spec)
        policy_gains = K[0]
    gains = np.asarray(policy_gains, dtype=float)

    def gap(vecs):
        thetas = vecs.reshape(-1, n_z, n_x).transpose(0, 2, 1)
        return optimality_gap_batch(thetas, gains, spec)

    raw = fd_hessian(gap, prior.mean.reshape(-1, order="F"), rel_step)
    if not np.all(np.isfinite(raw)):
        raise DesignError("non-finite entries in the optimality-gap Hessian")
    H = 0.5 * (raw + raw.T)
    I = np.eye(H.shape[0])
    mu = max(0.0, -float(np.linalg.eigvalsh(H)[0])) + mu_floor
    # eigenvalue round-off scales with ||H||; top up until the computed minimum clears the floor
    for _ in range(20):
        low = float(np.linalg.eigvalsh(H + mu * I)[0])
        if low >= mu_floor:
            break
        mu += (mu_floor - low) + np.finfo(float).eps * np.abs(H).max()
    return WeightSpec("L", H + mu * I, mu_floor, mu, raw)


def make_weight(kind: str, prior: MatrixNormalPrior, spec: LqrSpec,
                mu_floor: float = 1e-8) -> WeightSpec:
    kind = kind.upper().removesuffix("_OPT")
    if kind == "A":
        return a_optimal_weight(prior)
    if kind == "L":
        return l_optimal_weight(prior, spec, mu_floor=mu_floor)
    raise ValueError(f"unknown weight kind {kind!r}")


def design_baseline(prior: MatrixNormalPrior, spec: LqrSpec, config: DesignConfig,
                    weight_kind: str | WeightSpec, U0: np.ndarray | None = None,
                    T: int | None = None, x0=None, callback=None):
    """A-/L-optimal design; the weight is computed once and held fixed."""
    weight = (weight_kind if isinstance(weight_kind, WeightSpec)
              else make_weight(weight_kind, prior, spec))
    if U0 is None:
        if T is None:
            raise DesignError("either U0 or the experiment horizon T is required")
        U0 = initial_plan(prior.n_u, T, config.seed)
    return sgd(prior, ParameterErrorObjective(weight.H), config, U0, x0, callback)
