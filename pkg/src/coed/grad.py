"""Analytic per-sample gradients and the pathwise Monte-Carlo estimator.

The per-sample objective is the chain

    U -> states X = g(W, theta; U) -> Theta_hat(X, U) -> CE gains K(Theta_hat)
      -> J(K; theta)

Two routes compute its derivative. The explicit route materializes the three
Jacobians ``dJ/dK``, ``dK/dTheta_hat`` and ``dTheta_hat/dU`` and contracts
them. The batched route pushes the same chain backwards as adjoints, which is
what the SGD loop uses; the test-suite checks the two against each other and
against finite differences.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .estimator import BatchEstimate, posterior_batch, weight_slope
from .linalg import spd_solve, sym
from .lqr import PolicyGains, ce_gains, cost_from_values, lyapunov_batch, riccati_batch
from .model import LqrSpec, MatrixNormalPrior, SystemParams
from .sim import NoiseBlock, rollout_batch, sample_batch

ALPHA1 = 1e3
ALPHA2 = 1e6


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, sample_index: int, message: str = "non-finite sample gradient"):
        super().__init__(f"{message} (sample {sample_index})")
        self.sample_index = sample_index


@dataclass(frozen=True)
class SampleGradient:
    dJ_dU: np.ndarray  # (n_u, T)


def _t(M):
    return np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# dJ/dK


def state_moments_batch(A, B, K, spec: LqrSpec) -> np.ndarray:
    """Closed-loop second moments ``E[x_t x_t']`` for ``t = 0 .. N-1``."""
    L = A.shape[0]
    S = np.empty((L, spec.N, spec.n_x, spec.n_x))
    S[:, 0] = np.outer(spec.x0, spec.x0)
    for t in range(spec.N - 1):
        Acl = A + B @ K[:, t]
        S[:, t + 1] = sym(Acl @ S[:, t] @ _t(Acl) + spec.noise_cov)
    return S


def dJ_dK_batch(A, B, K, P, spec: LqrSpec) -> np.ndarray:
    """``dJ/dK_t = 2 [(R + B'P_{t+1}B) K_t + B'P_{t+1}A] E[x_t x_t']``.

    ``P`` are the value matrices of ``K`` on the *true* system ``(A, B)``.
    """
    S = state_moments_batch(A, B, K, spec)
    Pn = P[:, 1:]
    Bt = _t(B)[:, None]
    lhs = (spec.R + Bt @ Pn @ B[:, None]) @ K + Bt @ Pn @ A[:, None]
    return 2.0 * lhs @ S


def dJ_dK(theta_true: SystemParams, policy: PolicyGains, spec: LqrSpec) -> np.ndarray:
    """Gradient of the exact cost with respect to each gain, shape ``(N, n_u, n_x)``."""
    A, B, K = theta_true.A[None], theta_true.B[None], policy.gains[None]
    P = lyapunov_batch(A, B, K, spec)
    return dJ_dK_batch(A, B, K, P, spec)[0]


# ---------------------------------------------------------------------------
# dK/dTheta_hat


def dK_dTheta_hat(theta_hat: SystemParams, spec: LqrSpec) -> np.ndarray:
    """Sensitivity of every CE gain entry to every entry of ``[A_hat, B_hat]``.

    Returns ``D`` with ``D[t, q, r, m, n] = dK_t[q, r] / dTheta_hat[m, n]``,
    propagated jointly with ``dP_t`` backwards from ``dP_N = 0``.
    """
    A, B = theta_hat.A, theta_hat.B
    n_x, n_u, N = spec.n_x, spec.n_u, spec.N
    n_z = n_x + n_u
    n_p = n_x * n_z
    dTheta = np.eye(n_p).reshape(n_p, n_x, n_z)
    dA, dB = dTheta[:, :, :n_x], dTheta[:, :, n_x:]

    K, P = riccati_batch(A[None], B[None], spec)
    K, P = K[0], P[0]
    dK = np.empty((N, n_p, n_u, n_x))
    dP = np.zeros((n_p, n_x, n_x))
    for t in range(N - 1, -1, -1):
        Pn, Kt = P[t + 1], K[t]
        M = spec.R + B.T @ Pn @ B
        Acl = A + B @ Kt
        dM = _t(dB) @ Pn @ B + B.T @ dP @ B + B.T @ Pn @ dB
        rhs = dM @ Kt + _t(dB) @ Pn @ A + B.T @ dP @ A + B.T @ Pn @ dA
        dKt = -spd_solve(np.broadcast_to(M, (n_p, n_u, n_u)), rhs)
        # K_t stationary => the dK terms cancel up to round-off; kept for exactness
        stat = spec.R @ Kt + B.T @ Pn @ Acl
        cross = _t(dKt) @ stat + _t(dA + dB @ Kt) @ Pn @ Acl
        dP = cross + _t(cross) + Acl.T @ dP @ Acl
        dK[t] = dKt
    return np.moveaxis(dK, 1, 3).reshape(N, n_u, n_x, n_x, n_z)


def riccati_adjoint_batch(A, B, K, P, K_bar, spec: LqrSpec) -> np.ndarray:
    """Pull ``dJ/dK`` back through the CE Riccati recursion to ``dJ/dTheta_hat``.

    ``A, B, K, P`` are the estimate and its Riccati solution; returns an array
    of shape ``(L, n_x, n_x + n_u)``.
    """
    L = A.shape[0]
    A_bar = np.zeros_like(A)
    B_bar = np.zeros_like(B)
    P_bar = np.zeros((L, spec.n_x, spec.n_x))  # adjoint of P_t; P_0 unused by J
    R = spec.R
    for t in range(spec.N):
        Pn, Kt = P[:, t + 1], K[:, t]
        Acl = A + B @ Kt
        # P_t = Q + K'RK + Acl' Pn Acl
        Kb = K_bar[:, t] + 2.0 * (R @ Kt + _t(B) @ Pn @ Acl) @ P_bar
        Pn_bar = Acl @ P_bar @ _t(Acl)
        G = 2.0 * Pn @ Acl @ P_bar
        A_bar += G
        B_bar += G @ _t(Kt)
        # K = -inv(M) B'PnA, M = R + B'PnB
        M = R + _t(B) @ Pn @ B
        V = -spd_solve(M, Kb)
        Mb = V @ _t(Kt)
        A_bar += Pn @ B @ V
        B_bar += Pn @ A @ _t(V) + Pn @ B @ (Mb + _t(Mb))
        Pn_bar = Pn_bar + B @ V @ _t(A) + B @ Mb @ _t(B)
        P_bar = sym(Pn_bar)
    return np.concatenate([A_bar, B_bar], axis=2)


# ---------------------------------------------------------------------------
# dTheta_hat/dU


def state_sensitivity(A: np.ndarray, B: np.ndarray, T: int) -> np.ndarray:
    """``S[t, :, i, j] = d x_t / d U[i, j]`` for ``t = 0 .. T``; zero unless ``j < t``."""
    n_x, n_u = B.shape
    S = np.zeros((T + 1, n_x, n_u, T))
    for t in range(T):
        S[t + 1] = np.einsum("ab,bij->aij", A, S[t])
        S[t + 1, :, :, t] += B
    return S


def dTheta_hat_dU(prior: MatrixNormalPrior, theta_sample: SystemParams,
                  W: NoiseBlock | np.ndarray, U: np.ndarray, alpha1: float = ALPHA1,
                  alpha2: float = ALPHA2, x0=None) -> np.ndarray:
    """Jacobian ``J[m, n, i, j] = d Theta_hat[m, n] / d U[i, j]`` for one sample.

    Includes the dependence through the regressors, the targets and the
    state-dependent weights.
    """
    U = np.asarray(U, dtype=float)
    W = np.asarray(W.W if isinstance(W, NoiseBlock) else W, dtype=float)
    n_x, n_u, T = prior.n_x, prior.n_u, U.shape[1]
    x0 = np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float)
    A, B = theta_sample.A, theta_sample.B
    X_full = rollout_batch(A[None], B[None], U, W[None], x0)
    est = posterior_batch(prior, X_full, U, alpha1, alpha2)
    Z, Y, s, r, valid = est.Z[0], est.Y[0], est.s[0], est.r[0], est.valid[0]

    Sx = state_sensitivity(A, B, T)
    dZ = np.zeros((T, n_x + n_u, n_u, T))
    dZ[:, :n_x] = Sx[:T]
    for t in range(T):
        dZ[t, n_x + np.arange(n_u), np.arange(n_u), t] = 1.0
    dY = Sx[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r > 0, Z[:n_x] / r, 0.0)  # (n_x, T)
    slope = np.where(valid, weight_slope(r, alpha1, alpha2), 0.0)
    ds = slope[:, None, None] * np.einsum("at,taij->tij", unit, Sx[:T])
    keep = valid.astype(float)
    dZ *= keep[:, None, None, None]
    dY = dY * keep[:, None, None, None]

    dPsi = (np.einsum("taij,t,bt->abij", dY, s, Z)
            + np.einsum("at,tij,bt->abij", Y, ds, Z)
            + np.einsum("at,t,tbij->abij", Y, s, dZ))
    dLam = (np.einsum("taij,t,bt->abij", dZ, s, Z)
            + np.einsum("at,t,tbij->abij", Z, s, dZ)
            + np.einsum("at,tij,bt->abij", Z, ds, Z))
    theta_hat = est.theta_hat[0]
    inner = dPsi - np.einsum("ac,cbij->abij", theta_hat, dLam)
    n_z = n_x + n_u
    flat = np.moveaxis(inner, 1, 3).reshape(-1, n_z)  # rows: (a, i, j), cols: b
    out = spd_solve(est.lam_n[0], flat.T).T
    return np.moveaxis(out.reshape(n_x, n_u, T, n_z), 3, 1)


def input_adjoint_batch(G: np.ndarray, est: BatchEstimate, A: np.ndarray, B: np.ndarray,
                        alpha1: float, alpha2: float) -> np.ndarray:
    """Pull ``G = dJ/dTheta_hat`` back through the estimator and dynamics to ``dJ/dU``.

    With ``Theta_hat = Psi inv(Lambda_n)``:
    ``<G, dTheta_hat> = <H, dPsi> - <Theta_hat' H, dLambda_n>``, ``H = G inv(Lambda_n)``.
    """
    n_x = A.shape[1]
    Z, Y, s, r, valid = est.Z, est.Y, est.s, est.r, est.valid
    H = _t(spd_solve(est.lam_n, _t(G)))
    Mx = _t(est.theta_hat) @ H
    HZ = H @ Z
    MZ = (Mx + _t(Mx)) @ Z
    y_bar = HZ * s[:, None, :]
    z_bar = (_t(H) @ Y - MZ) * s[:, None, :]
    s_bar = np.einsum("lat,lat->lt", Y, HZ) - np.einsum("lat,lat->lt", Z, Mx @ Z)

    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[:, None, :] > 0, Z[:, :n_x] / r[:, None, :], 0.0)
    slope = np.where(valid, weight_slope(r, alpha1, alpha2), 0.0)
    x_bar_reg = z_bar[:, :n_x] + (s_bar * slope)[:, None, :] * unit  # adjoint of x_t, t<T
    u_bar = z_bar[:, n_x:]

    L, _, T = Z.shape
    At, Bt = _t(A), _t(B)
    grad = np.empty_like(u_bar)
    mu = y_bar[:, :, T - 1]  # adjoint of x_T
    for t in range(T - 1, -1, -1):
        grad[:, :, t] = u_bar[:, :, t] + np.einsum("lij,lj->li", Bt, mu)
        mu = x_bar_reg[:, :, t] + np.einsum("lij,lj->li", At, mu)
        if t > 0:
            mu = mu + y_bar[:, :, t - 1]
    return grad


# ---------------------------------------------------------------------------
# objectives on (true Theta, estimate)


class Objective(Protocol):
    """Per-sample criterion of the true parameters and the posterior estimate.

    Returns the values ``(L,)`` and their gradients with respect to the
    estimate, ``(L, n_x, n_z)``.
    """

    def __call__(self, thetas: np.ndarray, theta_hat: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class ControlObjective:
    """Cost of the CE controller for the estimate, run on the true system."""

    spec: LqrSpec

    def values(self, thetas, theta_hat):
        n_x = self.spec.n_x
        K, _ = riccati_batch(theta_hat[:, :, :n_x], theta_hat[:, :, n_x:], self.spec)
        P = lyapunov_batch(thetas[:, :, :n_x], thetas[:, :, n_x:], K, self.spec)
        return cost_from_values(P, self.spec)

    def __call__(self, thetas, theta_hat):
        spec, n_x = self.spec, self.spec.n_x
        Ah, Bh = theta_hat[:, :, :n_x], theta_hat[:, :, n_x:]
        A, B = thetas[:, :, :n_x], thetas[:, :, n_x:]
        K, P_ce = riccati_batch(Ah, Bh, spec)
        P = lyapunov_batch(A, B, K, spec)
        GK = dJ_dK_batch(A, B, K, P, spec)
        return cost_from_values(P, spec), riccati_adjoint_batch(Ah, Bh, K, P_ce, GK, spec)


def sample_objective_batch(prior, thetas, W, U, objective, alpha1=ALPHA1, alpha2=ALPHA2,
                           x0=None, with_grad=True):
    """Run the full per-sample chain for a batch of ``(Theta, W)`` draws."""
    n_x = prior.n_x
    x0 = np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float)
    A, B = thetas[:, :, :n_x], thetas[:, :, n_x:]
    X_full = rollout_batch(A, B, U, W, x0)
    est = posterior_batch(prior, X_full, U, alpha1, alpha2)
    if not with_grad:
        return objective.values(thetas, est.theta_hat), None
    values, G = objective(thetas, est.theta_hat)
    return values, input_adjoint_batch(G, est, A, B, alpha1, alpha2)


def per_sample_objective(prior, theta_sample: SystemParams, W, U, spec: LqrSpec,
                         alpha1=ALPHA1, alpha2=ALPHA2, x0=None) -> float:
    """``J(K_CE(D(U, g(W, theta; U))); theta)`` for one fixed draw."""
    W = np.asarray(W.W if isinstance(W, NoiseBlock) else W, dtype=float)
    v, _ = sample_objective_batch(prior, theta_sample.theta[None], W[None],
                                  np.asarray(U, float), ControlObjective(spec),
                                  alpha1, alpha2, x0, with_grad=False)
    return float(v[0])


def sample_gradient(prior: MatrixNormalPrior, theta_sample: SystemParams, W, U,
                    spec: LqrSpec, alpha1: float = ALPHA1, alpha2: float = ALPHA2,
                    x0=None, method: str = "explicit") -> SampleGradient:
    """Gradient of the per-sample objective with respect to the input plan.

    ``method="explicit"`` contracts ``dJ/dK . dK/dTheta_hat`` into an adjoint on
    ``Theta_hat`` and then with the full ``dTheta_hat/dU`` Jacobian.
    ``method="adjoint"`` uses the batched reverse sweep.
    """
    U = np.asarray(U, dtype=float)
    Wm = np.asarray(W.W if isinstance(W, NoiseBlock) else W, dtype=float)
    if method == "adjoint":
        _, g = sample_objective_batch(prior, theta_sample.theta[None], Wm[None], U,
                                      ControlObjective(spec), alpha1, alpha2, x0)
        return SampleGradient(g[0])
    if method != "explicit":
        raise ValueError(f"unknown method {method!r}")
    x0v = np.zeros(prior.n_x) if x0 is None else np.asarray(x0, dtype=float)
    X_full = rollout_batch(theta_sample.A[None], theta_sample.B[None], U, Wm[None], x0v)
    est = posterior_batch(prior, X_full, U, alpha1, alpha2)
    theta_hat = SystemParams.from_theta(est.theta_hat[0], prior.n_x)
    policy = ce_gains(theta_hat, spec)
    GK = dJ_dK(theta_sample, policy, spec)
    G = np.einsum("tqr,tqrmn->mn", GK, dK_dTheta_hat(theta_hat, spec))
    J_U = dTheta_hat_dU(prior, theta_sample, Wm, U, alpha1, alpha2, x0)
    return SampleGradient(np.einsum("mn,mnij->ij", G, J_U))


def _chunks(n: int, workers: int) -> list[np.ndarray]:
    workers = max(1, min(int(workers), n))
    return [c for c in np.array_split(np.arange(n), workers) if c.size]


def batch_gradients(prior, U, objective, L: int, seed: int, keys=(0,), alpha1=ALPHA1,
                    alpha2=ALPHA2, x0=None, workers: int = 1, with_grad: bool = True):
    """Per-sample values and input gradients for sample indices ``0 .. L-1``.

    Sample ``i`` uses the substream ``(seed, *keys, i)``; results are identical
    for any ``workers`` since chunks are evaluated independently and
    concatenated in index order.
    """
    U = np.asarray(U, dtype=float)
    T = U.shape[1]

    def run(idx):
        thetas, W = sample_batch(prior, T, seed, tuple(keys), idx)
        return sample_objective_batch(prior, thetas, W, U, objective, alpha1, alpha2, x0,
                                      with_grad=with_grad)

    parts = _chunks(L, workers)
    if len(parts) == 1:
        results = [run(parts[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            results = list(pool.map(run, parts))
    values = np.concatenate([r[0] for r in results])
    grads = np.concatenate([r[1] for r in results]) if with_grad else None
    return values, grads


def pathwise_estimate(prior: MatrixNormalPrior, U: np.ndarray, spec: LqrSpec | None, L: int,
                      seed: int, keys=(0,), alpha1: float = ALPHA1, alpha2: float = ALPHA2,
                      x0=None, workers: int = 1, objective=None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo pathwise gradient: mean of ``L`` per-sample gradients.

    Returns the mean gradient ``(n_u, T)`` and the per-sample Frobenius norms.
    """
    if L < 1:
        raise ValueError(f"batch size must be >= 1, got {L}")
    objective = ControlObjective(spec) if objective is None else objective
    _, grads = batch_gradients(prior, U, objective, L, seed, keys, alpha1, alpha2, x0, workers)
    norms = np.linalg.norm(grads, axis=(1, 2))
    bad = np.flatnonzero(~np.isfinite(norms))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]))
    return grads.sum(axis=0) / L, norms
