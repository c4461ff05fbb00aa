"""Certainty-equivalent finite-horizon LQR and exact expected-cost evaluation.

All routines have a batched form operating on stacks of ``(A, B)`` with a
leading sample axis; the scalar-system API wraps them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import spd_solve, sym
from .model import InvalidModelError, LqrSpec, SystemParams
from .sim import substream, psd_sqrt


@dataclass(frozen=True)
class PolicyGains:
    """Feedback gains ``K_0 .. K_{N-1}`` and Riccati values ``P_0 .. P_N``."""

    gains: np.ndarray   # (N, n_u, n_x)
    values: np.ndarray  # (N+1, n_x, n_x)

    @property
    def N(self) -> int:
        return self.gains.shape[0]


def _check_dims(A, B, spec: LqrSpec):
    if A.shape[-2:] != (spec.n_x, spec.n_x) or B.shape[-2:] != (spec.n_x, spec.n_u):
        raise InvalidModelError(
            f"system shapes {A.shape[-2:]}, {B.shape[-2:]} do not match the LQR spec "
            f"({spec.n_x} states, {spec.n_u} inputs)")


def riccati_batch(A: np.ndarray, B: np.ndarray, spec: LqrSpec) -> tuple[np.ndarray, np.ndarray]:
    """Backward Riccati recursion for a batch of systems.

    Returns gains ``(L, N, n_u, n_x)`` and values ``(L, N+1, n_x, n_x)``.
    """
    _check_dims(A, B, spec)
    L = A.shape[0]
    n_x, n_u, N = spec.n_x, spec.n_u, spec.N
    K = np.empty((L, N, n_u, n_x))
    P = np.empty((L, N + 1, n_x, n_x))
    P[:, N] = spec.Q_N
    Bt = np.swapaxes(B, 1, 2)
    for t in range(N - 1, -1, -1):
        Pn = P[:, t + 1]
        BtP = Bt @ Pn
        M = spec.R + BtP @ B
        K[:, t] = -spd_solve(M, BtP @ A)
        Acl = A + B @ K[:, t]
        Kt = np.swapaxes(K[:, t], 1, 2)
        P[:, t] = sym(spec.Q + Kt @ spec.R @ K[:, t] + np.swapaxes(Acl, 1, 2) @ Pn @ Acl)
    return K, P


def lyapunov_batch(A: np.ndarray, B: np.ndarray, K: np.ndarray, spec: LqrSpec) -> np.ndarray:
    """Value matrices of a fixed gain sequence run on the given systems."""
    _check_dims(A, B, spec)
    if K.shape[-3] != spec.N:
        raise InvalidModelError(f"policy horizon {K.shape[-3]} != spec horizon {spec.N}")
    L = A.shape[0]
    N = spec.N
    K = np.broadcast_to(K, (L,) + K.shape[-3:])
    P = np.empty((L, N + 1, spec.n_x, spec.n_x))
    P[:, N] = spec.Q_N
    for t in range(N - 1, -1, -1):
        Acl = A + B @ K[:, t]
        Kt = np.swapaxes(K[:, t], 1, 2)
        P[:, t] = sym(spec.Q + Kt @ spec.R @ K[:, t]
                      + np.swapaxes(Acl, 1, 2) @ P[:, t + 1] @ Acl)
    return P


def cost_from_values(P: np.ndarray, spec: LqrSpec) -> np.ndarray:
    """``x0' P_0 x0 + sum_t trace(P_{t+1} Sigma_w)`` for value stacks ``(L, N+1, n, n)``."""
    x0 = spec.x0
    quad = np.einsum("i,lij,j->l", x0, P[:, 0], x0)
    noise = np.einsum("ltij,ji->l", P[:, 1:], spec.noise_cov)
    return quad + noise


def policy_cost_batch(A: np.ndarray, B: np.ndarray, K: np.ndarray,
                      spec: LqrSpec) -> tuple[np.ndarray, np.ndarray]:
    P = lyapunov_batch(A, B, K, spec)
    return cost_from_values(P, spec), P


def ce_gains(theta_hat: SystemParams, spec: LqrSpec) -> PolicyGains:
    """Certainty-equivalent gains: LQR for the estimate as if it were exact."""
    K, P = riccati_batch(theta_hat.A[None], theta_hat.B[None], spec)
    return PolicyGains(K[0], P[0])


def policy_cost(theta_true: SystemParams, policy: PolicyGains, spec: LqrSpec) -> float:
    """Exact expected cost of running ``policy`` on ``theta_true``."""
    J, _ = policy_cost_batch(theta_true.A[None], theta_true.B[None], policy.gains[None], spec)
    return float(J[0])


def known_theta_cost(theta_true: SystemParams, spec: LqrSpec) -> float:
    """Lowest achievable cost: the exact-parameter LQR on its own system."""
    return policy_cost(theta_true, ce_gains(theta_true, spec), spec)


def known_theta_cost_batch(A: np.ndarray, B: np.ndarray, spec: LqrSpec) -> np.ndarray:
    # the Riccati values of the exact design coincide with its Lyapunov values
    _, P = riccati_batch(A, B, spec)
    return cost_from_values(P, spec)


def rollout_costs(theta_true: SystemParams, policy: PolicyGains, spec: LqrSpec,
                  n_rollouts: int, seed: int, chunk: int = 20000) -> np.ndarray:
    """Realized quadratic costs of ``n_rollouts`` noisy closed-loop runs."""
    C = psd_sqrt(spec.noise_cov, "noise_cov")
    A, B, K = theta_true.A, theta_true.B, policy.gains
    out = np.empty(n_rollouts)
    rng = substream(seed, 0)
    for start in range(0, n_rollouts, chunk):
        n = min(chunk, n_rollouts - start)
        x = np.broadcast_to(spec.x0, (n, spec.n_x)).copy()
        cost = np.zeros(n)
        for t in range(spec.N):
            u = x @ K[t].T
            cost += np.einsum("li,ij,lj->l", x, spec.Q, x) + np.einsum("li,ij,lj->l", u, spec.R, u)
            w = rng.standard_normal((n, spec.n_x)) @ C.T
            x = x @ A.T + u @ B.T + w
        cost += np.einsum("li,ij,lj->l", x, spec.Q_N, x)
        out[start:start + n] = cost
    return out
