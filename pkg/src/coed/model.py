"""Domain types, vectorization helpers and the car-string benchmark system."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InvalidModelError(ValueError):
    """Raised when a model object violates its shape or definiteness invariants."""


def _as_matrix(name: str, value, ndim: int = 2) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise InvalidModelError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def _check_symmetric(name: str, M: np.ndarray, tol: float = 1e-10) -> None:
    if M.shape[0] != M.shape[1]:
        raise InvalidModelError(f"{name} must be square, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if not np.allclose(M, M.T, atol=tol * scale, rtol=0.0):
        raise InvalidModelError(f"{name} must be symmetric")


def _min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]) if M.size else 0.0


@dataclass(frozen=True)
class SystemParams:
    """Linear dynamics x+ = A x + B u + w."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix("A", self.A)
        B = _as_matrix("B", self.B)
        if A.shape[0] != A.shape[1]:
            raise InvalidModelError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise InvalidModelError(f"B must have {A.shape[0]} rows, got {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InvalidModelError("A and B must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def theta(self) -> np.ndarray:
        """The stacked parameter matrix ``[A, B]``."""
        return np.hstack([self.A, self.B])

    @classmethod
    def from_theta(cls, Theta: np.ndarray, n_x: int | None = None) -> "SystemParams":
        Theta = np.asarray(Theta, dtype=float)
        n_x = Theta.shape[0] if n_x is None else n_x
        return cls(Theta[:, :n_x], Theta[:, n_x:])


@dataclass(frozen=True)
class MatrixNormalPrior:
    """Matrix-normal law on ``Theta = [A, B]``.

    ``Cov[Theta_ij, Theta_kl] = noise_cov[k, i] * inv(col_precision)[j, l]``.
    """

    mean: np.ndarray
    col_precision: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        mean = _as_matrix("mean", self.mean)
        lam = _as_matrix("col_precision", self.col_precision)
        sw = _as_matrix("noise_cov", self.noise_cov)
        n_x, n_z = mean.shape
        if lam.shape != (n_z, n_z):
            raise InvalidModelError(f"col_precision must be {n_z}x{n_z}, got {lam.shape}")
        if sw.shape != (n_x, n_x):
            raise InvalidModelError(f"noise_cov must be {n_x}x{n_x}, got {sw.shape}")
        _check_symmetric("col_precision", lam)
        _check_symmetric("noise_cov", sw)
        if _min_eig(lam) <= 0:
            raise InvalidModelError("col_precision must be positive definite")
        if _min_eig(sw) <= 0:
            raise InvalidModelError("noise_cov must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "col_precision", 0.5 * (lam + lam.T))
        object.__setattr__(self, "noise_cov", 0.5 * (sw + sw.T))

    @property
    def n_x(self) -> int:
        return self.mean.shape[0]

    @property
    def n_z(self) -> int:
        return self.mean.shape[1]

    @property
    def n_u(self) -> int:
        return self.n_z - self.n_x

    @classmethod
    def from_col_covariance(cls, mean, col_cov, noise_cov) -> "MatrixNormalPrior":
        """Build from the column covariance ``inv(col_precision)`` instead."""
        col_cov = np.asarray(col_cov, dtype=float)
        return cls(mean, np.linalg.inv(col_cov), noise_cov)

    def element_covariance(self) -> np.ndarray:
        """Covariance of ``vectorize(Theta)`` (column stacking): ``kron(inv(Lambda0), Sigma_w)``."""
        return np.kron(np.linalg.inv(self.col_precision), self.noise_cov)


@dataclass(frozen=True)
class ExperimentPlan:
    U: np.ndarray
    beta: float

    def __post_init__(self):
        U = _as_matrix("U", self.U)
        if not self.beta > 0:
            raise InvalidModelError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "U", U)

    @property
    def horizon(self) -> int:
        return self.U.shape[1]

    def is_feasible(self) -> bool:
        return float(np.linalg.norm(self.U)) <= self.beta


@dataclass(frozen=True)
class Dataset:
    """Aligned transition triples ``(x_plus[:, i], x[:, i], u[:, i])``."""

    x_plus: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        xp = _as_matrix("x_plus", self.x_plus)
        x = _as_matrix("x", self.x)
        u = _as_matrix("u", self.u)
        if not (xp.shape[1] == x.shape[1] == u.shape[1]):
            raise InvalidModelError(
                f"column counts differ: x_plus {xp.shape}, x {x.shape}, u {u.shape}")
        if xp.shape[0] != x.shape[0]:
            raise InvalidModelError("x_plus and x must have the same number of rows")
        object.__setattr__(self, "x_plus", xp)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    @property
    def M(self) -> int:
        return self.x.shape[1]

    @property
    def Z(self) -> np.ndarray:
        return np.vstack([self.x, self.u])


@dataclass(frozen=True)
class LqrSpec:
    """Finite-horizon LQR task: cost matrices, horizon, start state and noise."""

    Q: np.ndarray
    Q_N: np.ndarray
    R: np.ndarray
    N: int
    x0: np.ndarray
    noise_cov: np.ndarray
    eig_tol: float = field(default=1e-10, repr=False)

    def __post_init__(self):
        Q = _as_matrix("Q", self.Q)
        QN = _as_matrix("Q_N", self.Q_N)
        R = _as_matrix("R", self.R)
        x0 = _as_matrix("x0", self.x0, ndim=1)
        sw = _as_matrix("noise_cov", self.noise_cov)
        n_x = x0.shape[0]
        for name, M in (("Q", Q), ("Q_N", QN), ("noise_cov", sw)):
            if M.shape != (n_x, n_x):
                raise InvalidModelError(f"{name} must be {n_x}x{n_x}, got {M.shape}")
            _check_symmetric(name, M)
        _check_symmetric("R", R)
        if _min_eig(Q) < -self.eig_tol or _min_eig(QN) < -self.eig_tol:
            raise InvalidModelError("Q and Q_N must be positive semidefinite")
        if _min_eig(sw) < -self.eig_tol:
            raise InvalidModelError("noise_cov must be positive semidefinite")
        if _min_eig(R) <= self.eig_tol:
            raise InvalidModelError("R must be positive definite")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidModelError(f"horizon N must be an integer >= 1, got {self.N}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Q_N", QN)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "noise_cov", sw)
        object.__setattr__(self, "N", int(self.N))

    @property
    def n_x(self) -> int:
        return self.Q.shape[0]

    @property
    def n_u(self) -> int:
        return self.R.shape[0]


def vectorize(Theta: np.ndarray) -> np.ndarray:
    """Stack the columns of ``Theta`` into a single vector."""
    return np.asarray(Theta, dtype=float).reshape(-1, order="F")


def devectorize(theta: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size != shape[0] * shape[1]:
        raise InvalidModelError(
            f"cannot devectorize length {theta.size} into shape {shape}")
    return theta.reshape(shape, order="F")


def car_string_system(n_cars: int, masses: Sequence[float], alphas: Sequence[float],
                      Ts: float) -> SystemParams:
    """Discretized string of ``n_cars`` cars with velocity and gap deviations.

    State ordering is ``[dv1, dw1, dv2, dw2, ..., dvn]`` (2n-1 states), one force
    input per car. ``dw_k`` is the gap between car k+1 and car k.
    """
    if n_cars < 2:
        raise InvalidModelError(f"n_cars must be >= 2, got {n_cars}")
    masses = np.asarray(masses, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if masses.shape != (n_cars,) or alphas.shape != (n_cars,):
        raise InvalidModelError(
            f"need {n_cars} masses and alphas, got {masses.size} and {alphas.size}")
    if np.any(masses <= 0) or np.any(alphas <= 0):
        raise InvalidModelError("masses and alphas must be positive")
    if Ts < 0:
        raise InvalidModelError(f"Ts must be non-negative, got {Ts}")

    n_x = 2 * n_cars - 1
    A = np.eye(n_x)
    B = np.zeros((n_x, n_cars))
    for k in range(n_cars):
        v = 2 * k
        A[v, v] = 1.0 - alphas[k] * Ts / masses[k]
        B[v, k] = Ts / masses[k]
        if k < n_cars - 1:
            A[v + 1, v] = Ts
            A[v + 1, v + 2] = -Ts
    return SystemParams(A, B)


# Column-precision diagonal of the three-car benchmark prior, given as Lambda0^-1.
PUBLISHED_COL_COV = (0.1, 0.01, 0.05, 0.1, 0.01, 0.05, 0.1, 0.05)
PUBLISHED_X0 = (0.0, -4.3, 0.0, 2.1, 2.5)


def car_string_col_cov(n_cars: int) -> np.ndarray:
    """Diagonal of the prior column covariance for an ``n_cars`` string.

    Three cars use the benchmark values verbatim. Other sizes assign 0.1 to
    velocity columns, 0.01 to gap columns and 0.05 to input columns.
    """
    if n_cars == 3:
        return np.array(PUBLISHED_COL_COV)
    states = [0.1 if i % 2 == 0 else 0.01 for i in range(2 * n_cars - 1)]
    return np.array(states + [0.05] * n_cars)


def car_string_x0(n_cars: int) -> np.ndarray:
    """Initial state for the control task; cyclic extension of the 3-car state."""
    n_x = 2 * n_cars - 1
    return np.array([PUBLISHED_X0[i % len(PUBLISHED_X0)] for i in range(n_x)])


def car_string_lqr(n_cars: int, N: int = 30, position_weight: float = 10.0,
                   noise_scale: float = 1e-2, x0=None) -> LqrSpec:
    """LQR task for the car string: penalize gaps only, identity input cost."""
    n_x = 2 * n_cars - 1
    q = np.array([0.0 if i % 2 == 0 else position_weight for i in range(n_x)])
    Q = np.diag(q)
    x0 = car_string_x0(n_cars) if x0 is None else np.asarray(x0, dtype=float)
    return LqrSpec(Q=Q, Q_N=Q.copy(), R=np.eye(n_cars), N=N, x0=x0,
                   noise_cov=noise_scale * np.eye(n_x))


def car_string_prior(n_cars: int, masses=None, alphas=None, Ts: float = 0.1,
                     noise_scale: float = 1e-2, col_cov=None,
                     prior_scale: float = 1.0) -> MatrixNormalPrior:
    """Matrix-normal prior centred on the nominal car-string ``[A, B]``."""
    masses = np.ones(n_cars) if masses is None else masses
    alphas = np.ones(n_cars) if alphas is None else alphas
    nominal = car_string_system(n_cars, masses, alphas, Ts)
    col_cov = car_string_col_cov(n_cars) if col_cov is None else np.asarray(col_cov, float)
    if col_cov.shape != (3 * n_cars - 1,):
        raise InvalidModelError(
            f"col_cov needs {3 * n_cars - 1} entries, got {col_cov.shape}")
    return MatrixNormalPrior(
        mean=nominal.theta,
        col_precision=np.diag(1.0 / (prior_scale * col_cov)),
        noise_cov=noise_scale * np.eye(nominal.n_x),
    )
