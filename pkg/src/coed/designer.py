"""Projected stochastic gradient descent over a Frobenius-ball input budget."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .grad import (ALPHA1, ALPHA2, ControlObjective, NonFiniteGradientError, batch_gradients,
                   sample_objective_batch)
from .lqr import cost_from_values, known_theta_cost_batch, lyapunov_batch, riccati_batch
from .model import LqrSpec, MatrixNormalPrior
from .sim import sample_batch, substream

# substream tags: (seed, tag, ...)
INIT_TAG = 0
DESIGN_TAG = 1
EVAL_TAG = 2

TRACE_HEADER = ("iter", "grad_norm", "u_norm", "eta", "elapsed_s")


class DesignError(RuntimeError):
    pass


@dataclass
class DesignConfig:
    beta: float
    eta0: float = 0.01
    decay: float = 0.995
    batch: int = 1000
    max_iters: int = 2000
    grad_window: int = 50
    grad_tol: float = 0.05
    relative_tol: bool = True   # grad_tol is a fraction of the first gradient norm
    seed: int = 0
    workers: int = 1
    alpha1: float = ALPHA1
    alpha2: float = ALPHA2

    def validate(self) -> None:
        if not self.beta >= 0:
            raise DesignError(f"beta must be non-negative, got {self.beta}")
        if not self.eta0 > 0:
            raise DesignError(f"eta0 must be positive, got {self.eta0}")
        if not 0 < self.decay <= 1:
            raise DesignError(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch < 1 or self.max_iters < 1 or self.grad_window < 1:
            raise DesignError("batch, max_iters and grad_window must be >= 1")
        if self.grad_window > self.max_iters:
            raise DesignError("grad_window must not exceed max_iters")
        if not self.grad_tol > 0:
            raise DesignError(f"grad_tol must be positive, got {self.grad_tol}")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    grad_norm: float      # step length / eta, i.e. the projected-gradient norm
    u_norm: float
    eta: float
    elapsed_s: float
    raw_grad_norm: float  # norm of the estimator before projection
    objective: float      # batch mean of the per-sample criterion at U_i


@dataclass
class DesignTrace:
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False

    def append(self, record: TraceRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.records.append(record)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow([r.iteration, repr(r.grad_norm), repr(r.u_norm), repr(r.eta),
                        f"{r.elapsed_s:.6f}"])
        return buf.getvalue()


def project(U: np.ndarray, beta: float) -> np.ndarray:
    """Euclidean projection onto ``{U : ||U||_F <= beta}``."""
    U = np.asarray(U, dtype=float)
    norm = float(np.linalg.norm(U))
    if norm <= beta:
        return U.copy()
    if beta == 0:
        return np.zeros_like(U)
    out = U * (beta / norm)
    # guard the last ulp so that the result is itself a fixed point
    while float(np.linalg.norm(out)) > beta:
        out = out * (1.0 - 2.0 ** -52)
    return out


def initial_plan(n_u: int, T: int, seed: int, beta: float | None = None) -> np.ndarray:
    """Entries uniform on ``[1e-3, 1e-2]``, drawn from a seed-keyed substream."""
    U0 = substream(seed, INIT_TAG).uniform(1e-3, 1e-2, size=(n_u, T))
    return U0 if beta is None else project(U0, beta)


def sgd(prior: MatrixNormalPrior, objective, config: DesignConfig, U0: np.ndarray,
        x0=None, callback=None) -> tuple[np.ndarray, DesignTrace]:
    """Generic projected SGD loop driven by a per-sample ``objective``.

    Step ``eta_i = eta0 * decay**i``. The convergence statistic is the applied
    step in gradient units, ``||U_{i+1} - U_i||_F / eta0``, so it shrinks both
    with the step schedule and with the projected gradient. The loop stops once
    its trailing mean over the last ``grad_window`` iterations drops below
    ``grad_tol`` (times the first raw gradient norm when ``relative_tol``). The
    test waits for a full window, except that an infinite tolerance stops after
    the first step.
    """
    config.validate()
    U = project(U0, config.beta)
    trace = DesignTrace()
    start = time.perf_counter()
    steps: list[float] = []
    tol = config.grad_tol
    for i in range(config.max_iters):
        values, grads = batch_gradients(
            prior, U, objective, config.batch, config.seed, (DESIGN_TAG, i),
            config.alpha1, config.alpha2, x0, config.workers)
        g = grads.sum(axis=0) / config.batch
        if not np.all(np.isfinite(g)):
            bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=(1, 2)))
            raise NonFiniteGradientError(int(bad[0]) if bad.size else -1,
                                         f"non-finite gradient at iteration {i}")
        eta = config.eta0 * config.decay ** i
        U_next = project(U - eta * g, config.beta)
        step = float(np.linalg.norm(U_next - U))
        if i == 0 and config.relative_tol and math.isfinite(tol):
            tol = config.grad_tol * float(np.linalg.norm(g))
        steps.append(step / config.eta0)
        trace.append(TraceRecord(i + 1, step / eta, float(np.linalg.norm(U_next)), eta,
                                 time.perf_counter() - start, float(np.linalg.norm(g)),
                                 float(values.mean())))
        U = U_next
        if callback is not None:
            callback(trace.records[-1], U)
        window_full = len(steps) >= config.grad_window or math.isinf(tol)
        if window_full and np.mean(steps[-config.grad_window:]) < tol:
            trace.converged = True
            break
    return U, trace


def design(prior: MatrixNormalPrior, spec: LqrSpec, config: DesignConfig,
           U0: np.ndarray | None = None, T: int | None = None, x0=None,
           callback=None) -> tuple[np.ndarray, DesignTrace]:
    """Control-oriented design: minimize the expected post-experiment LQR cost."""
    if U0 is None:
        if T is None:
            raise DesignError("either U0 or the experiment horizon T is required")
        U0 = initial_plan(prior.n_u, T, config.seed)
    return sgd(prior, ControlObjective(spec), config, U0, x0, callback)


def _mean_ci(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def sample_costs(prior: MatrixNormalPrior, U: np.ndarray, spec: LqrSpec, n_samples: int,
                 seed: int, alpha1: float = ALPHA1, alpha2: float = ALPHA2, x0=None,
                 chunk: int = 4096) -> np.ndarray:
    """Per-sample post-experiment costs for evaluation draws ``0 .. n_samples-1``."""
    U = np.asarray(U, dtype=float)
    objective = ControlObjective(spec)
    out = np.empty(n_samples)
    for s in range(0, n_samples, chunk):
        idx = np.arange(s, min(s + chunk, n_samples))
        thetas, W = sample_batch(prior, U.shape[1], seed, (EVAL_TAG,), idx)
        out[idx], _ = sample_objective_batch(prior, thetas, W, U, objective, alpha1, alpha2,
                                             x0, with_grad=False)
    return out


def evaluate_objective(prior: MatrixNormalPrior, U: np.ndarray, spec: LqrSpec,
                       n_samples: int, seed: int, alpha1: float = ALPHA1,
                       alpha2: float = ALPHA2, x0=None) -> tuple[float, float]:
    """Monte-Carlo expected post-experiment cost and its 95% CI half-width."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    return _mean_ci(sample_costs(prior, U, spec, n_samples, seed, alpha1, alpha2, x0))


def reference_costs(prior: MatrixNormalPrior, spec: LqrSpec, n_samples: int, seed: int,
                    chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample known-parameter cost and prior-mean CE cost on the evaluation draws.

    Uses the same parameter draws as :func:`sample_costs` with the same seed.
    """
    n_x = prior.n_x
    Kp, _ = riccati_batch(prior.mean[None, :, :n_x], prior.mean[None, :, n_x:], spec)
    lower = np.empty(n_samples)
    prior_only = np.empty(n_samples)
    for s in range(0, n_samples, chunk):
        idx = np.arange(s, min(s + chunk, n_samples))
        thetas, _ = sample_batch(prior, 1, seed, (EVAL_TAG,), idx)
        A, B = thetas[:, :, :n_x], thetas[:, :, n_x:]
        lower[idx] = known_theta_cost_batch(A, B, spec)
        prior_only[idx] = cost_from_values(lyapunov_batch(A, B, Kp[0], spec), spec)
    return lower, prior_only
