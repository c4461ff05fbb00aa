import time

import numpy as np
import pytest

from coed.model import LqrSpec, SystemParams, car_string_lqr, car_string_prior


def random_system(rng, n_x, n_u, radius=0.9):
    A = rng.standard_normal((n_x, n_x))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    return SystemParams(A, rng.standard_normal((n_x, n_u)))


def random_spec(rng, n_x, n_u, N, noise=0.1):
    G = rng.standard_normal((n_x, n_x))
    H = rng.standard_normal((n_u, n_u))
    return LqrSpec(Q=G @ G.T / n_x, Q_N=np.eye(n_x), R=H @ H.T / n_u + np.eye(n_u), N=N,
                   x0=rng.standard_normal(n_x), noise_cov=noise * np.eye(n_x))


def central_diff(f, x, h):
    """Central differences of ``f`` (array-valued) with respect to every entry of ``x``."""
    x = np.asarray(x, dtype=float)
    out = None
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        d = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
        if out is None:
            out = np.zeros(np.shape(d) + x.shape)
        out[(Ellipsis,) + idx] = d
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def car3():
    return car_string_prior(3), car_string_lqr(3)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, label):
        self.label = label
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        secs = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        extra = self.detail if exc_type is None else f"{self.detail} | {exc_type.__name__}: {exc}"
        ACCEPTANCE_LINES.append(f"{status} {self.label} ({secs:.1f}s) {extra}".rstrip())
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
