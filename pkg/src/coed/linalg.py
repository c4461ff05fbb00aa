"""Small dense linear-algebra helpers shared by the estimator and LQR code."""

import numpy as np

JITTER = 1e-12


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def spd_cholesky(M: np.ndarray) -> np.ndarray:
    """Cholesky factor of a (batch of) symmetric PD matrices.

    Falls back to a ``1e-12 * trace`` diagonal jitter when round-off breaks
    definiteness; a second failure propagates ``LinAlgError``.
    """
    M = sym(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        n = M.shape[-1]
        tr = np.trace(M, axis1=-2, axis2=-1)[..., None, None]
        return np.linalg.cholesky(M + JITTER * np.abs(tr) * np.eye(n))


def spd_solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``M x = b`` for symmetric PD ``M`` (batched over leading axes)."""
    C = spd_cholesky(M)
    y = np.linalg.solve(C, b)
    return np.linalg.solve(np.swapaxes(C, -1, -2), y)
