"""Dense symmetric positive-definite solves (LAPACK Cholesky via scipy)."""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization meets a non-positive pivot."""


def spd_factor(G: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == G``."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {G.shape}")
    if not np.allclose(G, G.T, rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(G).max(initial=0.0)))):
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        return np.ascontiguousarray(sla.cholesky(G, lower=True, check_finite=True))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def spd_solve(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    L = spd_factor(G)
    return sla.cho_solve((L, True), np.asarray(rhs, dtype=float))
