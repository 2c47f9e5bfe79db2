"""Pure numpy/scipy solver kernels (fallback backend).

Every function here has a twin in ``_ckernels.pyx`` with the same
signature.  Row sums run sequentially in stored order in both, so the
two backends agree except for compensated summation of scalar totals.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg as sla

from .sparse import BlockCholesky, Csr

BACKEND = "python"


def matvec(a: Csr, x: np.ndarray) -> np.ndarray:
    return a.sp @ np.asarray(x, dtype=float)


def chol_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    return sla.cho_solve((lower, True), np.asarray(b, dtype=float), check_finite=False)


def block_chol_solve(bc: BlockCholesky, rhs: np.ndarray) -> np.ndarray:
    out = np.empty(bc.size)
    for b, lower in enumerate(bc.factors):
        lo, hi = bc.offsets[b], bc.offsets[b + 1]
        out[lo:hi] = chol_solve(lower, rhs[lo:hi])
    return out


def quad_cost(x: np.ndarray, quad: np.ndarray, lin: np.ndarray) -> float:
    return math.fsum(0.5 * quad * x * x + lin * x)


def lagrangian(x, quad, lin, eta, g) -> tuple[float, float]:
    """Return ``(cost(x) + eta.g, cost(x))``."""
    terms = 0.5 * quad * x * x + lin * x
    cost = math.fsum(terms)
    return math.fsum(np.concatenate([terms, eta * g])), cost


def primal_from_dual(ht: Csr, eta, lin, quad) -> np.ndarray:
    return -(lin + matvec(ht, eta)) / quad


def dual_iteration(ht: Csr, h: Csr, lin, quad, rhs, eta, step: float):
    """One projected dual-gradient step.

    Returns ``(x, g, eta_new, psi, cost, infeas, dstep)`` where ``x`` and
    ``g`` belong to the incoming ``eta``.
    """
    x = primal_from_dual(ht, eta, lin, quad)
    g = matvec(h, x) - rhs
    eta_new = np.maximum(eta + step * g, 0.0)
    psi, cost = lagrangian(x, quad, lin, eta, g)
    infeas = max(0.0, float(g.max())) if g.size else 0.0
    dstep = float(np.abs(eta_new - eta).max()) if eta.size else 0.0
    return x, g, eta_new, psi, cost, infeas, dstep


def admm_iteration(w_op: Csr, wt_op: Csr, h, lext, rho: float, partner, bc: BlockCholesky, u, z, v, mu):
    """One v -> u -> multiplier sweep, in place.

    ``partner[r]`` is the paired consensus row of row ``r`` or -1 for a
    local constraint row.  Returns ``(primal, consensus, dual)``.
    """
    w = (z - h) - mu / rho
    local = partner < 0
    v_old = v.copy()
    v[local] = np.maximum(w[local], 0.0)
    cons = ~local
    v[cons] = 0.5 * (w[cons] + w[partner[cons]])
    t = (v + h) + mu / rho
    rhs = rho * matvec(wt_op, t) - lext
    u[:] = block_chol_solve(bc, rhs)
    z[:] = matvec(w_op, u)
    r = (z - h) - v
    mu -= rho * r
    primal = float(np.abs(r[local]).max()) if local.any() else 0.0
    consensus = float(np.abs(r[cons]).max()) if cons.any() else 0.0
    dual = rho * float(np.abs(v - v_old).max()) if v.size else 0.0
    return primal, consensus, dual
