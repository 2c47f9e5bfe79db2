"""Projected-gradient dual ascent on the compact problem.

The dual vector ``eta`` stacks, per agent in node order, ``lambda_i``
(one entry per row of ``A_i``) followed by ``zeta_i`` (one entry per
balance row).  For a fixed ``eta`` the Lagrangian separates per agent
and each local minimizer has the closed form
``x = -(lin + G^T eta) / quad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse.linalg as spla

from . import kernels
from .problem import CompactProblem, LocalProblem
from .sparse import Csr
from .trace import SolveTrace


@dataclass(frozen=True, eq=False)
class AgentDualView:
    """What agent ``i`` needs to run its share of one dual iteration.

    ``G`` maps the visible vector ``[x_i | received flow shares]`` to the
    agent's constraint rows; ``GT`` maps ``[lambda_i | zeta_i | received
    zeta_j]`` to the agent's coordinates; ``shares[j]`` gives the block
    ``B_ij x_i`` sent to neighbor ``j``.
    """

    lp: LocalProblem
    G: Csr
    GT: Csr
    shares: Mapping[int, Csr]
    rhs: np.ndarray

    @property
    def node(self) -> int:
        return self.lp.node


def _nonzeros(row: np.ndarray):
    return [(int(c), float(row[c])) for c in np.flatnonzero(row)]


def agent_view(lp: LocalProblem) -> AgentDualView:
    m, K, n = lp.m, lp.K, lp.n
    nb = lp.neighbors
    rows = [_nonzeros(lp.A[r]) for r in range(m)]
    for k in range(K):
        entries = _nonzeros(lp.B_self[k])
        entries += [(n + a * K + k, 1.0) for a in range(len(nb))]
        rows.append(entries)
    G = Csr.from_rows(rows, n + K * len(nb))

    cols = []
    for c in range(n):
        entries = [(int(r), float(lp.A[r, c])) for r in np.flatnonzero(lp.A[:, c])]
        entries += [(m + int(k), float(lp.B_self[k, c])) for k in np.flatnonzero(lp.B_self[:, c])]
        for a, j in enumerate(nb):
            B = lp.B_out[j]
            entries += [(m + K + a * K + int(k), float(B[k, c])) for k in np.flatnonzero(B[:, c])]
        cols.append(entries)
    GT = Csr.from_rows(cols, m + K + K * len(nb))

    shares = {j: Csr.from_dense(lp.B_out[j]) for j in nb}
    rhs = np.ascontiguousarray(np.concatenate([lp.a, lp.b]))
    return AgentDualView(lp=lp, G=G, GT=GT, shares=shares, rhs=rhs)


@dataclass(frozen=True, eq=False)
class DualOperator:
    """Global ``H x <= h`` in the exact entry order of the agent views."""

    problem: CompactProblem
    views: Mapping[int, AgentDualView]
    H: Csr
    HT: Csr
    rhs: np.ndarray
    lin: np.ndarray
    quad: np.ndarray
    row_offsets: Mapping[int, int]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    def lam_slice(self, i: int) -> slice:
        lo = self.row_offsets[i]
        return slice(lo, lo + self.problem.locals[i].m)

    def zeta_slice(self, i: int) -> slice:
        lp = self.problem.locals[i]
        lo = self.row_offsets[i] + lp.m
        return slice(lo, lo + lp.K)

    def eta_visible(self, i: int, eta: np.ndarray) -> np.ndarray:
        """``[lambda_i | zeta_i | zeta_j ...]`` as agent ``i`` would assemble it."""
        parts = [eta[self.row_offsets[i] : self.zeta_slice(i).stop]]
        parts += [eta[self.zeta_slice(j)] for j in self.problem.locals[i].neighbors]
        return np.concatenate(parts)


def build_operator(problem: CompactProblem) -> DualOperator:
    views = {i: agent_view(problem.locals[i]) for i in problem.nodes}
    row_offsets, pos = {}, 0
    for i in problem.nodes:
        row_offsets[i] = pos
        pos += problem.locals[i].m + problem.K
    m_total, n_total, K = pos, problem.n_total, problem.K

    h_rows = []
    ht_rows = []
    for i in problem.nodes:
        lp, view = problem.locals[i], views[i]
        off = problem.offsets[i]
        nb = lp.neighbors
        for r in range(view.G.shape[0]):
            cols, vals = view.G.row(r)
            entries = []
            for c, v in zip(cols, vals):
                if c < lp.n:
                    entries.append((off + int(c), float(v)))
                else:
                    a, k = divmod(int(c) - lp.n, K)
                    j = nb[a]
                    col = problem.offsets[j] + problem.locals[j].layout.flow_index(i, k)
                    entries.append((col, float(problem.locals[j].B_out[i][k, col - problem.offsets[j]])))
            h_rows.append(entries)
        for c in range(lp.n):
            rows, vals = view.GT.row(c)
            entries = []
            for r, v in zip(rows, vals):
                r = int(r)
                if r < lp.m + K:
                    entries.append((row_offsets[i] + r, float(v)))
                else:
                    a, k = divmod(r - lp.m - K, K)
                    j = nb[a]
                    entries.append((row_offsets[j] + problem.locals[j].m + k, float(v)))
            ht_rows.append(entries)
    H = Csr.from_rows(h_rows, n_total)
    HT = Csr.from_rows(ht_rows, m_total)
    rhs = np.ascontiguousarray(np.concatenate([views[i].rhs for i in problem.nodes]))
    return DualOperator(
        problem=problem,
        views=views,
        H=H,
        HT=HT,
        rhs=rhs,
        lin=np.ascontiguousarray(problem.lin()),
        quad=np.ascontiguousarray(problem.quad()),
        row_offsets=row_offsets,
    )


@dataclass
class DualIterate:
    lam: dict[int, np.ndarray]
    zeta: dict[int, np.ndarray]
    x_star: dict[int, np.ndarray]
    iter: int = 0

    @classmethod
    def from_flat(cls, op: DualOperator, eta: np.ndarray, x: np.ndarray | None = None, it: int = 0):
        x = primal_recovery(op, eta) if x is None else x
        return cls(
            lam={i: eta[op.lam_slice(i)].copy() for i in op.problem.nodes},
            zeta={i: eta[op.zeta_slice(i)].copy() for i in op.problem.nodes},
            x_star={i: v.copy() for i, v in op.problem.split(x).items()},
            iter=it,
        )

    def flat(self, op: DualOperator) -> np.ndarray:
        return np.concatenate([np.concatenate([self.lam[i], self.zeta[i]]) for i in op.problem.nodes])


@dataclass
class DualAscentConfig:
    """``lipschitz=None`` means the bound from :func:`lipschitz_bound`."""

    lipschitz: float | None = None
    max_iters: int = 50_000
    tol_grad: float = 1e-6
    tol_feas: float = 1e-5

    def __post_init__(self):
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ValueError("lipschitz constant must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class DualResult:
    x: np.ndarray
    eta: np.ndarray
    trace: SolveTrace
    converged: bool
    iterations: int
    lipschitz: float
    psi: float
    extra: dict = field(default_factory=dict)


def local_primal_argmin(lp: LocalProblem, lam_i, zeta_i, zeta_neighbors: Mapping[int, np.ndarray], view=None):
    """Minimizer of the agent's Lagrangian term over all of R^n_i."""
    if not np.all(lp.cost_quad > 0):
        raise ValueError(f"node {lp.node}: zero quadratic cost coefficient")
    view = agent_view(lp) if view is None else view
    parts = [np.asarray(lam_i, float), np.asarray(zeta_i, float)]
    parts += [np.asarray(zeta_neighbors[j], float) for j in lp.neighbors]
    eta_vis = np.concatenate(parts)
    if eta_vis.shape != (view.GT.shape[1],):
        raise ValueError("dual vector sizes do not match the local problem")
    return kernels.primal_from_dual(view.GT, eta_vis, lp.cost_lin, lp.cost_quad)


def primal_recovery(op: DualOperator, eta: np.ndarray) -> np.ndarray:
    return kernels.primal_from_dual(op.HT, np.ascontiguousarray(eta, dtype=float), op.lin, op.quad)


def constraint_gap(op: DualOperator, x: np.ndarray) -> np.ndarray:
    """``H x - h``; the gradient of the dual function at the matching eta."""
    return kernels.matvec(op.H, x) - op.rhs


def dual_gradient(op: DualOperator, x_star) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Per-agent gradient blocks ``(A_i x_i - a_i, balance_i(x) - b_i)``."""
    if isinstance(x_star, Mapping):
        x_star = op.problem.join(x_star)
    g = constraint_gap(op, np.asarray(x_star, dtype=float))
    return (
        {i: g[op.lam_slice(i)] for i in op.problem.nodes},
        {i: g[op.zeta_slice(i)] for i in op.problem.nodes},
    )


def dual_value(op: DualOperator, eta) -> float:
    if isinstance(eta, DualIterate):
        eta = eta.flat(op)
    eta = np.ascontiguousarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("dual variables must be nonnegative")
    x = primal_recovery(op, eta)
    return kernels.lagrangian(x, op.quad, op.lin, eta, constraint_gap(op, x))[0]


def dual_step(op: DualOperator, it: DualIterate, step: float) -> DualIterate:
    """Jacobi projected-gradient update of every agent's duals."""
    eta = it.flat(op)
    x = op.problem.join(it.x_star)
    g = constraint_gap(op, x)
    new = np.maximum(eta + step * g, 0.0)
    return DualIterate.from_flat(op, new, it=it.iter + 1)


def spectral_norm_sq(H) -> float:
    """Largest eigenvalue of ``H^T H`` (dense SVD for small matrices, Lanczos otherwise)."""
    M = H.sp if isinstance(H, Csr) else H
    if min(M.shape) <= 400:
        dense = M.toarray() if hasattr(M, "toarray") else np.asarray(M, dtype=float)
        return float(np.linalg.norm(dense, 2) ** 2) if dense.size else 0.0
    gram = spla.LinearOperator((M.shape[1], M.shape[1]), matvec=lambda v: M.T @ (M @ v), dtype=float)
    val = spla.eigsh(gram, k=1, which="LA", tol=1e-12, v0=np.ones(M.shape[1]), return_eigenvectors=False)
    return float(val[0])


def lipschitz_from(H, sigma_min: float) -> float:
    if not sigma_min > 0:
        raise ValueError("sigma_min must be positive")
    return spectral_norm_sq(H) / sigma_min


def lipschitz_bound(problem: CompactProblem | DualOperator) -> float:
    """Upper bound ``rho_max(H)^2 / sigma_min`` on the dual gradient's Lipschitz constant."""
    op = problem if isinstance(problem, DualOperator) else build_operator(problem)
    return lipschitz_from(op.H, op.problem.sigma_min)


def run_dual_ascent(
    problem: CompactProblem | DualOperator,
    config: DualAscentConfig | None = None,
    reference: np.ndarray | None = None,
    eta0: np.ndarray | None = None,
    callback=None,
) -> DualResult:
    """Iterate until ``L * |eta(s+1) - eta(s)|_inf <= tol_grad`` with feasible ``x(eta(s))``.

    Returns ``x(eta)`` for the final (or, on budget exhaustion, the
    highest-valued) dual iterate.  ``callback(s, x, eta)`` runs after
    every evaluation if given.
    """
    config = config or DualAscentConfig()
    op = problem if isinstance(problem, DualOperator) else build_operator(problem)
    L = config.lipschitz if config.lipschitz is not None else lipschitz_bound(op)
    step = 1.0 / L
    eta = np.zeros(op.m) if eta0 is None else np.maximum(np.array(eta0, dtype=float), 0.0)
    ref = None if reference is None else np.asarray(reference, dtype=float)
    trace = SolveTrace()
    best = (-math.inf, eta, None)
    converged = False
    s = 0
    x = None
    while True:
        x, g, eta_new, psi, cost, infeas, dstep = kernels.dual_iteration(
            op.HT, op.H, op.lin, op.quad, op.rhs, eta, step
        )
        dist = float(np.abs(x - ref).max()) if ref is not None else math.nan
        trace.append(s, cost, infeas, math.nan, psi, dist)
        if callback is not None:
            callback(s, x, eta)
        if psi > best[0]:
            best = (psi, eta, x)
        if L * dstep <= config.tol_grad and infeas <= config.tol_feas:
            converged = True
            break
        if s >= config.max_iters:
            break
        eta = eta_new
        s += 1
    if converged:
        psi_out, eta_out, x_out = trace.dual_value[-1], eta, x
    else:
        psi_out, eta_out, x_out = best
    return DualResult(
        x=x_out, eta=eta_out, trace=trace, converged=converged, iterations=s, lipschitz=L, psi=psi_out
    )
