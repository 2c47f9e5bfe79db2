"""Proximal ADMM with local copies of incoming flows.

Agent ``i`` works on ``u_i = [x_i | F^copy_ji for each neighbor j]``
(copies neighbor-major, K steps each).  Its rows are stacked as
``W_i = [M_i; S_ij1; R_ij1; S_ij2; R_ij2; ...]`` with targets
``h_i = [m_i; 0; ...]``; the slack ``v_i`` lives on the same rows.  For
the ``M`` rows ``v >= 0``; the ``S_ij`` rows (copy of ``F_ji`` held at
``i``) and ``R_ji`` rows (``F_ji`` owned by ``j``) share one value.

Multipliers ``mu_i`` are aligned with the rows of ``W_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels
from .linalg import NotPositiveDefinite, spd_factor
from .problem import CompactProblem, LocalProblem
from .sparse import BlockCholesky, Csr, block_diag, transpose
from .trace import SolveTrace


@dataclass(frozen=True, eq=False)
class AdmmLocal:
    node: int
    neighbors: tuple[int, ...]
    K: int
    n: int
    u_dim: int
    M: np.ndarray
    m_vec: np.ndarray
    S: Mapping[int, np.ndarray]
    R: Mapping[int, np.ndarray]
    P_sel: np.ndarray
    W: Csr
    WT: Csr
    h: np.ndarray
    q_ext: np.ndarray
    l_ext: np.ndarray
    factor: np.ndarray
    rho: float

    @property
    def m_rows(self) -> int:
        return self.M.shape[0]

    @property
    def rows(self) -> int:
        return self.W.shape[0]

    def s_rows(self, j: int) -> slice:
        a = self.neighbors.index(j)
        lo = self.m_rows + 2 * a * self.K
        return slice(lo, lo + self.K)

    def r_rows(self, j: int) -> slice:
        a = self.neighbors.index(j)
        lo = self.m_rows + (2 * a + 1) * self.K
        return slice(lo, lo + self.K)

    def copy_cols(self, j: int) -> slice:
        a = self.neighbors.index(j)
        return slice(self.n + a * self.K, self.n + (a + 1) * self.K)


def build_local(lp: LocalProblem, rho: float) -> AdmmLocal:
    if not rho > 0:
        raise ValueError("rho must be positive")
    n, K, m = lp.n, lp.K, lp.m
    nb = lp.neighbors
    ud = n + K * len(nb)
    eye = np.eye(K)
    M = np.zeros((m + K, ud))
    M[:m, :n] = -lp.A
    M[m:, :n] = -lp.B_self
    S, R = {}, {}
    for a, j in enumerate(nb):
        M[m:, n + a * K : n + (a + 1) * K] = eye
        Sj = np.zeros((K, ud))
        Sj[:, n + a * K : n + (a + 1) * K] = eye
        Rj = np.zeros((K, ud))
        for k in range(K):
            Rj[k, lp.layout.flow_index(j, k)] = 1.0
        S[j], R[j] = Sj, Rj
    m_vec = np.concatenate([-lp.a, -lp.b])
    W_dense = np.vstack([M] + [blk for j in nb for blk in (S[j], R[j])])
    h = np.concatenate([m_vec, np.zeros(2 * K * len(nb))])
    q_ext = np.concatenate([lp.cost_quad, np.zeros(K * len(nb))])
    l_ext = np.concatenate([lp.cost_lin, np.zeros(K * len(nb))])
    try:
        factor = spd_factor(np.diag(q_ext) + rho * W_dense.T @ W_dense)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(f"node {lp.node}: u-update system not positive definite") from exc
    W = Csr.from_dense(W_dense)
    return AdmmLocal(
        node=lp.node,
        neighbors=nb,
        K=K,
        n=n,
        u_dim=ud,
        M=M,
        m_vec=m_vec,
        S=S,
        R=R,
        P_sel=np.eye(n, ud),
        W=W,
        WT=transpose(W),
        h=np.ascontiguousarray(h),
        q_ext=q_ext,
        l_ext=np.ascontiguousarray(l_ext),
        factor=factor,
        rho=rho,
    )


@dataclass(frozen=True, eq=False)
class AdmmOperator:
    problem: CompactProblem
    rho: float
    locals: Mapping[int, AdmmLocal]
    W: Csr
    WT: Csr
    h: np.ndarray
    lext: np.ndarray
    partner: np.ndarray
    chol: BlockCholesky
    row_offsets: Mapping[int, int]
    u_offsets: Mapping[int, int]
    x_index: np.ndarray

    def rows(self, i: int) -> slice:
        lo = self.row_offsets[i]
        return slice(lo, lo + self.locals[i].rows)

    def ucols(self, i: int) -> slice:
        lo = self.u_offsets[i]
        return slice(lo, lo + self.locals[i].u_dim)


def build_operator(problem: CompactProblem, rho: float) -> AdmmOperator:
    locs = {i: build_local(problem.locals[i], rho) for i in problem.nodes}
    row_offsets, u_offsets = {}, {}
    r = c = 0
    for i in problem.nodes:
        row_offsets[i], u_offsets[i] = r, c
        r += locs[i].rows
        c += locs[i].u_dim
    partner = np.full(r, -1, dtype=np.intp)
    for i in problem.nodes:
        li = locs[i]
        for j in li.neighbors:
            lj = locs[j]
            s_i, r_i = li.s_rows(j), li.r_rows(j)
            partner[row_offsets[i] + s_i.start : row_offsets[i] + s_i.stop] = np.arange(
                row_offsets[j] + lj.r_rows(i).start, row_offsets[j] + lj.r_rows(i).stop
            )
            partner[row_offsets[i] + r_i.start : row_offsets[i] + r_i.stop] = np.arange(
                row_offsets[j] + lj.s_rows(i).start, row_offsets[j] + lj.s_rows(i).stop
            )
    x_index = np.concatenate([np.arange(u_offsets[i], u_offsets[i] + locs[i].n) for i in problem.nodes])
    return AdmmOperator(
        problem=problem,
        rho=rho,
        locals=locs,
        W=block_diag([locs[i].W for i in problem.nodes]),
        WT=block_diag([locs[i].WT for i in problem.nodes]),
        h=np.ascontiguousarray(np.concatenate([locs[i].h for i in problem.nodes])),
        lext=np.ascontiguousarray(np.concatenate([locs[i].l_ext for i in problem.nodes])),
        partner=partner,
        chol=BlockCholesky.from_factors([locs[i].factor for i in problem.nodes]),
        row_offsets=row_offsets,
        u_offsets=u_offsets,
        x_index=x_index.astype(np.intp),
    )


@dataclass
class AdmmState:
    """Flat iterate: ``z`` caches ``W u``."""

    u: np.ndarray
    z: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    iter: int = 0

    def copy(self) -> "AdmmState":
        return AdmmState(self.u.copy(), self.z.copy(), self.v.copy(), self.mu.copy(), self.iter)


@dataclass
class AdmmIterate:
    """Per-agent view of an :class:`AdmmState`.

    ``v``/``mu`` hold the local-constraint rows; ``v1[(i, j)]`` and
    ``mu1[(i, j)]`` the copy rows ``S_ij``; ``v2``/``mu2`` the own-flow
    rows ``R_ij``.
    """

    u: dict[int, np.ndarray]
    v: dict[int, np.ndarray]
    v1: dict[tuple[int, int], np.ndarray]
    v2: dict[tuple[int, int], np.ndarray]
    mu: dict[int, np.ndarray]
    mu1: dict[tuple[int, int], np.ndarray]
    mu2: dict[tuple[int, int], np.ndarray]
    iter: int = 0

    @classmethod
    def from_state(cls, op: AdmmOperator, st: AdmmState) -> "AdmmIterate":
        out = cls({}, {}, {}, {}, {}, {}, {}, st.iter)
        for i, loc in op.locals.items():
            v = st.v[op.rows(i)]
            mu = st.mu[op.rows(i)]
            out.u[i] = st.u[op.ucols(i)].copy()
            out.v[i] = v[: loc.m_rows].copy()
            out.mu[i] = mu[: loc.m_rows].copy()
            for j in loc.neighbors:
                out.v1[(i, j)] = v[loc.s_rows(j)].copy()
                out.v2[(i, j)] = v[loc.r_rows(j)].copy()
                out.mu1[(i, j)] = mu[loc.s_rows(j)].copy()
                out.mu2[(i, j)] = mu[loc.r_rows(j)].copy()
        return out


@dataclass
class AdmmConfig:
    rho: float = 0.01
    max_iters: int = 20_000
    tol: float = 1e-6

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class AdmmResult:
    x: np.ndarray
    trace: SolveTrace
    converged: bool
    iterations: int
    residuals: tuple[float, float, float]
    state: AdmmState
    extra: dict = field(default_factory=dict)


def v_local_update(loc: AdmmLocal, u_i, mu_i, rho: float) -> np.ndarray:
    """``[M u - m - mu/rho]_+`` on the local-constraint rows."""
    return np.maximum((loc.M @ u_i - loc.m_vec) - np.asarray(mu_i) / rho, 0.0)


def v_consensus_update(loc_i: AdmmLocal, loc_j: AdmmLocal, u_i, u_j, mu1_ij, mu2_ji, rho: float):
    """Common value of ``v1_ij`` and ``v2_ji`` (average of both shifted estimates)."""
    j, i = loc_j.node, loc_i.node
    left = loc_i.S[j] @ u_i - np.asarray(mu1_ij) / rho
    right = loc_j.R[i] @ u_j - np.asarray(mu2_ji) / rho
    avg = 0.5 * (left + right)
    return avg, avg.copy()


def u_system(loc: AdmmLocal, rho: float) -> np.ndarray:
    rows = [loc.M] + [blk for j in loc.neighbors for blk in (loc.S[j], loc.R[j])]
    W = np.vstack(rows)
    return np.diag(loc.q_ext) + rho * W.T @ W


def u_update(loc: AdmmLocal, v_i, v1: Mapping[int, np.ndarray], v2: Mapping[int, np.ndarray],
             mu_i, mu1: Mapping[int, np.ndarray], mu2: Mapping[int, np.ndarray], rho: float) -> np.ndarray:
    """Minimize the local augmented Lagrangian over ``u_i``.

    ``v1``, ``v2``, ``mu1``, ``mu2`` are keyed by neighbor.
    """
    t = [np.asarray(v_i) + loc.m_vec + np.asarray(mu_i) / rho]
    for j in loc.neighbors:
        t.append(np.asarray(v1[j]) + np.asarray(mu1[j]) / rho)
        t.append(np.asarray(v2[j]) + np.asarray(mu2[j]) / rho)
    rhs = rho * kernels.matvec(loc.WT, np.concatenate(t)) - loc.l_ext
    return kernels.chol_solve(loc.factor, rhs)


def multiplier_update(loc: AdmmLocal, u_i, v_i, v1, v2, mu_i, mu1, mu2, rho: float):
    mu_i = np.asarray(mu_i) - rho * (loc.M @ u_i - loc.m_vec - v_i)
    mu1 = {j: np.asarray(mu1[j]) - rho * (loc.S[j] @ u_i - v1[j]) for j in loc.neighbors}
    mu2 = {j: np.asarray(mu2[j]) - rho * (loc.R[j] @ u_i - v2[j]) for j in loc.neighbors}
    return mu_i, mu1, mu2


def residuals(op: AdmmOperator, st: AdmmState, v_prev: np.ndarray | None = None) -> tuple[float, float, float]:
    r = np.abs((st.z - op.h) - st.v)
    local = op.partner < 0
    primal = float(r[local].max()) if local.any() else 0.0
    consensus = float(r[~local].max()) if (~local).any() else 0.0
    dual = 0.0 if v_prev is None else op.rho * float(np.abs(st.v - v_prev).max())
    return primal, consensus, dual


def extract_x(loc: AdmmLocal, u_i) -> np.ndarray:
    return np.asarray(u_i)[: loc.n].copy()


def initial_state(op: AdmmOperator) -> AdmmState:
    m = op.W.shape[0]
    return AdmmState(u=np.zeros(op.W.shape[1]), z=np.zeros(m), v=np.zeros(m), mu=np.zeros(m))


def warm_state(op: AdmmOperator, x: np.ndarray, eta: np.ndarray, row_offsets: Mapping[int, int]) -> AdmmState:
    """Iterate consistent with a primal-dual pair of the compact problem.

    ``eta`` uses the dual-ascent layout (``[lambda_i | zeta_i]`` per
    agent, starting at ``row_offsets[i]``).
    """
    prob = op.problem
    xs = prob.split(x)
    u = np.zeros(op.W.shape[1])
    mu = np.zeros(op.W.shape[0])
    zeta = {}
    for i in prob.nodes:
        lp = prob.locals[i]
        zeta[i] = eta[row_offsets[i] + lp.m : row_offsets[i] + lp.m + lp.K]
    for i, loc in op.locals.items():
        lp = prob.locals[i]
        ui = u[op.ucols(i)]
        ui[: loc.n] = xs[i]
        for j in loc.neighbors:
            ui[loc.copy_cols(j)] = prob.locals[j].layout.flow_series(xs[j], i)
        mi = mu[op.rows(i)]
        mi[: lp.m] = eta[row_offsets[i] : row_offsets[i] + lp.m]
        mi[lp.m : loc.m_rows] = zeta[i]
        for j in loc.neighbors:
            mi[loc.s_rows(j)] = -zeta[i]
            mi[loc.r_rows(j)] = zeta[j]
    z = kernels.matvec(op.W, u)
    v = z - op.h
    local = op.partner < 0
    v[local] = np.maximum(v[local], 0.0)
    return AdmmState(u=u, z=z, v=v, mu=mu)


def run_admm(
    problem: CompactProblem | AdmmOperator,
    config: AdmmConfig | None = None,
    reference: np.ndarray | None = None,
    state: AdmmState | None = None,
    callback=None,
) -> AdmmResult:
    """Sweep v -> u -> multipliers until every residual family is <= tol."""
    config = config or AdmmConfig()
    op = problem if isinstance(problem, AdmmOperator) else build_operator(problem, config.rho)
    if not math.isclose(op.rho, config.rho, rel_tol=0, abs_tol=0):
        raise ValueError("operator was factored for a different rho")
    st = initial_state(op) if state is None else state.copy()
    prob = op.problem
    quad, lin = prob.quad(), prob.lin()
    ref = None if reference is None else np.asarray(reference, dtype=float)
    trace = SolveTrace()
    res = (math.inf, math.inf, math.inf)
    converged = False
    s = st.iter
    while s < st.iter + config.max_iters:
        res = kernels.admm_iteration(
            op.W, op.WT, op.h, op.lext, op.rho, op.partner, op.chol, st.u, st.z, st.v, st.mu
        )
        s += 1
        x = st.u[op.x_index]
        dist = float(np.abs(x - ref).max()) if ref is not None else math.nan
        trace.append(s, kernels.quad_cost(x, quad, lin), res[0], res[1], math.nan, dist)
        if callback is not None:
            callback(s, st)
        if max(res) <= config.tol:
            converged = True
            break
    iterations = s - st.iter
    st.iter = s
    return AdmmResult(
        x=st.u[op.x_index].copy(),
        trace=trace,
        converged=converged,
        iterations=iterations,
        residuals=tuple(float(r) for r in res),
        state=st,
    )
