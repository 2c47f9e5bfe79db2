"""Centralized ground truth for the compact problem.

Built on scipy only and sharing no code with the distributed solvers:
the global QP is assembled here from the local matrices, solved by an
accelerated dual gradient method with adaptive restart, and finished by
an active-set polish that certifies the KKT conditions.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog, nnls

from .problem import CompactProblem

log = logging.getLogger(__name__)


class InfeasibleProblem(ValueError):
    """No point satisfies every tightened constraint."""

    def __init__(self, margin: float):
        super().__init__(f"Assumption 4 violated: best uniform constraint margin {margin:.6g} < 0")
        self.margin = margin


@dataclass(frozen=True, eq=False)
class GlobalQP:
    """``min 1/2 x'Qx + l'x  s.t.  H x <= h`` with diagonal ``Q``.

    Rows: every agent's local rows (node order), then every agent's
    balance rows.  ``row_node``/``row_kind`` label each row
    (kind 0 = local limit, 1 = balance).
    """

    H: sp.csr_matrix
    h: np.ndarray
    quad: np.ndarray
    lin: np.ndarray
    row_node: np.ndarray
    row_kind: np.ndarray
    problem: CompactProblem | None = None

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def cost(self, x: np.ndarray) -> float:
        return math.fsum(0.5 * self.quad * x * x + self.lin * x)

    def duals_by_agent(self, y: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Split a multiplier vector into ``(lambda_i, zeta_i)`` per node."""
        out = {}
        for i in np.unique(self.row_node):
            lam = y[(self.row_node == i) & (self.row_kind == 0)]
            zeta = y[(self.row_node == i) & (self.row_kind == 1)]
            out[int(i)] = (lam, zeta)
        return out

    def stacked_duals(self, y: np.ndarray) -> np.ndarray:
        """Multipliers reordered as ``[lambda_i | zeta_i]`` per node."""
        parts = self.duals_by_agent(y)
        return np.concatenate([np.concatenate(parts[i]) for i in sorted(parts)])


def assemble_global(problem: CompactProblem) -> GlobalQP:
    n = problem.n_total
    a_blocks, a_rhs, nodes_a = [], [], []
    for i in problem.nodes:
        lp = problem.locals[i]
        blk = sp.lil_matrix((lp.m, n))
        blk[:, problem.offsets[i] : problem.offsets[i] + lp.n] = lp.A
        a_blocks.append(blk.tocsr())
        a_rhs.append(lp.a)
        nodes_a.append(np.full(lp.m, i))
    c_blocks, c_rhs, nodes_c = [], [], []
    for i in problem.nodes:
        lp = problem.locals[i]
        blk = sp.lil_matrix((lp.K, n))
        blk[:, problem.offsets[i] : problem.offsets[i] + lp.n] = lp.B_self
        for j in lp.neighbors:
            other = problem.locals[j]
            off = problem.offsets[j]
            blk[:, off : off + other.n] = blk[:, off : off + other.n].toarray() + other.B_out[i]
        c_blocks.append(blk.tocsr())
        c_rhs.append(lp.b)
        nodes_c.append(np.full(lp.K, i))
    H = sp.vstack(a_blocks + c_blocks, format="csr")
    H.eliminate_zeros()
    m_a = sum(b.shape[0] for b in a_blocks)
    kind = np.concatenate([np.zeros(m_a, dtype=int), np.ones(H.shape[0] - m_a, dtype=int)])
    if H.shape[0] != sum(lp.m + lp.K for lp in problem.locals.values()):
        raise AssertionError("row count does not match the local problems")
    return GlobalQP(
        H=H,
        h=np.concatenate(a_rhs + c_rhs),
        quad=problem.quad(),
        lin=problem.lin(),
        row_node=np.concatenate(nodes_a + nodes_c),
        row_kind=kind,
        problem=problem,
    )


def feasibility_margin(qp: GlobalQP | CompactProblem) -> float:
    """Largest ``s <= 1`` with some ``H x + s <= h`` (HiGHS LP).

    Positive means strictly feasible, zero feasible without interior,
    negative infeasible.
    """
    qp = qp if isinstance(qp, GlobalQP) else assemble_global(qp)
    A = sp.hstack([qp.H, sp.csr_matrix(np.ones((qp.m, 1)))], format="csr")
    c = np.zeros(qp.n + 1)
    c[-1] = -1.0
    bounds = [(None, None)] * qp.n + [(None, 1.0)]
    res = linprog(c, A_ub=A, b_ub=qp.h, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    return float(-res.fun)


@dataclass
class KKTReport:
    """Absolute KKT residuals and their scale factors.

    ``worst`` compares each residual to its natural size: stationarity
    to ``1 + |l| + |Qx|``, feasibility to ``1 + |h|``, dual sign to
    ``1 + |y|`` and complementarity to the product of the last two.
    """

    stationarity: float
    primal: float
    dual: float
    complementarity: float
    scales: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    @property
    def scaled(self) -> tuple[float, float, float, float]:
        raw = (self.stationarity, self.primal, self.dual, self.complementarity)
        return tuple(r / s for r, s in zip(raw, self.scales))

    @property
    def worst(self) -> float:
        return max(self.scaled)


def kkt_residuals(qp: GlobalQP, x: np.ndarray, y: np.ndarray) -> KKTReport:
    g = qp.H @ x - qp.h
    qx = qp.quad * x
    s_stat = 1.0 + max(float(np.abs(qp.lin).max(initial=0.0)), float(np.abs(qx).max(initial=0.0)))
    s_feas = 1.0 + float(np.abs(qp.h).max(initial=0.0))
    s_dual = 1.0 + float(np.abs(y).max(initial=0.0))
    return KKTReport(
        stationarity=float(np.abs(qx + qp.lin + qp.H.T @ y).max(initial=0.0)),
        primal=float(max(0.0, g.max(initial=0.0))),
        dual=float(max(0.0, -y.min(initial=0.0))),
        complementarity=float(np.abs(y * g).max(initial=0.0)),
        scales=(s_stat, s_feas, s_dual, s_feas * s_dual),
    )


def dual_function(qp: GlobalQP, y: np.ndarray) -> float:
    x = -(qp.lin + qp.H.T @ y) / qp.quad
    return qp.cost(x) + math.fsum(y * (qp.H @ x - qp.h))


@dataclass
class ReferenceSolution:
    x: np.ndarray
    y: np.ndarray
    kkt: KKTReport
    iterations: int
    cost: float
    margin: float
    extra: dict = field(default_factory=dict)


def _polish(qp: GlobalQP, y: np.ndarray, g: np.ndarray, delta: float):
    """Candidate ``(x, y)`` pairs from the equality QP on a guessed active set."""
    active = np.flatnonzero((y > delta) | (g > -delta))
    qinv = 1.0 / qp.quad
    if not active.size:
        return [(-qinv * qp.lin, np.zeros(qp.m))]
    Ha = qp.H[active].toarray()
    S = (Ha * qinv) @ Ha.T
    rhs = -(qp.h[active] + Ha @ (qinv * qp.lin))
    nu = sla.lstsq(S, rhs, cond=1e-13)[0]
    # One step of iterative refinement.
    nu += sla.lstsq(S, rhs - S @ nu, cond=1e-13)[0]
    x = -qinv * (qp.lin + Ha.T @ nu)
    out = []
    y_eq = np.zeros(qp.m)
    y_eq[active] = np.maximum(nu, 0.0)
    out.append((x, y_eq))
    if nu.min() < 0:
        ya = nnls(Ha.T, -(qp.quad * x + qp.lin), maxiter=50 * active.size)[0]
        y_nn = np.zeros(qp.m)
        y_nn[active] = ya
        out.append((x, y_nn))
    return out


def solve_reference(qp: GlobalQP | CompactProblem, tol: float = 1e-9, max_iters: int = 400_000) -> ReferenceSolution:
    """High-accuracy solution with scaled KKT residuals ``<= tol``.

    Raises :class:`InfeasibleProblem` if the phase-one LP finds no
    feasible point.
    """
    qp = qp if isinstance(qp, GlobalQP) else assemble_global(qp)
    margin = feasibility_margin(qp)
    if margin < -1e-9:
        raise InfeasibleProblem(margin)
    qinv = 1.0 / qp.quad
    HT = qp.H.T.tocsr()
    if qp.m:
        scaled = qp.H @ sp.diags(np.sqrt(qinv))
        if min(scaled.shape) <= 400:
            L = float(np.linalg.norm(scaled.toarray(), 2) ** 2)
        else:
            gram = spla.LinearOperator((qp.m, qp.m), matvec=lambda v: scaled @ (scaled.T @ v), dtype=float)
            L = float(spla.eigsh(gram, k=1, which="LA", tol=1e-10, v0=np.ones(qp.m), return_eigenvectors=False)[0])
        L *= 1.0 + 1e-6
    else:
        L = 1.0
    y = np.zeros(qp.m)
    w = y.copy()
    theta = 1.0
    best = None
    it = 0
    check_every = 2000
    while it < max_iters:
        x = -qinv * (qp.lin + HT @ w)
        g = qp.H @ x - qp.h
        y_new = np.maximum(w + g / L, 0.0)
        # Gradient-based adaptive restart.
        if np.dot(g, y_new - y) < 0:
            theta = 1.0
            w = y.copy()
            it += 1
            continue
        theta_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
        w = y_new + ((theta - 1.0) / theta_new) * (y_new - y)
        y, theta = y_new, theta_new
        it += 1
        if it % check_every == 0:
            xy = -qinv * (qp.lin + HT @ y)
            gy = qp.H @ xy - qp.h
            scale = 1.0 + float(np.abs(y).max(initial=0.0))
            for delta in (1e-6 * scale, 1e-8 * scale, 1e-4 * scale):
                for xp, yp in _polish(qp, y, gy, delta):
                    rep = kkt_residuals(qp, xp, yp)
                    if best is None or rep.worst < best[2].worst:
                        best = (xp, yp, rep)
                    if rep.worst <= tol:
                        return ReferenceSolution(xp, yp, rep, it, qp.cost(xp), margin)
    if best is None:
        x = -qinv * (qp.lin + HT @ y)
        best = (x, y, kkt_residuals(qp, x, y))
    log.warning("reference solve stopped at KKT residual %.3g > %.3g", best[2].worst, tol)
    return ReferenceSolution(best[0], best[1], best[2], it, qp.cost(best[0]), margin, {"converged": False})


def _box(qp: GlobalQP) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(qp.n, -np.inf)
    hi = np.full(qp.n, np.inf)
    H = qp.H.tocsr()
    for r in range(qp.m):
        cols = H.indices[H.indptr[r] : H.indptr[r + 1]]
        vals = H.data[H.indptr[r] : H.indptr[r + 1]]
        if cols.size == 1 and vals[0] != 0:
            bound = qp.h[r] / vals[0]
            if vals[0] > 0:
                hi[cols[0]] = min(hi[cols[0]], bound)
            else:
                lo[cols[0]] = max(lo[cols[0]], bound)
    return lo, hi


def enumerate_tiny(qp: GlobalQP | CompactProblem, grid_step: float = 0.01, points: int = 11,
                   refine_to: float | None = None) -> np.ndarray:
    """Brute-force minimizer by nested grid search over the variable box.

    All grids lie on lattices ``lo + cell * k`` anchored at the lower box
    corner with ``cell = grid_step * 2**j``.  The first level covers the
    whole box with at most ``points`` nodes per axis; each later level
    halves the cell inside +-2 old cells around the incumbent.  Halving
    stops below ``refine_to`` (default ``grid_step / 1000``).  Because a
    run with ``grid_step / 2`` repeats every level of a run with
    ``grid_step`` and keeps the incumbent, its cost is never larger.
    """
    qp = qp if isinstance(qp, GlobalQP) else assemble_global(qp)
    if qp.n > 6:
        raise ValueError(f"enumerate_tiny handles at most 6 variables, got {qp.n}")
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    refine_to = grid_step * 1e-3 if refine_to is None else min(refine_to, grid_step)
    lo0, hi0 = _box(qp)
    if not (np.all(np.isfinite(lo0)) and np.all(np.isfinite(hi0))):
        raise ValueError("every variable needs finite single-variable bounds")
    Hd = qp.H.toarray()
    feas_tol = 1e-12 * (1.0 + np.abs(qp.h))
    span = hi0 - lo0

    def best_on(k_lo, k_hi, cell, incumbent):
        axes = [lo0[d] + cell * np.arange(k_lo[d], k_hi[d] + 1) for d in range(qp.n)]
        best_x, best_c = incumbent
        pts = np.array(list(itertools.product(*axes))) if axes else np.zeros((1, 0))
        for chunk in np.array_split(pts, max(1, len(pts) // 200_000)):
            ok = np.all(chunk @ Hd.T <= qp.h + feas_tol, axis=1)
            if not ok.any():
                continue
            cand = chunk[ok]
            costs = (0.5 * qp.quad * cand * cand + qp.lin * cand).sum(axis=1)
            k = int(np.argmin(costs))
            if costs[k] < best_c:
                best_x, best_c = cand[k].copy(), float(costs[k])
        return best_x, best_c

    cell = grid_step
    widest = float(span.max(initial=0.0))
    while widest / cell > points - 1:
        cell *= 2.0
    top = np.floor(span / cell + 1e-9).astype(np.int64)
    incumbent = best_on(np.zeros(qp.n, np.int64), top, cell, (None, math.inf))
    if incumbent[0] is None:
        raise InfeasibleProblem(-math.inf)
    while cell / 2.0 >= refine_to * (1 - 1e-12):
        cell /= 2.0
        top = np.floor(span / cell + 1e-9).astype(np.int64)
        centre = np.rint((incumbent[0] - lo0) / cell).astype(np.int64)
        incumbent = best_on(np.maximum(centre - 4, 0), np.minimum(centre + 4, top), cell, incumbent)
    return incumbent[0]


@dataclass
class ComplementarityReport:
    max_flow_ratio: float
    max_storage_ratio: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def complementarity_check(problem: CompactProblem, x: np.ndarray, tol: float = 1e-6) -> ComplementarityReport:
    """Opposite flows and simultaneous charge/discharge at a solution."""
    parts = problem.split(x)
    model = problem.model
    worst_f = worst_e = 0.0
    violations = []
    for (i, j) in sorted(model.edges):
        if i > j:
            continue
        fij = problem.locals[i].layout.flow_series(parts[i], j)
        fji = problem.locals[j].layout.flow_series(parts[j], i)
        scale = model.lines[(i, j)].f_max * model.lines[(j, i)].f_max
        for k, (a, b) in enumerate(zip(fij, fji)):
            ratio = max(a, 0.0) * max(b, 0.0) / scale
            worst_f = max(worst_f, ratio)
            if ratio > tol:
                violations.append(f"edge ({i},{j}) step {k}: F_ij*F_ji = {a * b:.6g}")
    for i, s in sorted(model.storages.items()):
        lay = problem.locals[i].layout
        ec, ed = parts[i][lay.ec], parts[i][lay.ed]
        scale = s.e_c_max * s.e_d_max
        for k, (a, b) in enumerate(zip(ec, ed)):
            ratio = max(a, 0.0) * max(b, 0.0) / scale
            worst_e = max(worst_e, ratio)
            if ratio > tol:
                violations.append(f"storage {i} step {k}: Ec*Ed = {a * b:.6g}")
    return ComplementarityReport(worst_f, worst_e, violations)
