"""Chance-constraint tightening and assembly of the per-agent compact problem.

Every agent ``i`` owns the local vector ``x_i = [P | Ec | Ed | F]`` where
blocks are present only if the node has a generator / storage unit, and
``F`` lists ``F_ij(k)`` step-major (``k`` outer, sorted neighbor ``j``
inner).  The compact problem is::

    min  sum_i Phi_i(x_i)
    s.t. A_i x_i <= a_i                                (local limits)
         B_ii x_i + sum_{j in N_i} B_ji x_j <= b_i     (tightened balance)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import (
    ForecastSeries,
    GeneratorParams,
    LineParams,
    NetworkModel,
    StorageParams,
    validate_network,
)

log = logging.getLogger(__name__)


def chance_coefficient(epsilon: float) -> float:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    return math.sqrt((1.0 - epsilon) / epsilon)


@dataclass(frozen=True)
class TightenedForecast:
    d_tilde: Mapping[int, np.ndarray]
    p_tilde: Mapping[int, np.ndarray]


def tighten_demand(forecast: ForecastSeries) -> dict[int, np.ndarray]:
    """Deterministic demand level that must be covered at each node and step.

    The dispersion moment is used exactly as given (added with weight
    ``sqrt((1-eps)/eps)``); no square root is taken.
    """
    coef = chance_coefficient(forecast.epsilon)
    return {
        node: np.asarray(mean, dtype=float) + coef * np.asarray(forecast.demand_var[node], dtype=float)
        for node, mean in forecast.demand_mean.items()
    }


def tighten_capacity(forecast: ForecastSeries) -> dict[int, np.ndarray]:
    """Usable generator capacity; clamped at zero with a warning."""
    coef = chance_coefficient(forecast.epsilon)
    out = {}
    for node, mean in forecast.cap_mean.items():
        raw = np.asarray(mean, dtype=float) - coef * np.asarray(forecast.cap_var[node], dtype=float)
        if np.any(raw < 0):
            log.warning("tightened capacity of node %s negative; clamped to 0", node)
        out[node] = np.maximum(raw, 0.0)
    return out


def tighten(forecast: ForecastSeries) -> TightenedForecast:
    return TightenedForecast(d_tilde=tighten_demand(forecast), p_tilde=tighten_capacity(forecast))


def assemble_generator_block(g: GeneratorParams, K: int, p_tilde) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``A^g P <= a^g`` over the K generator columns.

    Row blocks: K upper bounds, K lower bounds, K-1 ramp-up and K-1
    ramp-down differences.  The ramp limit relative to ``p_prev`` is
    folded into the first upper and lower bound.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    p_tilde = np.asarray(p_tilde, dtype=float)[:K]
    eye = np.eye(K)
    diff = eye[1:] - eye[:-1]  # P(k+1) - P(k)
    A = np.vstack([eye, -eye, diff, -diff])
    upper = p_tilde.copy()
    upper[0] = min(p_tilde[0], g.p_prev + g.ramp_hi)
    lower = np.zeros(K)
    lower[0] = -max(0.0, g.p_prev + g.ramp_lo)
    a = np.concatenate([upper, lower, np.full(K - 1, g.ramp_hi), np.full(K - 1, -g.ramp_lo)])
    return A, a


def soc_response(s: StorageParams, K: int) -> np.ndarray:
    """K x 2K map from ``[Ec | Ed]`` to the controlled part of SoC(t0+1..t0+K)."""
    keep = 1.0 - s.eff
    T = np.zeros((K, K))
    for row in range(K):
        for col in range(row + 1):
            T[row, col] = keep ** (row - col)
    return np.hstack([s.c * T, -s.d * T])


def assemble_storage_block(s: StorageParams, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``A^e [Ec; Ed] <= a^e``: rate bounds then unrolled SoC bounds."""
    if K < 1:
        raise ValueError("K must be >= 1")
    eye = np.eye(2 * K)
    soc = soc_response(s, K)
    A = np.vstack([eye, -eye, soc, -soc])
    decay = (1.0 - s.eff) ** np.arange(1, K + 1) * s.soc_prev
    a = np.concatenate(
        [
            np.full(K, s.e_c_max),
            np.full(K, s.e_d_max),
            np.zeros(2 * K),
            s.soc_max - decay,
            decay,
        ]
    )
    return A, a


def assemble_flow_block(lines: list[LineParams], K: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``0 <= F_ij(k) <= f_max`` over the step-major flow block."""
    if not lines:
        raise ValueError("node needs at least one line")
    size = K * len(lines)
    eye = np.eye(size)
    caps = np.tile([ln.f_max for ln in lines], K)
    return np.vstack([eye, -eye]), np.concatenate([caps, np.zeros(size)])


@dataclass(frozen=True)
class Layout:
    """Column layout of one agent's local vector."""

    K: int
    neighbors: tuple[int, ...]
    p: slice | None
    ec: slice | None
    ed: slice | None
    f: slice

    @property
    def n(self) -> int:
        return self.f.stop

    def flow_index(self, j: int, k: int) -> int:
        return self.f.start + k * len(self.neighbors) + self.neighbors.index(j)

    def flow_series(self, x: np.ndarray, j: int) -> np.ndarray:
        deg = len(self.neighbors)
        start = self.f.start + self.neighbors.index(j)
        return np.asarray(x)[start : self.f.stop : deg]


def make_layout(K: int, has_gen: bool, has_storage: bool, neighbors: tuple[int, ...]) -> Layout:
    pos = 0
    p = ec = ed = None
    if has_gen:
        p = slice(pos, pos + K)
        pos += K
    if has_storage:
        ec = slice(pos, pos + K)
        ed = slice(pos + K, pos + 2 * K)
        pos += 2 * K
    f = slice(pos, pos + K * len(neighbors))
    return Layout(K=K, neighbors=tuple(neighbors), p=p, ec=ec, ed=ed, f=f)


@dataclass(frozen=True)
class LocalProblem:
    node: int
    A: np.ndarray
    a: np.ndarray
    B_self: np.ndarray
    B_out: Mapping[int, np.ndarray]
    b: np.ndarray
    cost_quad: np.ndarray
    cost_lin: np.ndarray
    layout: Layout

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.layout.K

    @property
    def neighbors(self) -> tuple[int, ...]:
        return self.layout.neighbors


def assemble_coupling(
    model: NetworkModel, forecast: ForecastSeries | TightenedForecast, i: int, K: int | None = None
) -> tuple[np.ndarray, dict[int, np.ndarray], np.ndarray]:
    """Balance rows of agent ``i``.

    Signs make ``B_self x_i + sum_j B_ji x_j <= b_i`` identical to
    ``P - Ec + Ed + sum_j (F_ji - F_ij) >= D~``.
    """
    K = model.horizon if K is None else K
    tight = forecast if isinstance(forecast, TightenedForecast) else tighten(forecast)
    layout = make_layout(K, i in model.generators, i in model.storages, model.neighbors(i))
    n = layout.n
    eye = np.eye(K)
    B_self = np.zeros((K, n))
    if layout.p is not None:
        B_self[:, layout.p] = -eye
    if layout.ec is not None:
        B_self[:, layout.ec] = eye
        B_self[:, layout.ed] = -eye
    deg = len(layout.neighbors)
    B_self[:, layout.f] = np.kron(eye, np.ones((1, deg)))
    B_out = {}
    for j in layout.neighbors:
        B = np.zeros((K, n))
        for k in range(K):
            B[k, layout.flow_index(j, k)] = -1.0
        B_out[j] = B
    b = -np.asarray(tight.d_tilde[i], dtype=float)[:K]
    return B_self, B_out, b


def build_local(model: NetworkModel, tight: TightenedForecast, i: int) -> LocalProblem:
    K = model.horizon
    nbrs = model.neighbors(i)
    layout = make_layout(K, i in model.generators, i in model.storages, nbrs)
    n = layout.n
    rows, rhs = [], []
    quad = np.empty(n)
    lin = np.empty(n)

    if layout.p is not None:
        g = model.generators[i]
        Ag, ag = assemble_generator_block(g, K, tight.p_tilde[i])
        block = np.zeros((Ag.shape[0], n))
        block[:, layout.p] = Ag
        rows.append(block)
        rhs.append(ag)
        quad[layout.p] = g.alpha
        lin[layout.p] = g.omega
    if layout.ec is not None:
        s = model.storages[i]
        Ae, ae = assemble_storage_block(s, K)
        block = np.zeros((Ae.shape[0], n))
        block[:, layout.ec.start : layout.ed.stop] = Ae
        rows.append(block)
        rhs.append(ae)
        quad[layout.ec] = s.upsilon
        quad[layout.ed] = s.varsigma
        lin[layout.ec] = 0.0
        lin[layout.ed] = 0.0
    if nbrs:
        lines = [model.lines[(i, j)] for j in nbrs]
        Af, af = assemble_flow_block(lines, K)
        block = np.zeros((Af.shape[0], n))
        block[:, layout.f] = Af
        rows.append(block)
        rhs.append(af)
        quad[layout.f] = np.tile([ln.varpi for ln in lines], K)
        lin[layout.f] = np.tile([ln.nu for ln in lines], K)

    A = np.vstack(rows) if rows else np.zeros((0, n))
    a = np.concatenate(rhs) if rhs else np.zeros(0)
    B_self, B_out, b = assemble_coupling(model, tight, i, K)
    for arr in (A, a, B_self, b, quad, lin, *B_out.values()):
        arr.setflags(write=False)
    return LocalProblem(
        node=i, A=A, a=a, B_self=B_self, B_out=B_out, b=b, cost_quad=quad, cost_lin=lin, layout=layout
    )


@dataclass(frozen=True)
class CompactProblem:
    model: NetworkModel
    tightened: TightenedForecast
    locals: Mapping[int, LocalProblem]
    offsets: Mapping[int, int]
    sigma_min: float
    l_max: float

    @property
    def nodes(self) -> tuple[int, ...]:
        return self.model.nodes

    @property
    def K(self) -> int:
        return self.model.horizon

    @property
    def n_total(self) -> int:
        return sum(lp.n for lp in self.locals.values())

    def global_index(self, node: int, r: int) -> int:
        lp = self.locals[node]
        if not 0 <= r < lp.n:
            raise IndexError(f"local index {r} out of range for node {node}")
        return self.offsets[node] + r

    def split(self, x: np.ndarray) -> dict[int, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return {i: x[self.offsets[i] : self.offsets[i] + self.locals[i].n] for i in self.nodes}

    def join(self, parts: Mapping[int, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[i], dtype=float) for i in self.nodes])

    def cost(self, x: np.ndarray) -> float:
        parts = self.split(x)
        return math.fsum(cost_eval(self.locals[i], parts[i]) for i in self.nodes)

    def quad(self) -> np.ndarray:
        return np.concatenate([self.locals[i].cost_quad for i in self.nodes])

    def lin(self) -> np.ndarray:
        return np.concatenate([self.locals[i].cost_lin for i in self.nodes])


def build_compact(model: NetworkModel, forecast: ForecastSeries) -> CompactProblem:
    report = validate_network(model)
    if not report.ok:
        raise ValueError("invalid network: " + "; ".join(report.violations))
    missing = forecast.missing(model)
    if missing:
        raise ValueError("incomplete forecast: " + "; ".join(missing))
    tight = tighten(forecast)
    locals_ = {}
    offsets = {}
    pos = 0
    for i in model.nodes:
        lp = build_local(model, tight, i)
        locals_[i] = lp
        offsets[i] = pos
        pos += lp.n
    quads = np.concatenate([lp.cost_quad for lp in locals_.values()])
    if quads.size and not np.all(quads > 0):
        raise ValueError("every cost coordinate needs a positive quadratic coefficient")
    return CompactProblem(
        model=model,
        tightened=tight,
        locals=locals_,
        offsets=offsets,
        sigma_min=float(quads.min()) if quads.size else math.inf,
        l_max=float(quads.max()) if quads.size else 0.0,
    )


def cost_eval(lp: LocalProblem, x) -> float:
    x = _check_dim(lp, x)
    return float(np.sum(0.5 * lp.cost_quad * x * x + lp.cost_lin * x))


def cost_grad(lp: LocalProblem, x) -> np.ndarray:
    x = _check_dim(lp, x)
    return lp.cost_quad * x + lp.cost_lin


def _check_dim(lp: LocalProblem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (lp.n,):
        raise ValueError(f"expected vector of length {lp.n}, got shape {x.shape}")
    return x


def describe(lp: LocalProblem, x) -> dict:
    """Named series of one agent's decisions."""
    x = _check_dim(lp, x)
    lay = lp.layout
    out = {}
    if lay.p is not None:
        out["P"] = x[lay.p].tolist()
    if lay.ec is not None:
        out["Ec"] = x[lay.ec].tolist()
        out["Ed"] = x[lay.ed].tolist()
    out["F"] = {str(j): lay.flow_series(x, j).tolist() for j in lay.neighbors}
    return out
