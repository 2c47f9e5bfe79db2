"""Receding-horizon control of the plant.

At every step the K-step problem is solved from the current plant
state, the first-step decisions are applied, storage evolves and the
realized balance slack is recorded.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import admm, dual, oracle
from .network import ForecastSeries, NetworkModel, StorageParams
from .problem import CompactProblem, build_compact
from .scenario import Scenario
from .trace import fmt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlantState:
    """Storage levels and last generator outputs at step ``t``."""

    t: int
    soc: Mapping[int, float]
    p_prev: Mapping[int, float]

    @classmethod
    def from_model(cls, model: NetworkModel, t: int = 0) -> "PlantState":
        return cls(
            t=t,
            soc={i: s.soc_prev for i, s in model.storages.items()},
            p_prev={i: g.p_prev for i, g in model.generators.items()},
        )

    def apply_to(self, model: NetworkModel) -> NetworkModel:
        """``model`` with its initial-state fields set from this state."""
        return model.replace(
            generators={i: dataclasses.replace(g, p_prev=self.p_prev[i]) for i, g in model.generators.items()},
            storages={i: dataclasses.replace(s, soc_prev=self.soc[i]) for i, s in model.storages.items()},
        )


@dataclass(frozen=True)
class Controls:
    """First-step decisions of one node; ``flows[j]`` is ``F_ij``."""

    P: float = 0.0
    Ec: float = 0.0
    Ed: float = 0.0
    flows: Mapping[int, float] = field(default_factory=dict)


def first_step_controls(problem: CompactProblem, x: np.ndarray) -> dict[int, Controls]:
    out = {}
    for i, xi in problem.split(x).items():
        lay = problem.locals[i].layout
        out[i] = Controls(
            P=float(xi[lay.p][0]) if lay.p is not None else 0.0,
            Ec=float(xi[lay.ec][0]) if lay.ec is not None else 0.0,
            Ed=float(xi[lay.ed][0]) if lay.ed is not None else 0.0,
            flows={j: float(xi[lay.flow_index(j, 0)]) for j in lay.neighbors},
        )
    return out


def next_soc(s: StorageParams, soc: float, ec: float, ed: float) -> float:
    return (1.0 - s.eff) * soc + s.c * ec - s.d * ed


def balance_slack(model: NetworkModel, controls: Mapping[int, Controls], demand: Mapping[int, float]) -> dict[int, float]:
    """``P - Ec + Ed + sum_j (F_ji - F_ij) - D`` per node."""
    out = {}
    for i in model.nodes:
        c = controls[i]
        net = sum(controls[j].flows[i] - c.flows[j] for j in model.neighbors(i))
        out[i] = c.P - c.Ec + c.Ed + net - demand[i]
    return out


@dataclass
class StepRecord:
    t: int
    controls: dict[int, Controls]
    demand: dict[int, float]
    slack: dict[int, float]
    soc: dict[int, float]
    iterations: int
    converged: bool
    cost: float
    clamped: list[int] = field(default_factory=list)


def step_plant(model: NetworkModel, state: PlantState, controls: Mapping[int, Controls],
               demand: Mapping[int, float], tol: float = 1e-5) -> tuple[PlantState, StepRecord]:
    """Advance storage by one step and record the realized balance.

    Storage rates may exceed their bounds by at most ``tol`` (solver
    feasibility slack).  A state of charge outside ``[0, soc_max]`` is
    clamped; beyond ``tol`` it is also reported as a model mismatch.
    """
    for i, s in model.storages.items():
        c = controls[i]
        if min(c.Ec, c.Ed) < -tol or c.Ec > s.e_c_max + tol or c.Ed > s.e_d_max + tol:
            raise ValueError(f"node {i}: storage rates outside their bounds")
    soc, clamped = {}, []
    for i, s in model.storages.items():
        val = next_soc(s, state.soc[i], controls[i].Ec, controls[i].Ed)
        if val < -tol or val > s.soc_max + tol:
            log.warning("node %d: state of charge %.6g outside [0, %.6g]; clamped", i, val, s.soc_max)
            clamped.append(i)
        soc[i] = min(max(val, 0.0), s.soc_max)
    p_prev = {i: controls[i].P for i in model.generators}
    record = StepRecord(
        t=state.t,
        controls=dict(controls),
        demand=dict(demand),
        slack=balance_slack(model, controls, demand),
        soc=soc,
        iterations=0,
        converged=True,
        cost=math.nan,
        clamped=clamped,
    )
    return PlantState(t=state.t + 1, soc=soc, p_prev=p_prev), record


def sample_realized_demand(forecast: ForecastSeries | Scenario, seed: int, k: int) -> dict[int, float]:
    """Gaussian demand at absolute step ``k``, truncated at zero.

    Mean and variance are read at index ``k`` (cyclically) of the
    forecast tables.  The draw depends only on ``(seed, k)``.
    """
    means, vars_ = forecast.demand_mean, forecast.demand_var
    nodes = sorted(means)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(k)])))
    z = rng.standard_normal(len(nodes))
    out = {}
    for i, zi in zip(nodes, z):
        mu = float(means[i][k % len(means[i])])
        var = float(vars_[i][k % len(vars_[i])])
        out[i] = max(mu + math.sqrt(var) * zi, 0.0) if var > 0 else mu
    return out


def shortfall_frequency(model: NetworkModel, controls: Mapping[int, Controls], forecast: ForecastSeries | Scenario,
                        k: int, draws: int = 2000, seed: int = 0) -> dict[int, float]:
    """Fraction of demand draws at step ``k`` that leave each node short."""
    short = {i: 0 for i in model.nodes}
    zero = {i: 0.0 for i in model.nodes}
    supply = balance_slack(model, controls, zero)
    for d in range(draws):
        demand = sample_realized_demand(forecast, seed * 1_000_003 + d, k)
        for i in model.nodes:
            if supply[i] - demand[i] < 0:
                short[i] += 1
    return {i: c / draws for i, c in short.items()}


@dataclass
class MpcLog:
    records: list[StepRecord] = field(default_factory=list)
    failure: str | None = None

    @property
    def steps(self) -> int:
        return len(self.records)

    def min_slack(self) -> float:
        return min((min(r.slack.values()) for r in self.records), default=math.inf)

    def total_cost(self) -> float:
        return math.fsum(r.cost for r in self.records)

    def write_csv(self, path: str | Path) -> None:
        cols = ["step", "node", "P", "Ec", "Ed", "F_out", "F_in", "demand", "slack", "soc", "iterations"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.records:
                for i in sorted(r.controls):
                    c = r.controls[i]
                    f_out = math.fsum(c.flows.values())
                    f_in = math.fsum(r.controls[j].flows[i] for j in c.flows)
                    writer.writerow(
                        [r.t, i]
                        + [fmt(v) for v in (c.P, c.Ec, c.Ed, f_out, f_in, r.demand[i], r.slack[i], r.soc.get(i, math.nan))]
                        + [r.iterations]
                    )


SOLVERS = ("dual", "admm", "reference")


def solve_window(problem: CompactProblem, solver: str, config=None, warm=None):
    """Solve one window; returns ``(x, iterations, converged, warm_state)``."""
    if solver == "dual":
        res = dual.run_dual_ascent(problem, config, eta0=warm)
        return res.x, res.iterations, res.converged, res.eta
    if solver == "admm":
        res = admm.run_admm(problem, config)
        return res.x, res.iterations, res.converged, None
    if solver == "reference":
        ref = oracle.solve_reference(problem)
        return ref.x, ref.iterations, ref.kkt.worst <= 1e-9, None
    raise ValueError(f"unknown solver {solver!r}; choose from {SOLVERS}")


def run_receding_horizon(
    scenario: Scenario,
    solver: str = "dual",
    steps: int | None = None,
    K: int | None = None,
    demand: str = "expected",
    seed: int = 0,
    config=None,
    warm_start: bool = True,
) -> MpcLog:
    """Closed loop over ``steps`` steps starting at ``t = 0``.

    ``demand`` selects the realized demand: ``"expected"`` (forecast
    mean), ``"tightened"`` (the covered level) or ``"sampled"``
    (:func:`sample_realized_demand` with ``seed``).  A window that does
    not converge stops the run; ``MpcLog.failure`` says why.
    """
    if demand not in ("expected", "tightened", "sampled"):
        raise ValueError(f"unknown demand mode {demand!r}")
    steps = scenario.steps if steps is None else steps
    K = scenario.model.horizon if K is None else K
    base = scenario.model.replace(horizon=K)
    state = PlantState.from_model(base)
    out = MpcLog()
    warm = None
    for _ in range(steps):
        t = state.t
        model = state.apply_to(base)
        forecast = scenario.forecast(t, K)
        try:
            problem = build_compact(model, forecast)
            x, iters, ok, warm_next = solve_window(problem, solver, config, warm if warm_start else None)
        except (ValueError, np.linalg.LinAlgError) as exc:
            out.failure = f"step {t}: {exc}"
            log.error(out.failure)
            break
        if not ok:
            out.failure = f"step {t}: {solver} did not converge in {iters} iterations"
            log.error(out.failure)
            break
        warm = warm_next
        controls = first_step_controls(problem, x)
        if demand == "expected":
            realized = {i: float(v[0]) for i, v in forecast.demand_mean.items()}
        elif demand == "tightened":
            realized = {i: float(v[0]) for i, v in problem.tightened.d_tilde.items()}
        else:
            realized = sample_realized_demand(scenario, seed, t)
        state, rec = step_plant(model, state, controls, realized)
        rec.iterations, rec.converged = iters, ok
        rec.cost = _first_step_cost(problem, x)
        out.records.append(rec)
    return out


def _first_step_cost(problem: CompactProblem, x: np.ndarray) -> float:
    """Cost of the applied (first-step) decisions."""
    mask = np.zeros(problem.n_total, dtype=bool)
    for i in problem.nodes:
        lay = problem.locals[i].layout
        off = problem.offsets[i]
        for sl in (lay.p, lay.ec, lay.ed):
            if sl is not None:
                mask[off + sl.start] = True
        for j in lay.neighbors:
            mask[off + lay.flow_index(j, 0)] = True
    q, l = problem.quad(), problem.lin()
    return math.fsum((0.5 * q * x * x + l * x)[mask])
