"""Interconnected-microgrid network: topology, plant parameters and forecasts."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

Edge = tuple[int, int]


@dataclass(frozen=True)
class GeneratorParams:
    """Aggregated generator of one microgrid.

    Cost is ``alpha/2 * P**2 + omega * P``; ``p_prev`` is the output
    applied in the step before the current horizon starts.
    """

    alpha: float
    omega: float
    p_max: float
    ramp_lo: float
    ramp_hi: float
    p_prev: float = 0.0


@dataclass(frozen=True)
class StorageParams:
    """Energy storage unit with leakage ``eff`` and charge/discharge gains.

    ``soc_prev`` is the state of charge at the start of the horizon.
    """

    eff: float
    c: float
    d: float
    e_c_max: float
    e_d_max: float
    soc_max: float
    soc_prev: float
    upsilon: float
    varsigma: float


@dataclass(frozen=True)
class LineParams:
    f_max: float
    varpi: float
    nu: float


@dataclass(frozen=True)
class NetworkModel:
    nodes: tuple[int, ...]
    edges: frozenset[Edge]
    generators: Mapping[int, GeneratorParams]
    storages: Mapping[int, StorageParams]
    lines: Mapping[Edge, LineParams]
    horizon: int
    sample_time: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes)))
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))
        object.__setattr__(self, "generators", dict(self.generators))
        object.__setattr__(self, "storages", dict(self.storages))
        object.__setattr__(self, "lines", dict(self.lines))

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Sorted neighbors of node ``i``; this order fixes every flow layout."""
        return tuple(sorted(neighbor_set(self, i)))

    def replace(self, **changes) -> "NetworkModel":
        kwargs = dict(
            nodes=self.nodes,
            edges=self.edges,
            generators=self.generators,
            storages=self.storages,
            lines=self.lines,
            horizon=self.horizon,
            sample_time=self.sample_time,
        )
        kwargs.update(changes)
        return NetworkModel(**kwargs)


@dataclass(frozen=True)
class ForecastSeries:
    """First two moments of demand and generator capacity over one horizon.

    Each map goes node -> array of length K (step k = 0..K-1 of the window).
    """

    demand_mean: Mapping[int, np.ndarray]
    demand_var: Mapping[int, np.ndarray]
    cap_mean: Mapping[int, np.ndarray]
    cap_var: Mapping[int, np.ndarray]
    epsilon: float

    def __post_init__(self):
        for name in ("demand_mean", "demand_var", "cap_mean", "cap_var"):
            frozen = {}
            for node, values in getattr(self, name).items():
                arr = np.array(values, dtype=float)
                arr.setflags(write=False)
                frozen[int(node)] = arr
            object.__setattr__(self, name, frozen)

    def missing(self, model: NetworkModel) -> list[str]:
        """Describe every way this forecast fails to cover ``model``."""
        problems = []
        K = model.horizon
        if not 0.0 < self.epsilon < 1.0:
            problems.append(f"epsilon {self.epsilon} outside (0, 1)")
        tables = [
            ("demand_mean", self.demand_mean, model.nodes),
            ("demand_var", self.demand_var, model.nodes),
            ("cap_mean", self.cap_mean, sorted(model.generators)),
            ("cap_var", self.cap_var, sorted(model.generators)),
        ]
        for name, table, owners in tables:
            for node in owners:
                series = table.get(node)
                if series is None:
                    problems.append(f"{name} missing for node {node}")
                elif len(series) < K:
                    problems.append(f"{name} for node {node} has {len(series)} < {K} steps")
                elif name.endswith("var") and np.any(series < 0):
                    problems.append(f"{name} for node {node} has negative entries")
        return problems


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def neighbor_set(model: NetworkModel, i: int) -> set[int]:
    if i not in model.nodes:
        raise KeyError(f"unknown node {i}")
    return {j for (a, j) in model.edges if a == i}


def _components(nodes: Iterable[int], edges: Iterable[Edge]) -> list[set[int]]:
    adjacency: dict[int, set[int]] = {n: set() for n in nodes}
    for i, j in edges:
        if i in adjacency and j in adjacency:
            adjacency[i].add(j)
            adjacency[j].add(i)
    seen: set[int] = set()
    components = []
    for start in sorted(adjacency):
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in adjacency[node]:
                if nxt not in comp:
                    comp.add(nxt)
                    queue.append(nxt)
        seen |= comp
        components.append(comp)
    return components


def validate_network(model: NetworkModel) -> ValidationReport:
    """Check the structural assumptions on the network and its parameters.

    Never raises; every finding is appended to the report.
    """
    report = ValidationReport()
    v = report.violations
    nodes = set(model.nodes)
    if not nodes:
        v.append("network has no nodes")
    if model.horizon < 1:
        v.append(f"horizon K={model.horizon} must be >= 1")
    if model.sample_time <= 0:
        v.append(f"sample time {model.sample_time} must be positive")

    for i, j in sorted(model.edges):
        if i not in nodes or j not in nodes:
            v.append(f"edge ({i},{j}) references unknown node")
        elif i == j:
            v.append(f"self-loop ({i},{j})")
        elif (j, i) not in model.edges:
            v.append(f"missing reverse edge ({j},{i})")
        if (i, j) not in model.lines:
            v.append(f"edge ({i},{j}) has no line parameters")
    for edge in sorted(set(model.lines) - set(model.edges)):
        v.append(f"line parameters for non-edge {edge}")

    components = _components(model.nodes, model.edges)
    if len(components) > 1:
        main = max(components, key=len)
        for comp in components:
            if comp is main:
                continue
            for node in sorted(comp):
                v.append(f"node {node} disconnected")

    for node, g in sorted(model.generators.items()):
        if node not in nodes:
            v.append(f"generator at unknown node {node}")
        if not g.alpha > 0:
            v.append(f"generator {node}: alpha must be > 0")
        if not g.p_max > 0:
            v.append(f"generator {node}: p_max must be > 0")
        if not g.ramp_lo <= 0 <= g.ramp_hi:
            v.append(f"generator {node}: need ramp_lo <= 0 <= ramp_hi")
    for node, s in sorted(model.storages.items()):
        if node not in nodes:
            v.append(f"storage at unknown node {node}")
        if not 0 <= s.eff < 1:
            v.append(f"storage {node}: eff must be in [0, 1)")
        if not (s.c > 0 and s.d > 0):
            v.append(f"storage {node}: c and d must be > 0")
        if not (s.e_c_max > 0 and s.e_d_max > 0 and s.soc_max > 0):
            v.append(f"storage {node}: bounds must be positive")
        if not 0 <= s.soc_prev <= s.soc_max:
            v.append(f"storage {node}: soc_prev outside [0, soc_max]")
        if not (s.upsilon > 0 and s.varsigma > 0):
            v.append(f"storage {node}: cost coefficients must be > 0")
    for edge, line in sorted(model.lines.items()):
        if not line.f_max > 0:
            v.append(f"line {edge}: f_max must be > 0")
        if not line.varpi > 0:
            v.append(f"line {edge}: varpi must be > 0")
        if not all(math.isfinite(x) for x in (line.f_max, line.varpi, line.nu)):
            v.append(f"line {edge}: non-finite parameter")
    return report


VARPI_RANGE = (0.1, 0.3)
NU_RANGE = (0.5, 1.0)
F_MAX_RANGE = (100.0, 400.0)


def sample_line_params(seed: int, edges: Iterable[Edge]) -> dict[Edge, LineParams]:
    """Draw random line parameters, reproducibly.

    Uses numpy's PCG64 bit generator seeded with ``seed`` (a 64-bit
    integer). With the directed edges in sorted order, one uniform
    vector is drawn per field in the order ``varpi``, ``nu``, ``f_max``;
    the two directions of a line therefore get independent values.
    """
    ordered = sorted((int(i), int(j)) for i, j in edges)
    rng = np.random.Generator(np.random.PCG64(seed))
    varpi = rng.uniform(*VARPI_RANGE, size=len(ordered))
    nu = rng.uniform(*NU_RANGE, size=len(ordered))
    f_max = rng.uniform(*F_MAX_RANGE, size=len(ordered))
    return {
        edge: LineParams(f_max=float(f), varpi=float(w), nu=float(v))
        for edge, w, v, f in zip(ordered, varpi, nu, f_max)
    }


def derive_seed(seed: int, attempt: int) -> int:
    """Seed for the ``attempt``-th redraw; attempt 0 is ``seed`` itself."""
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), int(attempt)]).generate_state(1, np.uint64)[0])


def symmetric_edges(pairs: Iterable[tuple[int, int]]) -> frozenset[Edge]:
    """Both directions of every undirected pair."""
    out = set()
    for i, j in pairs:
        out.add((int(i), int(j)))
        out.add((int(j), int(i)))
    return frozenset(out)
