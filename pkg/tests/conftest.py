import functools

import numpy as np
import pytest

from gridmpc import oracle
from gridmpc.network import ForecastSeries, GeneratorParams, LineParams, NetworkModel, symmetric_edges
from gridmpc.problem import build_compact, describe
from gridmpc.scenario import shipped_scenario


def tiny_model(flow_cost=(1.0, 1.0)):
    """Two nodes; node 1 has the generator, node 2 the demand."""
    varpi, nu = flow_cost
    return NetworkModel(
        nodes=(1, 2),
        edges=symmetric_edges([(1, 2)]),
        generators={1: GeneratorParams(alpha=2.0, omega=0.0, p_max=100.0, ramp_lo=-100.0, ramp_hi=100.0)},
        storages={},
        lines={(1, 2): LineParams(20.0, varpi, nu), (2, 1): LineParams(20.0, varpi, nu)},
        horizon=1,
    )


def tiny_forecast(d2=10.0, d1=0.0):
    return ForecastSeries(
        demand_mean={1: [d1], 2: [d2]},
        demand_var={1: [0.0], 2: [0.0]},
        cap_mean={1: [100.0]},
        cap_var={1: [0.0]},
        epsilon=0.25,
    )


def tiny_problem(d2=10.0):
    return build_compact(tiny_model(), tiny_forecast(d2))


@functools.lru_cache(maxsize=None)
def paper_problem(K: int):
    sc = shipped_scenario(K)
    return build_compact(sc.model, sc.forecast(0))


@functools.lru_cache(maxsize=None)
def paper_reference(K: int):
    return oracle.solve_reference(paper_problem(K))


@pytest.fixture(scope="session")
def problem3():
    return paper_problem(3)


@pytest.fixture(scope="session")
def reference3():
    return paper_reference(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(seed: int, max_nodes: int = 5, max_K: int = 3, strict: bool = True):
    """Small random connected network with generators and storage.

    With ``strict`` the demand is kept low enough that the tightened
    problem stays feasible.
    """
    from gridmpc.network import StorageParams, sample_line_params

    r = np.random.default_rng(seed)
    N = int(r.integers(2, max_nodes + 1))
    K = int(r.integers(1, max_K + 1))
    nodes = tuple(range(1, N + 1))
    pairs = [(i, int(r.integers(1, i))) for i in range(2, N + 1)]
    if N >= 3 and r.random() < 0.5:
        pairs.append((1, N))
    edges = symmetric_edges(pairs)
    gens = {
        i: GeneratorParams(
            alpha=float(r.uniform(0.5, 2.0)),
            omega=float(r.uniform(10, 150)),
            p_max=float(r.uniform(200, 500)),
            ramp_lo=-float(r.uniform(50, 150)),
            ramp_hi=float(r.uniform(50, 150)),
            p_prev=float(r.uniform(50, 150)),
        )
        for i in nodes
        if i == 1 or r.random() < 0.5
    }
    stores = {
        i: StorageParams(
            eff=float(r.uniform(0.0, 0.2)),
            c=float(r.uniform(0.8, 1.0)),
            d=float(r.uniform(0.8, 1.0)),
            e_c_max=50.0,
            e_d_max=50.0,
            soc_max=300.0,
            soc_prev=150.0,
            upsilon=float(r.uniform(0.5, 1.5)),
            varsigma=float(r.uniform(0.5, 1.5)),
        )
        for i in nodes
        if r.random() < 0.4
    }
    model = NetworkModel(nodes, edges, gens, stores, sample_line_params(seed, edges), horizon=K)
    fc = ForecastSeries(
        demand_mean={i: r.uniform(0, 20, K) for i in nodes},
        demand_var={i: r.uniform(0, 2, K) for i in nodes},
        cap_mean={i: np.full(K, g.p_max) for i, g in gens.items()},
        cap_var={i: np.zeros(K) for i in gens},
        epsilon=0.25,
    )
    return build_compact(model, fc)


def raw_feasible(p, x, tol=1e-9):
    """The original per-device limits, checked directly on named series."""
    m = p.model
    parts = p.split(x)
    series = {i: p.locals[i].layout for i in p.nodes}
    for i in p.nodes:
        lay, xi = series[i], parts[i]
        if lay.p is not None:
            g = m.generators[i]
            P = xi[lay.p]
            prev = np.concatenate([[g.p_prev], P[:-1]])
            if np.any(P < -tol) or np.any(P > p.tightened.p_tilde[i] + tol):
                return False
            if np.any(P - prev > g.ramp_hi + tol) or np.any(P - prev < g.ramp_lo - tol):
                return False
        if lay.ec is not None:
            s = m.storages[i]
            ec, ed = xi[lay.ec], xi[lay.ed]
            if np.any(ec < -tol) or np.any(ed < -tol) or np.any(ec > s.e_c_max + tol) or np.any(ed > s.e_d_max + tol):
                return False
            soc = s.soc_prev
            for k in range(p.K):
                soc = (1 - s.eff) * soc + s.c * ec[k] - s.d * ed[k]
                if soc < -tol or soc > s.soc_max + tol:
                    return False
        for j in lay.neighbors:
            f = lay.flow_series(xi, j)
            if np.any(f < -tol) or np.any(f > m.lines[(i, j)].f_max + tol):
                return False
    for i in p.nodes:
        d = describe(p.locals[i], parts[i])
        K = p.K
        net = np.asarray(d.get("P", np.zeros(K))) - np.asarray(d.get("Ec", np.zeros(K))) + np.asarray(d.get("Ed", np.zeros(K)))
        for j in m.neighbors(i):
            net = net + series[j].flow_series(parts[j], i) - series[i].flow_series(parts[i], j)
        if np.any(net < p.tightened.d_tilde[i] - tol):
            return False
    return True
