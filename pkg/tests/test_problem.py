import logging
import math

import numpy as np
import pytest

from conftest import paper_problem, random_instance, raw_feasible
from gridmpc.network import ForecastSeries, GeneratorParams, LineParams, NetworkModel, StorageParams, symmetric_edges
from gridmpc.problem import (
    assemble_coupling,
    assemble_flow_block,
    assemble_generator_block,
    assemble_storage_block,
    build_compact,
    chance_coefficient,
    cost_eval,
    cost_grad,
    describe,
    soc_response,
    tighten_capacity,
    tighten_demand,
)
from gridmpc.scenario import paper_demand_mean, shipped_scenario

G1 = GeneratorParams(alpha=2.0, omega=110.25, p_max=400.0, ramp_lo=-80.0, ramp_hi=80.0, p_prev=0.0)
E1 = StorageParams(eff=0.95, c=0.92, d=0.94, e_c_max=50.0, e_d_max=50.0, soc_max=500.0, soc_prev=500.0,
                   upsilon=0.75, varsigma=0.85)


def fc(mean, var, eps=0.25, cap=None, cap_var=None):
    return ForecastSeries(
        demand_mean={1: np.atleast_1d(mean)},
        demand_var={1: np.atleast_1d(var)},
        cap_mean={} if cap is None else {1: np.atleast_1d(cap)},
        cap_var={} if cap is None else {1: np.atleast_1d(cap_var)},
        epsilon=eps,
    )


def test_chance_coefficient():
    assert chance_coefficient(0.25) == pytest.approx(math.sqrt(3))
    with pytest.raises(ValueError):
        chance_coefficient(1.0)


def test_tighten_demand_examples():
    assert tighten_demand(fc(60.0, 10.0))[1][0] == pytest.approx(77.32050807568877, abs=1e-12)
    assert tighten_demand(fc(60.0, 0.0, eps=0.01))[1][0] == 60.0
    mean = paper_demand_mean(5, 0)
    assert mean == 50.0
    assert tighten_demand(fc(mean, 10.0))[1][0] == pytest.approx(67.32050807568877, abs=1e-12)


def test_tighten_capacity_examples(caplog):
    assert tighten_capacity(fc(0, 0, cap=400.0, cap_var=0.0))[1][0] == 400.0
    assert tighten_capacity(fc(0, 0, cap=100.0, cap_var=20.0))[1][0] == pytest.approx(100 - 20 * math.sqrt(3))
    with caplog.at_level(logging.WARNING):
        assert tighten_capacity(fc(0, 0, cap=10.0, cap_var=20.0))[1][0] == 0.0
    assert "clamped" in caplog.text


def test_generator_block_k1():
    g = GeneratorParams(alpha=1, omega=1, p_max=100, ramp_lo=-30, ramp_hi=30, p_prev=50)
    A, a = assemble_generator_block(g, 1, [100.0])
    np.testing.assert_array_equal(A, [[1.0], [-1.0]])
    np.testing.assert_array_equal(a, [80.0, -20.0])


def test_generator_block_k3_g1():
    A, a = assemble_generator_block(G1, 3, [400.0] * 3)
    assert A.shape == (10, 3)
    assert a[0] == 80.0
    assert a[3] == 0.0
    # Ramp rows: P(k+1) - P(k) <= 80 and P(k) - P(k+1) <= 80.
    np.testing.assert_array_equal(A[6], [-1, 1, 0])
    np.testing.assert_array_equal(a[6:], [80, 80, 80, 80])


def test_storage_block_k1():
    A, a = assemble_storage_block(E1, 1)
    assert A.shape == (6, 2)
    np.testing.assert_array_equal(A[4], [0.92, -0.94])
    assert a[4] == pytest.approx(475.0)
    assert a[5] == pytest.approx(25.0)


def test_storage_response_matches_simulation(rng):
    K = 4
    u = rng.uniform(0, 50, 2 * K)
    soc, traj = E1.soc_prev, []
    for k in range(K):
        soc = (1 - E1.eff) * soc + E1.c * u[k] - E1.d * u[K + k]
        traj.append(soc)
    free = (1 - E1.eff) ** np.arange(1, K + 1) * E1.soc_prev
    np.testing.assert_allclose(soc_response(E1, K) @ u + free, traj, rtol=1e-13)


def test_storage_response_no_memory_limit():
    s = StorageParams(eff=1 - 1e-15, c=0.9, d=0.8, e_c_max=1, e_d_max=1, soc_max=1, soc_prev=0, upsilon=1, varsigma=1)
    R = soc_response(s, 3)
    np.testing.assert_allclose(R[:, :3], 0.9 * np.eye(3), atol=1e-14)
    np.testing.assert_allclose(R[:, 3:], -0.8 * np.eye(3), atol=1e-14)


def test_flow_block_examples():
    A, a = assemble_flow_block([LineParams(300.0, 0.2, 0.6)], 1)
    np.testing.assert_array_equal(A, [[1.0], [-1.0]])
    np.testing.assert_array_equal(a, [300.0, 0.0])
    A, a = assemble_flow_block([LineParams(300.0, 0.2, 0.6), LineParams(150.0, 0.2, 0.6)], 3)
    assert A.shape == (12, 6)
    np.testing.assert_array_equal(a[:6], [300, 150] * 3)
    assert not a[6:].any()


def two_bus(gen=True, store=True, K=2):
    model = NetworkModel(
        nodes=(1, 2),
        edges=symmetric_edges([(1, 2)]),
        generators={1: G1} if gen else {},
        storages={1: E1} if store else {},
        lines={(1, 2): LineParams(100, 0.2, 0.6), (2, 1): LineParams(100, 0.2, 0.6)},
        horizon=K,
    )
    forecast = ForecastSeries(
        demand_mean={1: [5.0] * K, 2: [7.0] * K},
        demand_var={1: [0.0] * K, 2: [0.0] * K},
        cap_mean={1: [400.0] * K} if gen else {},
        cap_var={1: [0.0] * K} if gen else {},
        epsilon=0.25,
    )
    return model, forecast


def test_coupling_gen_and_storage_layout():
    model, forecast = two_bus(K=2)
    B_self, B_out, b = assemble_coupling(model, forecast, 1)
    I = np.eye(2)
    np.testing.assert_array_equal(B_self, np.hstack([-I, I, -I, I]))
    np.testing.assert_array_equal(B_out[2], np.hstack([0 * I, 0 * I, 0 * I, -I]))
    np.testing.assert_array_equal(b, [-5.0, -5.0])


def test_coupling_flow_only_node():
    model, forecast = two_bus(K=2)
    B_self, B_out, b = assemble_coupling(model, forecast, 2)
    np.testing.assert_array_equal(B_self, np.eye(2))
    np.testing.assert_array_equal(B_out[1], -np.eye(2))


def test_coupling_numeric_equivalence():
    model, forecast = two_bus(store=False, K=1)
    forecast = ForecastSeries({1: [7.0], 2: [0.0]}, {1: [0.0], 2: [0.0]}, {1: [400.0]}, {1: [0.0]}, 0.25)
    B1, _, b1 = assemble_coupling(model, forecast, 1)
    _, B2_out, _ = assemble_coupling(model, forecast, 2)
    x1 = np.array([10.0, 4.0])  # P, F_12
    x2 = np.array([2.0])  # F_21
    lhs = B1 @ x1 + B2_out[1] @ x2
    assert lhs[0] == -8.0 and lhs[0] <= b1[0]


def test_build_compact_dimensions_ieee30():
    p = paper_problem(3)
    m = p.model
    K = 3
    lp2 = p.locals[2]
    assert lp2.n == 3 + 6 + 3 * len(m.neighbors(2))
    for i, lp in p.locals.items():
        deg = len(m.neighbors(i))
        n = (K if i in m.generators else 0) + (2 * K if i in m.storages else 0) + K * deg
        rows = (4 * K - 2 if i in m.generators else 0) + (6 * K if i in m.storages else 0) + 2 * K * deg
        assert (lp.n, lp.m) == (n, rows)
        assert np.all(lp.cost_quad > 0)
        for j in lp.neighbors:
            B = lp.B_out[j]
            cols = [lp.layout.flow_index(j, k) for k in range(K)]
            np.testing.assert_array_equal(B[:, cols], -np.eye(K))
            assert not np.delete(B, cols, axis=1).any()
    q = p.quad()
    assert p.sigma_min == q.min() and p.l_max == q.max()
    line_min = min(ln.varpi for ln in m.lines.values())
    assert p.sigma_min == line_min
    idx = sorted(p.global_index(i, r) for i in p.nodes for r in range(p.locals[i].n))
    assert idx == list(range(p.n_total))


def test_flow_only_node_cost():
    model, forecast = two_bus(store=False, K=1)
    p = build_compact(model, forecast)
    lp = p.locals[2]
    assert lp.n == 1
    assert cost_eval(lp, [3.0]) == pytest.approx(0.2 / 2 * 9 + 0.6 * 3)


def test_build_compact_errors():
    model, forecast = two_bus()
    with pytest.raises(ValueError, match="incomplete forecast"):
        build_compact(model, ForecastSeries({1: [1.0, 1.0]}, {1: [0.0, 0.0]}, {1: [1.0, 1.0]}, {1: [0.0, 0.0]}, 0.25))
    with pytest.raises(ValueError, match="invalid network"):
        build_compact(model.replace(edges={(1, 2)}), forecast)


def test_cost_eval_and_grad(rng):
    model = NetworkModel((1, 2), symmetric_edges([(1, 2)]), {1: G1}, {}, {(1, 2): LineParams(100, 0.2, 0.6), (2, 1): LineParams(100, 0.2, 0.6)}, 1)
    forecast = ForecastSeries({1: [0.0], 2: [0.0]}, {1: [0.0], 2: [0.0]}, {1: [400.0]}, {1: [0.0]}, 0.25)
    lp = build_compact(model, forecast).locals[1]
    x = np.zeros(lp.n)
    x[lp.layout.p] = 1.0
    x[lp.layout.f] = 0.0
    assert cost_eval(lp, x) == pytest.approx(111.25)
    assert cost_eval(lp, np.zeros(lp.n)) == 0.0
    np.testing.assert_array_equal(cost_grad(lp, np.zeros(lp.n)), lp.cost_lin)
    x = rng.normal(size=lp.n) * 10
    h = 1e-4
    fd = [(cost_eval(lp, x + h * e) - cost_eval(lp, x - h * e)) / (2 * h) for e in np.eye(lp.n)]
    np.testing.assert_allclose(cost_grad(lp, x), fd, rtol=1e-6)
    with pytest.raises(ValueError):
        cost_eval(lp, np.zeros(lp.n + 1))


def stacked_feasible(p, x, tol=1e-9):
    parts = p.split(x)
    for i, lp in p.locals.items():
        if np.any(lp.A @ parts[i] > lp.a + tol):
            return False
        lhs = lp.B_self @ parts[i] + sum(p.locals[j].B_out[i] @ parts[j] for j in lp.neighbors)
        if np.any(lhs > lp.b + tol):
            return False
    return True


@pytest.mark.parametrize("seed", range(6))
def test_stacked_rows_equal_raw_constraints(seed):
    from gridmpc import oracle

    p = random_instance(seed)
    x0 = oracle.solve_reference(p).x
    r = np.random.default_rng(seed)
    patterns = set()
    for scale in (1e-3, 1e-1, 1.0, 10.0):
        for _ in range(25):
            x = x0 + scale * r.standard_normal(x0.size)
            a, b = raw_feasible(p, x), stacked_feasible(p, x)
            assert a == b
            patterns.add(a)
    assert stacked_feasible(p, x0, tol=1e-7)
    assert patterns == {True, False} or len(patterns) == 1


def test_describe_names_series(problem3, reference3):
    d = describe(problem3.locals[2], problem3.split(reference3.x)[2])
    assert set(d) == {"P", "Ec", "Ed", "F"}
    assert set(d["F"]) == {"1", "4", "5", "6"}
    assert len(d["P"]) == 3
