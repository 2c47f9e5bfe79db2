import csv

import numpy as np
import pytest

from conftest import random_instance
from gridmpc import admm, dual, harness
from gridmpc.harness import FlowShare, Message, ProtocolFault, RoundLog, ZetaShare, locality_audit, round_exchange
from gridmpc.network import ForecastSeries, GeneratorParams, NetworkModel, symmetric_edges
from gridmpc.problem import build_compact


def msg(a, b, r=0):
    return Message(a, b, r, ZetaShare(np.zeros(2)))


def test_round_exchange_delivers_to_neighbor():
    log = RoundLog(symmetric_edges([(1, 2)]))
    inbox = round_exchange({1: [msg(1, 2)]}, log, 0)
    assert [m.sender for m in inbox[2]] == [1]
    assert log.rounds[-1].messages == 1
    assert log.rounds[-1].bytes == 16


def test_round_exchange_non_neighbor_faults():
    log = RoundLog(symmetric_edges([(1, 2), (2, 3)]))
    with pytest.raises(ProtocolFault):
        round_exchange({1: [msg(1, 3)]}, log, 0)
    assert not locality_audit(log)


def test_round_exchange_empty_and_malformed():
    log = RoundLog(symmetric_edges([(1, 2)]))
    assert round_exchange({}, log, 0) == {}
    assert round_exchange({1: [], 2: []}, log, 1) == {}
    assert [r.round for r in log.rounds] == [0, 1]
    assert log.total_messages == 0
    with pytest.raises(ProtocolFault):
        round_exchange({1: [msg(1, 2, r=5)]}, log, 2)
    with pytest.raises(ProtocolFault):
        round_exchange({2: [msg(1, 2, r=3)]}, log, 3)


def test_locality_audit_examples():
    log = RoundLog(symmetric_edges([(1, 2), (2, 3)]))
    assert locality_audit(log)
    log.record_read(2, 2, 0)
    log.record_read(2, 1, 0)
    assert locality_audit(log)
    log.record_read(3, 1, 1)
    assert not locality_audit(log)


def test_round_log_csv(tmp_path):
    log = RoundLog(symmetric_edges([(1, 2)]))
    round_exchange({1: [Message(1, 2, 0, FlowShare(np.ones(3)))], 2: [msg(2, 1)]}, log, 0)
    path = tmp_path / "rounds.csv"
    log.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert rows == [{"round": "0", "messages": "2", "bytes": str(24 + 16)}]


def test_dual_protocol_matches_monolithic(problem3):
    cfg = dual.DualAscentConfig(max_iters=99)
    mono = dual.run_dual_ascent(problem3, cfg)
    res, log = harness.run_protocol(problem3, "dual", cfg)
    assert len(res.trace) == len(mono.trace) == 100
    for col in ("cost", "primal_infeas", "dual_value"):
        np.testing.assert_array_equal(res.trace.column(col), mono.trace.column(col))
    np.testing.assert_array_equal(res.x, mono.x)
    np.testing.assert_array_equal(res.eta, mono.eta)
    directed = len(problem3.model.edges)
    per_round = log.messages_per_round()
    assert np.all(per_round == directed)
    assert log.total_messages == 2 * directed * 100
    assert locality_audit(log)


def test_admm_protocol_matches_monolithic(problem3):
    cfg = admm.AdmmConfig(max_iters=100)
    mono = admm.run_admm(problem3, cfg)
    res, log = harness.run_protocol(problem3, "admm", cfg)
    assert len(res.trace) == 100
    for col in ("cost", "primal_infeas", "consensus_resid"):
        np.testing.assert_array_equal(res.trace.column(col), mono.trace.column(col))
    np.testing.assert_array_equal(res.x, mono.x)
    np.testing.assert_array_equal(res.state.v, mono.state.v)
    np.testing.assert_array_equal(res.state.mu, mono.state.mu)
    # One consensus share per directed edge per iteration, i.e. 2 per line.
    assert np.all(log.messages_per_round() == len(problem3.model.edges))
    assert log.total_messages == 100 * len(problem3.model.edges)
    assert locality_audit(log)


@pytest.mark.parametrize("solver", ["dual", "admm"])
def test_agent_order_does_not_matter(solver):
    p = random_instance(5)
    cfg = dual.DualAscentConfig(max_iters=30) if solver == "dual" else admm.AdmmConfig(max_iters=30)
    a, _ = harness.run_protocol(p, solver, cfg)
    b, _ = harness.run_protocol(p, solver, cfg, order=list(reversed(p.nodes)))
    np.testing.assert_array_equal(a.x, b.x)
    with pytest.raises(ValueError):
        harness.run_protocol(p, solver, cfg, order=[1])


@pytest.mark.parametrize("solver", ["dual", "admm"])
def test_converged_protocol_matches_monolithic(solver):
    p = random_instance(1)
    if solver == "dual":
        mono = dual.run_dual_ascent(p)
    else:
        mono = admm.run_admm(p, admm.AdmmConfig(rho=0.1, max_iters=50_000))
    cfg = None if solver == "dual" else admm.AdmmConfig(rho=0.1, max_iters=50_000)
    res, log = harness.run_protocol(p, solver, cfg)
    assert res.converged == mono.converged
    assert res.iterations == mono.iterations
    np.testing.assert_array_equal(res.x, mono.x)
    assert locality_audit(log)


def single_agent():
    g = GeneratorParams(alpha=1.0, omega=5.0, p_max=100.0, ramp_lo=-50.0, ramp_hi=50.0, p_prev=10.0)
    model = NetworkModel((1,), frozenset(), {1: g}, {}, {}, horizon=2)
    fc = ForecastSeries({1: [20.0, 30.0]}, {1: [0.0, 0.0]}, {1: [100.0, 100.0]}, {1: [0.0, 0.0]}, 0.25)
    return build_compact(model, fc)


@pytest.mark.parametrize("solver", ["dual", "admm"])
def test_single_agent_sends_nothing(solver):
    p = single_agent()
    cfg = None if solver == "dual" else admm.AdmmConfig(rho=1.0, max_iters=50_000)
    res, log = harness.run_protocol(p, solver, cfg)
    assert res.converged
    assert log.total_messages == 0
    np.testing.assert_allclose(res.x, [20.0, 30.0], atol=1e-4)


def test_unknown_solver():
    with pytest.raises(ValueError):
        harness.run_protocol(single_agent(), "newton")
