"""Both solvers run as synchronous message passing between agents.

Each agent holds only its own local problem, its own iterate and the
messages delivered to it.  Messages travel only along network edges
and every delivery is logged.  A monitor outside the protocol gathers
per-agent values after each round to write the trace and test the
stopping rule; it does not feed anything back to the agents except the
stop signal.

Every agent-side computation uses the same kernels, with the same
operand order, as the monolithic solvers.  Per-iteration iterates are
therefore identical to theirs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from . import admm as admm_mod
from . import dual as dual_mod
from . import kernels
from .problem import CompactProblem
from .trace import SolveTrace


class ProtocolFault(RuntimeError):
    """A message was addressed to a node that is not a neighbor."""


@dataclass(frozen=True)
class ZetaShare:
    zeta: np.ndarray


@dataclass(frozen=True)
class FlowShare:
    """``B_ij x_i``: the sender's outgoing-flow term in the recipient's balance."""

    flow: np.ndarray


@dataclass(frozen=True)
class ConsensusShare:
    """Estimate and multiplier shift on the two rows tying one flow pair.

    ``own_*`` refer to the sender's own flow toward the recipient,
    ``copy_*`` to the sender's copy of the recipient's flow.
    """

    own_estimate: np.ndarray
    own_shift: np.ndarray
    copy_estimate: np.ndarray
    copy_shift: np.ndarray


Payload = Union[ZetaShare, FlowShare, ConsensusShare]


@dataclass(frozen=True)
class Message:
    sender: int
    recipient: int
    round: int
    payload: Payload

    @property
    def nbytes(self) -> int:
        return sum(np.asarray(v).nbytes for v in vars(self.payload).values())


@dataclass
class RoundRecord:
    round: int
    messages: int
    bytes: int


@dataclass
class RoundLog:
    """Per-round traffic plus every (reader, owner) access made by agents."""

    edges: frozenset
    rounds: list[RoundRecord] = field(default_factory=list)
    reads: list[tuple[int, int, int]] = field(default_factory=list)

    def record_read(self, reader: int, owner: int, round_no: int) -> None:
        self.reads.append((int(reader), int(owner), int(round_no)))

    @property
    def total_messages(self) -> int:
        return sum(r.messages for r in self.rounds)

    def messages_per_round(self) -> np.ndarray:
        return np.array([r.messages for r in self.rounds], dtype=int)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "messages", "bytes"])
            for r in self.rounds:
                writer.writerow([r.round, r.messages, r.bytes])


def round_exchange(outboxes: Mapping[int, Sequence[Message]], log: RoundLog, round_no: int) -> dict[int, list[Message]]:
    """Deliver one round of messages, in sender order then outbox order.

    A message off the edge set is logged as a read and then aborts the
    run with :class:`ProtocolFault`.
    """
    inboxes: dict[int, list[Message]] = {}
    count = size = 0
    for sender in sorted(outboxes):
        for msg in outboxes[sender]:
            if msg.sender != sender or msg.round != round_no:
                raise ProtocolFault(f"malformed message from {sender} in round {round_no}")
            log.record_read(msg.recipient, msg.sender, round_no)
            if (msg.sender, msg.recipient) not in log.edges:
                log.rounds.append(RoundRecord(round_no, count, size))
                raise ProtocolFault(f"node {msg.sender} addressed non-neighbor {msg.recipient}")
            inboxes.setdefault(msg.recipient, []).append(msg)
            count += 1
            size += msg.nbytes
    log.rounds.append(RoundRecord(round_no, count, size))
    return inboxes


def locality_audit(log: RoundLog) -> bool:
    """True iff every recorded access pairs an agent with itself or a neighbor."""
    return all(r == o or (o, r) in log.edges for r, o, _ in log.reads)


def _by_sender(inbox: Iterable[Message], kind) -> dict[int, Payload]:
    out = {}
    for msg in inbox:
        if isinstance(msg.payload, kind):
            out[msg.sender] = msg.payload
    return out


# --- dual ascent --------------------------------------------------------


@dataclass
class DualAgent:
    """Local state of one agent in the dual-ascent protocol."""

    view: dual_mod.AgentDualView
    lam: np.ndarray
    zeta: np.ndarray
    step: float
    x: np.ndarray | None = None
    g: np.ndarray | None = None
    eta_new: np.ndarray | None = None
    zeta_in: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def node(self) -> int:
        return self.view.node

    def send_zeta(self, round_no: int) -> list[Message]:
        return [Message(self.node, j, round_no, ZetaShare(self.zeta.copy())) for j in self.view.lp.neighbors]

    def primal(self, inbox: Sequence[Message]) -> np.ndarray:
        shares = _by_sender(inbox, ZetaShare)
        lp = self.view.lp
        self.zeta_in = {j: shares[j].zeta for j in lp.neighbors}
        eta_vis = np.concatenate([self.lam, self.zeta] + [self.zeta_in[j] for j in lp.neighbors])
        self.x = kernels.primal_from_dual(self.view.GT, eta_vis, lp.cost_lin, lp.cost_quad)
        return self.x

    def send_flow(self, round_no: int) -> list[Message]:
        return [
            Message(self.node, j, round_no, FlowShare(kernels.matvec(self.view.shares[j], self.x)))
            for j in self.view.lp.neighbors
        ]

    def dual_update(self, inbox: Sequence[Message]) -> None:
        shares = _by_sender(inbox, FlowShare)
        visible = np.concatenate([self.x] + [shares[j].flow for j in self.view.lp.neighbors])
        self.g = kernels.matvec(self.view.G, visible) - self.view.rhs
        eta = np.concatenate([self.lam, self.zeta])
        self.eta_new = np.maximum(eta + self.step * self.g, 0.0)

    def commit(self) -> None:
        m = self.view.lp.m
        self.lam, self.zeta = self.eta_new[:m].copy(), self.eta_new[m:].copy()


def _dual_protocol(op: dual_mod.DualOperator, config: dual_mod.DualAscentConfig, reference, eta0, order):
    prob = op.problem
    L = config.lipschitz if config.lipschitz is not None else dual_mod.lipschitz_bound(op)
    step = 1.0 / L
    eta = np.zeros(op.m) if eta0 is None else np.maximum(np.array(eta0, dtype=float), 0.0)
    agents = {
        i: DualAgent(op.views[i], eta[op.lam_slice(i)].copy(), eta[op.zeta_slice(i)].copy(), step)
        for i in prob.nodes
    }
    order = list(prob.nodes) if order is None else list(order)
    log = RoundLog(edges=frozenset(prob.model.edges))
    ref = None if reference is None else np.asarray(reference, dtype=float)
    trace = SolveTrace()
    best = (-math.inf, None, None)
    converged = False
    s = 0
    rnd = 0
    while True:
        inbox = round_exchange({i: agents[i].send_zeta(rnd) for i in order}, log, rnd)
        for i in order:
            agents[i].primal(inbox.get(i, []))
        rnd += 1
        inbox = round_exchange({i: agents[i].send_flow(rnd) for i in order}, log, rnd)
        for i in order:
            agents[i].dual_update(inbox.get(i, []))
        rnd += 1
        # Monitor: assemble the global picture in node order.
        x = np.concatenate([agents[i].x for i in prob.nodes])
        g = np.concatenate([agents[i].g for i in prob.nodes])
        eta = np.concatenate([np.concatenate([agents[i].lam, agents[i].zeta]) for i in prob.nodes])
        eta_new = np.concatenate([agents[i].eta_new for i in prob.nodes])
        psi, cost = kernels.lagrangian(x, op.quad, op.lin, eta, g)
        infeas = max(0.0, float(g.max())) if g.size else 0.0
        dstep = float(np.abs(eta_new - eta).max()) if eta.size else 0.0
        dist = float(np.abs(x - ref).max()) if ref is not None else math.nan
        trace.append(s, cost, infeas, math.nan, psi, dist)
        if psi > best[0]:
            best = (psi, eta, x)
        if L * dstep <= config.tol_grad and infeas <= config.tol_feas:
            converged = True
            break
        if s >= config.max_iters:
            break
        for i in order:
            agents[i].commit()
        s += 1
    if converged:
        psi_out, eta_out, x_out = trace.dual_value[-1], eta, x
    else:
        psi_out, eta_out, x_out = best
    result = dual_mod.DualResult(
        x=x_out, eta=eta_out, trace=trace, converged=converged, iterations=s, lipschitz=L, psi=psi_out
    )
    return result, log


# --- ADMM ---------------------------------------------------------------


@dataclass
class AdmmAgent:
    """Local slice ``(u_i, z_i, v_i, mu_i)`` of the ADMM iterate."""

    loc: admm_mod.AdmmLocal
    u: np.ndarray
    z: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    residuals: tuple[float, float, float] = (math.inf, math.inf, math.inf)

    @property
    def node(self) -> int:
        return self.loc.node

    def send(self, round_no: int) -> list[Message]:
        loc = self.loc
        est = self.z - loc.h
        shift = self.mu / loc.rho
        return [
            Message(
                self.node,
                j,
                round_no,
                ConsensusShare(
                    own_estimate=est[loc.r_rows(j)],
                    own_shift=shift[loc.r_rows(j)],
                    copy_estimate=est[loc.s_rows(j)],
                    copy_shift=shift[loc.s_rows(j)],
                ),
            )
            for j in loc.neighbors
        ]

    def step(self, inbox: Sequence[Message]) -> None:
        loc, rho = self.loc, self.loc.rho
        shares = _by_sender(inbox, ConsensusShare)
        w = (self.z - loc.h) - self.mu / rho
        v_new = np.empty_like(self.v)
        mr = loc.m_rows
        v_new[:mr] = np.maximum(w[:mr], 0.0)
        for j in loc.neighbors:
            sh = shares[j]
            # Copy of F_ji held here pairs with j's own-flow row, and vice versa.
            v_new[loc.s_rows(j)] = 0.5 * (w[loc.s_rows(j)] + (sh.own_estimate - sh.own_shift))
            v_new[loc.r_rows(j)] = 0.5 * (w[loc.r_rows(j)] + (sh.copy_estimate - sh.copy_shift))
        dual = rho * float(np.abs(v_new - self.v).max()) if self.v.size else 0.0
        self.v = v_new
        t = (self.v + loc.h) + self.mu / rho
        rhs = rho * kernels.matvec(loc.WT, t) - loc.l_ext
        self.u = kernels.chol_solve(loc.factor, rhs)
        self.z = kernels.matvec(loc.W, self.u)
        r = (self.z - loc.h) - self.v
        self.mu = self.mu - rho * r
        primal = float(np.abs(r[:mr]).max()) if mr else 0.0
        consensus = float(np.abs(r[mr:]).max()) if r.size > mr else 0.0
        self.residuals = (primal, consensus, dual)


def _admm_protocol(op: admm_mod.AdmmOperator, config: admm_mod.AdmmConfig, reference, state, order):
    prob = op.problem
    st = admm_mod.initial_state(op) if state is None else state.copy()
    agents = {
        i: AdmmAgent(
            op.locals[i],
            st.u[op.ucols(i)].copy(),
            st.z[op.rows(i)].copy(),
            st.v[op.rows(i)].copy(),
            st.mu[op.rows(i)].copy(),
        )
        for i in prob.nodes
    }
    order = list(prob.nodes) if order is None else list(order)
    log = RoundLog(edges=frozenset(prob.model.edges))
    quad, lin = prob.quad(), prob.lin()
    ref = None if reference is None else np.asarray(reference, dtype=float)
    trace = SolveTrace()
    res = (math.inf, math.inf, math.inf)
    converged = False
    s = st.iter
    while s < st.iter + config.max_iters:
        inbox = round_exchange({i: agents[i].send(s) for i in order}, log, s)
        for i in order:
            agents[i].step(inbox.get(i, []))
        s += 1
        res = tuple(max(agents[i].residuals[k] for i in prob.nodes) for k in range(3))
        x = np.concatenate([agents[i].u[: op.locals[i].n] for i in prob.nodes])
        dist = float(np.abs(x - ref).max()) if ref is not None else math.nan
        trace.append(s, kernels.quad_cost(x, quad, lin), res[0], res[1], math.nan, dist)
        if max(res) <= config.tol:
            converged = True
            break
    final = admm_mod.AdmmState(
        u=np.concatenate([agents[i].u for i in prob.nodes]),
        z=np.concatenate([agents[i].z for i in prob.nodes]),
        v=np.concatenate([agents[i].v for i in prob.nodes]),
        mu=np.concatenate([agents[i].mu for i in prob.nodes]),
        iter=s,
    )
    result = admm_mod.AdmmResult(
        x=final.u[op.x_index].copy(),
        trace=trace,
        converged=converged,
        iterations=s - st.iter,
        residuals=tuple(float(r) for r in res),
        state=final,
    )
    return result, log


def run_protocol(
    problem: CompactProblem,
    solver: str = "dual",
    config=None,
    reference: np.ndarray | None = None,
    start=None,
    order: Sequence[int] | None = None,
):
    """Run ``solver`` ("dual" or "admm") as a message-passing protocol.

    ``start`` is an initial dual vector (dual) or :class:`AdmmState`
    (admm).  ``order`` fixes the order in which agents act within a
    round; results do not depend on it.  Returns ``(result, RoundLog)``.
    """
    if order is not None and sorted(order) != list(problem.nodes):
        raise ValueError("order must be a permutation of the nodes")
    if solver in ("dual", "dual-ascent"):
        config = config or dual_mod.DualAscentConfig()
        return _dual_protocol(dual_mod.build_operator(problem), config, reference, start, order)
    if solver == "admm":
        config = config or admm_mod.AdmmConfig()
        return _admm_protocol(admm_mod.build_operator(problem, config.rho), config, reference, start, order)
    raise ValueError(f"unknown solver {solver!r}")
