"""Command-line entry point: ``gridmpc {validate,solve,compare,mpc,genscenario}``.

Exit codes: 0 ok, 2 parse or validation error, 3 solver budget
exhausted, 4 failure in the middle of a closed-loop run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import admm, dual, harness, mpc, oracle
from .network import validate_network
from .problem import build_compact, describe
from .scenario import ScenarioError, dump_scenario, ieee30_scenario, load_scenario, window_margins

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_MIDRUN = 0, 2, 3, 4

log = logging.getLogger("gridmpc")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _load(path: str, k: int | None = None):
    try:
        sc = load_scenario(path)
    except FileNotFoundError:
        raise CliError(f"{path}: no such file") from None
    except ScenarioError as exc:
        raise CliError(f"{path}: {exc}") from None
    if k is not None:
        if k < 1:
            raise CliError("--k must be at least 1")
        sc = sc.with_horizon(k)
    findings = validate_network(sc.model).violations + sc.forecast(0).missing(sc.model)
    if findings:
        raise CliError("invalid scenario:\n  " + "\n  ".join(findings))
    return sc


def _problem(sc, t0: int = 0):
    return build_compact(sc.model, sc.forecast(t0))


def _write_json(path: str, doc) -> None:
    # json writes floats with repr, which round-trips every double exactly.
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n", encoding="utf-8", newline="\n")


def solution_doc(problem, x, **meta) -> dict:
    parts = problem.split(x)
    return {
        **meta,
        "cost": problem.cost(x),
        "nodes": {str(i): describe(problem.locals[i], parts[i]) for i in problem.nodes},
    }


def cmd_validate(args) -> int:
    sc = _load(args.scenario)
    K = sc.model.horizon
    first = window_margins(sc, K, starts=[0])[0]
    every = window_margins(sc, K, relax_ramps=True)
    ok = first > 0 and min(every) > 0
    print(f"{args.scenario}: {len(sc.model.nodes)} nodes, {len(sc.model.edges) // 2} lines, K={K}")
    print(f"first-window margin {first:.6g}; worst cyclic-window margin (ramps relaxed) {min(every):.6g}")
    if not ok:
        bad = [t for t, m in enumerate(every) if m <= 0]
        where = "first window" if first <= 0 else f"windows starting at {bad}"
        print(f"Assumption 4 violated: no strictly feasible plan in the {where}")
        return EXIT_INVALID
    print("valid")
    return EXIT_OK


def _run_solver(problem, args, reference=None):
    if args.method == "dual":
        cfg = dual.DualAscentConfig(
            lipschitz=args.lipschitz,
            max_iters=args.max_iters if args.max_iters is not None else 50_000,
            tol_grad=args.tol if args.tol is not None else 1e-6,
        )
        if args.harness:
            res, rlog = harness.run_protocol(problem, "dual", cfg, reference=reference)
        else:
            res, rlog = dual.run_dual_ascent(problem, cfg, reference=reference), None
        meta = {"lipschitz": res.lipschitz, "dual_value": res.psi}
    else:
        cfg = admm.AdmmConfig(
            rho=args.rho,
            max_iters=args.max_iters if args.max_iters is not None else 100_000,
            tol=args.tol if args.tol is not None else 1e-6,
        )
        if args.harness:
            res, rlog = harness.run_protocol(problem, "admm", cfg, reference=reference)
        else:
            res, rlog = admm.run_admm(problem, cfg, reference=reference), None
        meta = {"rho": cfg.rho, "residuals": list(res.residuals)}
    return res, rlog, meta


def cmd_solve(args) -> int:
    sc = _load(args.scenario, args.k)
    problem = _problem(sc, args.t0)
    reference = oracle.solve_reference(problem).x if args.reference else None
    t = time.perf_counter()
    res, rlog, meta = _run_solver(problem, args, reference)
    elapsed = time.perf_counter() - t
    if args.trace:
        res.trace.write_csv(args.trace, with_reference=reference is not None)
    if args.rounds and rlog is not None:
        rlog.write_csv(args.rounds)
    doc = solution_doc(
        problem,
        res.x,
        method=args.method,
        K=problem.K,
        t0=args.t0,
        seed=args.seed,
        converged=res.converged,
        iterations=res.iterations,
        seconds=elapsed,
        **meta,
    )
    if reference is not None:
        doc["dist_to_ref"] = float(np.abs(res.x - reference).max())
    if args.out:
        _write_json(args.out, doc)
    status = "converged" if res.converged else "budget exhausted"
    print(f"{args.method}: {status} after {res.iterations} iterations, cost {doc['cost']:.10g}, {elapsed:.2f} s")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def iterations_to(trace, x_opt_norm: float, tol: float):
    """First iteration with ``dist_to_ref / (1 + |x_opt|) <= tol``."""
    return trace.first_below("dist_to_ref", tol * (1.0 + x_opt_norm))


def compare(problem, k_tol: float = 1e-3, lipschitz=None, rho: float = 0.01,
            dual_iters: int = 50_000, admm_iters: int = 20_000) -> dict:
    """Oracle plus both solvers on one window; returns the report rows."""
    qp = oracle.assemble_global(problem)
    t = time.perf_counter()
    ref = oracle.solve_reference(qp)
    rows = {"reference": {"iterations": ref.iterations, "seconds": time.perf_counter() - t, "distance": 0.0}}
    x_opt = ref.x
    scale = float(np.abs(x_opt).max(initial=0.0))
    if qp.n <= 6:
        t = time.perf_counter()
        xb = oracle.enumerate_tiny(qp, 0.01)
        rows["enumerate"] = {"seconds": time.perf_counter() - t, "distance": float(np.abs(xb - x_opt).max())}
    directed = len(problem.model.edges)
    t = time.perf_counter()
    # The dual run keeps going after reaching the target so the trace shows the full path.
    rd = dual.run_dual_ascent(problem, dual.DualAscentConfig(lipschitz=lipschitz, max_iters=dual_iters), reference=x_opt)
    dt = time.perf_counter() - t
    hit = iterations_to(rd.trace, scale, k_tol)
    rows["dual"] = {
        "iterations": hit,
        "run_iterations": rd.iterations,
        "converged": rd.converged,
        "seconds": dt,
        "distance": float(np.abs(rd.x - x_opt).max()),
        "messages_per_iteration": 2 * directed,
        "messages": None if hit is None else 2 * directed * (hit + 1),
        "trace": rd.trace,
    }
    t = time.perf_counter()
    ra = admm.run_admm(problem, admm.AdmmConfig(rho=rho, max_iters=admm_iters), reference=x_opt)
    dt = time.perf_counter() - t
    hit = iterations_to(ra.trace, scale, k_tol)
    rows["admm"] = {
        "iterations": hit,
        "run_iterations": ra.iterations,
        "converged": ra.converged,
        "seconds": dt,
        "distance": float(np.abs(ra.x - x_opt).max()),
        "messages_per_iteration": directed,
        "messages": None if hit is None else directed * hit,
        "trace": ra.trace,
    }
    rows["scale"] = scale
    return rows


def cmd_compare(args) -> int:
    sc = _load(args.scenario, args.k)
    problem = _problem(sc)
    rows = compare(problem, args.tol, args.lipschitz, args.rho, args.dual_iters, args.admm_iters)
    scale = rows.pop("scale")
    print(f"K={problem.K}  |x_opt|_inf={scale:.6g}  target distance {args.tol:g}*(1+|x_opt|)")
    print(f"{'method':<10} {'iters-to-tol':>12} {'wall s':>9} {'final dist':>12} {'messages':>10}")
    for name, r in rows.items():
        it = r.get("iterations")
        msgs = r.get("messages")
        print(
            f"{name:<10} {('-' if it is None else it):>12} {r['seconds']:>9.3f} "
            f"{r['distance']:>12.4g} {('-' if msgs is None else msgs):>10}"
        )
    a, d = rows["admm"]["iterations"], rows["dual"]["iterations"]
    if a is not None and (d is None or a < d):
        print("ADMM needed fewer iterations")
    elif d is not None and (a is None or d < a):
        print("dual ascent needed fewer iterations")
    else:
        print("neither method reached the target" if a is None else "both methods needed the same number of iterations")
    if args.trace_dir:
        out = Path(args.trace_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows["dual"]["trace"].write_csv(out / "dual.csv", with_reference=True)
        rows["admm"]["trace"].write_csv(out / "admm.csv", with_reference=True)
    if args.out:
        _write_json(args.out, {k: {kk: vv for kk, vv in v.items() if kk != "trace"} for k, v in rows.items()})
    return EXIT_OK


def cmd_mpc(args) -> int:
    sc = _load(args.scenario, args.k)
    if args.steps is not None and args.steps < 0:
        raise CliError("--steps must be non-negative")
    config = None
    if args.method == "dual":
        config = dual.DualAscentConfig(max_iters=args.max_iters or 50_000)
    elif args.method == "admm":
        config = admm.AdmmConfig(rho=args.rho, max_iters=args.max_iters or 100_000)
    run = mpc.run_receding_horizon(sc, args.method, args.steps, demand=args.demand, seed=args.seed, config=config)
    if args.out:
        run.write_csv(args.out)
    print(f"{run.steps} steps, min slack {run.min_slack():.6g}, applied cost {run.total_cost():.10g}")
    if run.failure:
        print(f"stopped: {run.failure}", file=sys.stderr)
        return EXIT_MIDRUN
    return EXIT_OK


def cmd_genscenario(args) -> int:
    sc = ieee30_scenario(args.seed, args.k)
    dump_scenario(sc, args.out)
    print(f"wrote {args.out} (line draw seed {sc.line_seed}, attempt {sc.extra['attempt']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridmpc", description="Distributed MPC for interconnected microgrids")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario and its strict feasibility")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="solve one horizon window")
    s.add_argument("scenario")
    s.add_argument("--method", choices=("dual", "admm"), default="dual")
    s.add_argument("--k", type=int)
    s.add_argument("--t0", type=int, default=0, help="first step of the window")
    s.add_argument("--rho", type=float, default=0.01)
    s.add_argument("--lipschitz", type=float, help="dual step is 1/L (default: computed bound)")
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--trace", help="trace CSV path")
    s.add_argument("--reference", action="store_true", help="add distance to the oracle solution to the trace")
    s.add_argument("--harness", action="store_true", help="run as message passing between agents")
    s.add_argument("--rounds", help="round-log CSV path (with --harness)")
    s.add_argument("--out", help="solution JSON path")
    s.add_argument("--seed", type=int, default=0, help="recorded in the output; the solvers are deterministic")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("compare", help="oracle versus both solvers")
    c.add_argument("scenario")
    c.add_argument("--k", type=int)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--rho", type=float, default=0.01)
    c.add_argument("--lipschitz", type=float)
    c.add_argument("--dual-iters", type=int, default=50_000)
    c.add_argument("--admm-iters", type=int, default=20_000)
    c.add_argument("--trace-dir")
    c.add_argument("--out", help="report JSON path")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("mpc", help="closed-loop receding-horizon run")
    m.add_argument("scenario")
    m.add_argument("--steps", type=int)
    m.add_argument("--k", type=int)
    m.add_argument("--method", choices=mpc.SOLVERS, default="dual")
    m.add_argument("--rho", type=float, default=0.01)
    m.add_argument("--max-iters", type=int)
    m.add_argument("--demand", choices=("expected", "tightened", "sampled"), default="expected")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help="MPC log CSV path")
    m.set_defaults(func=cmd_mpc)

    g = sub.add_parser("genscenario", help="write the IEEE 30-bus benchmark scenario")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_genscenario)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except oracle.InfeasibleProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
