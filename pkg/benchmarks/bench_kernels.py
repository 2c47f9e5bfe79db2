"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py [--k 3] [--repeat 5]``.
Each kernel is called on the operators of the shipped IEEE 30-bus
scenario; the table reports the best mean time per call and the
speedup.  Outputs of the two backends are also compared.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from gridmpc import _pykernels, admm, dual
from gridmpc.problem import build_compact
from gridmpc.scenario import shipped_scenario

try:
    from gridmpc import _ckernels
except ImportError:
    _ckernels = None


def cases(K: int, rho: float = 0.01):
    sc = shipped_scenario(K)
    problem = build_compact(sc.model, sc.forecast(0))
    dop = dual.build_operator(problem)
    aop = admm.build_operator(problem, rho)
    rng = np.random.default_rng(0)
    eta = np.abs(rng.standard_normal(dop.m))
    x = rng.standard_normal(dop.n)
    step = 1.0 / dual.lipschitz_bound(dop)
    st = admm.initial_state(aop)
    rhs = rng.standard_normal(aop.chol.size)

    def admm_call(k):
        s = st.copy()
        return lambda: k.admm_iteration(aop.W, aop.WT, aop.h, aop.lext, rho, aop.partner, aop.chol, s.u, s.z, s.v, s.mu)

    return {
        "matvec H": lambda k: (lambda: k.matvec(dop.H, x)),
        "primal_from_dual": lambda k: (lambda: k.primal_from_dual(dop.HT, eta, dop.lin, dop.quad)),
        "lagrangian": lambda k: (lambda: k.lagrangian(x, dop.quad, dop.lin, eta, eta)),
        "dual_iteration": lambda k: (lambda: k.dual_iteration(dop.HT, dop.H, dop.lin, dop.quad, dop.rhs, eta, step)),
        "block_chol_solve": lambda k: (lambda: k.block_chol_solve(aop.chol, rhs)),
        "admm_iteration": admm_call,
    }


def bench(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def agreement(K: int) -> float:
    """Largest gap between the backends over 200 dual iterations."""
    sc = shipped_scenario(K)
    problem = build_compact(sc.model, sc.forecast(0))
    op = dual.build_operator(problem)
    step = 1.0 / dual.lipschitz_bound(op)
    ea = eb = np.zeros(op.m)
    for _ in range(200):
        xa, _, ea, *_ = _pykernels.dual_iteration(op.HT, op.H, op.lin, op.quad, op.rhs, ea, step)
        xb, _, eb, *_ = _ckernels.dual_iteration(op.HT, op.H, op.lin, op.quad, op.rhs, eb, step)
    return float(max(np.abs(xa - xb).max(), np.abs(ea - eb).max()))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    print(f"K={args.k}")
    print(f"{'kernel':<18} {'python us':>11} {'compiled us':>12} {'speedup':>8}")
    for name, make in cases(args.k).items():
        t_py = bench(make(_pykernels), args.repeat) * 1e6
        if _ckernels is None:
            print(f"{name:<18} {t_py:>11.1f} {'-':>12} {'-':>8}")
            continue
        t_c = bench(make(_ckernels), args.repeat) * 1e6
        print(f"{name:<18} {t_py:>11.1f} {t_c:>12.1f} {t_py / t_c:>7.1f}x")
    if _ckernels is not None:
        print(f"max backend difference after 200 dual iterations: {agreement(args.k):.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
