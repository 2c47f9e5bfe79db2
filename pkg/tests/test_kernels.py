import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.linalg import block_diag

from conftest import paper_problem
from gridmpc import _pykernels, admm, dual, kernels
from gridmpc.sparse import BlockCholesky, Csr, transpose

try:
    from gridmpc import _ckernels
except ImportError:
    _ckernels = None

needs_compiled = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def test_backend_names():
    assert kernels.BACKEND in ("compiled", "python")
    assert kernels.compiled_available() == (_ckernels is not None)
    if _ckernels is not None:
        assert kernels.BACKEND == "compiled"


def test_csr_round_trip(rng):
    a = rng.standard_normal((7, 5))
    a[a < 0.3] = 0.0
    m = Csr.from_dense(a)
    np.testing.assert_array_equal(m.sp.toarray(), a)
    np.testing.assert_array_equal(transpose(m).sp.toarray(), a.T)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(_pykernels.matvec(m, x), a @ x, rtol=1e-14, atol=1e-14)


def test_block_chol_solve_python(rng):
    blocks = []
    for n in (1, 3, 4):
        b = rng.standard_normal((n, n))
        blocks.append(b @ b.T + n * np.eye(n))
    bc = BlockCholesky.from_factors([np.linalg.cholesky(b) for b in blocks])
    rhs = rng.standard_normal(bc.size)
    out = _pykernels.block_chol_solve(bc, rhs)
    np.testing.assert_allclose(block_diag(*blocks) @ out, rhs, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_backends_agree_on_each_kernel(rng):
    p = paper_problem(3)
    op = dual.build_operator(p)
    aop = admm.build_operator(p, 0.01)
    eta = np.abs(rng.standard_normal(op.m))
    x = rng.standard_normal(op.n)
    np.testing.assert_array_equal(_ckernels.matvec(op.H, x), _pykernels.matvec(op.H, x))
    np.testing.assert_array_equal(
        _ckernels.primal_from_dual(op.HT, eta, op.lin, op.quad), _pykernels.primal_from_dual(op.HT, eta, op.lin, op.quad)
    )
    g = rng.standard_normal(op.m)
    a, b = _ckernels.lagrangian(x, op.quad, op.lin, eta, g), _pykernels.lagrangian(x, op.quad, op.lin, eta, g)
    np.testing.assert_allclose(a, b, rtol=1e-15)
    assert _ckernels.quad_cost(x, op.quad, op.lin) == pytest.approx(_pykernels.quad_cost(x, op.quad, op.lin), rel=1e-15)
    rhs = rng.standard_normal(aop.chol.size)
    np.testing.assert_allclose(
        _ckernels.block_chol_solve(aop.chol, rhs), _pykernels.block_chol_solve(aop.chol, rhs), rtol=1e-12, atol=1e-12
    )


@needs_compiled
def test_backends_agree_over_dual_iterations():
    p = paper_problem(3)
    op = dual.build_operator(p)
    step = 1.0 / dual.lipschitz_bound(op)
    ea = eb = np.zeros(op.m)
    for _ in range(200):
        xa, _, ea, pa, *_ = _pykernels.dual_iteration(op.HT, op.H, op.lin, op.quad, op.rhs, ea, step)
        xb, _, eb, pb, *_ = _ckernels.dual_iteration(op.HT, op.H, op.lin, op.quad, op.rhs, eb, step)
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ea, eb)
    assert pa == pytest.approx(pb, rel=1e-14)


@needs_compiled
def test_backends_agree_over_admm_iterations():
    p = paper_problem(3)
    op = admm.build_operator(p, 0.01)
    sa, sb = admm.initial_state(op), admm.initial_state(op)
    for _ in range(200):
        ra = _pykernels.admm_iteration(op.W, op.WT, op.h, op.lext, op.rho, op.partner, op.chol, sa.u, sa.z, sa.v, sa.mu)
        rb = _ckernels.admm_iteration(op.W, op.WT, op.h, op.lext, op.rho, op.partner, op.chol, sb.u, sb.z, sb.v, sb.mu)
    scale = 1 + np.abs(sa.u).max()
    assert np.abs(sa.u - sb.u).max() <= 1e-9 * scale
    assert np.allclose(ra, rb, rtol=1e-6, atol=1e-12)


def run_with_backend(value):
    env = dict(os.environ, GRIDMPC_BACKEND=value)
    code = "from gridmpc import kernels; print(kernels.BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)


def test_environment_selects_backend():
    proc = run_with_backend("python")
    assert proc.returncode == 0 and proc.stdout.strip() == "python"
    proc = run_with_backend("bogus")
    assert proc.returncode != 0 and "GRIDMPC_BACKEND" in proc.stderr
    proc = run_with_backend("compiled")
    if _ckernels is not None:
        assert proc.stdout.strip() == "compiled"
    else:
        assert proc.returncode != 0


def test_python_backend_solves_tiny_problem():
    env = dict(os.environ, GRIDMPC_BACKEND="python")
    code = (
        "import sys; sys.path.insert(0, 'tests')\n"
        "from conftest import tiny_problem\n"
        "from gridmpc import dual, admm\n"
        "p = tiny_problem()\n"
        "a = dual.run_dual_ascent(p); b = admm.run_admm(p, admm.AdmmConfig(rho=1.0, max_iters=50000))\n"
        "print(a.converged, b.converged, round(a.x[0], 4), round(b.x[0], 4))\n"
    )
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, cwd=root)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.split() == ["True", "True", "10.0", "10.0"]
