"""Backend selection for the solver kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used.  Set ``GRIDMPC_BACKEND=python`` to force the
fallback (``compiled`` makes a missing extension an error).
"""

from __future__ import annotations

import os

from . import _pykernels

_choice = os.environ.get("GRIDMPC_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "compiled", "python"):
    raise ImportError(f"GRIDMPC_BACKEND must be auto, compiled or python, not {_choice!r}")

_impl = _pykernels
if _choice != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = _pykernels

BACKEND = _impl.BACKEND
matvec = _impl.matvec
chol_solve = _impl.chol_solve
block_chol_solve = _impl.block_chol_solve
quad_cost = _impl.quad_cost
lagrangian = _impl.lagrangian
primal_from_dual = _impl.primal_from_dual
dual_iteration = _impl.dual_iteration
admm_iteration = _impl.admm_iteration


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True
