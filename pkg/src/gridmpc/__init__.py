"""Stochastic MPC energy management for interconnected microgrids.

Two distributed solvers (projected dual ascent and proximal ADMM) for
the chance-constrained compact problem, a message-passing harness, a
centralized oracle, a receding-horizon loop and a CLI.
"""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
