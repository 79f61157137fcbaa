"""Adaptive quasicontinuum (atomistic-to-continuum) lattice statics in 2D.

Atomistic window, five coupling schemes (GRAC, QCF, BQCE, BQCF, BGFC), a
unified residual-force a posteriori error estimator, and the adaptive loops
driving mesh refinement and region allocation.
"""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend  # noqa: F401
