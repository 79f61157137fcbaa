"""Kernel backend selection: compiled extension if importable, NumPy otherwise.

Set QCADAPT_PURE_PYTHON=1 to force the fallback (used by tests and the kernel
benchmark).
"""

import os

from . import _kernels_py

if os.environ.get("QCADAPT_PURE_PYTHON", "0") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

BOND_COLLAPSE_TOL = _kernels_py.BOND_COLLAPSE_TOL

eam_site_energies = _impl.eam_site_energies
eam_energy_gradient = _impl.eam_energy_gradient
antiplane_site_energies = _impl.antiplane_site_energies
antiplane_energy_gradient = _impl.antiplane_energy_gradient


def backends():
    """Return {name: module} of available kernel backends (for tests/benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
