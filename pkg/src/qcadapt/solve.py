"""Solvers: L-BFGS minimization for energy schemes, Jacobian-free
Newton-Krylov for the force-balance schemes."""

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.optimize as sopt

from .errors import NonconvergenceError, UnsupportedSchemeError


@dataclass
class SolveSettings:
    residual_tol: float = 1e-8        # max-norm of gradient/residual
    max_iterations: int = 5000
    maxcor: int = 20                  # quasi-Newton memory
    initial_guess: str = "zero"       # 'zero' | 'transfer'

    def __post_init__(self):
        if self.residual_tol <= 0:
            raise ValueError("residual_tol must be positive")


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    residual_norm: float
    time_s: float
    energy: Optional[float] = None


def _fd_hessp(scheme):
    def hessp(x, p):
        nrm = float(np.abs(p).max())
        if nrm == 0:
            return np.zeros_like(p)
        h = 1e-6 / nrm
        return (scheme.gradient(x + h * p) - scheme.gradient(x - h * p)) / (2 * h)
    return hessp


def minimize(scheme, settings, initial=None):
    """Minimize an energy scheme to gradient max-norm <= residual_tol.

    Limited-memory quasi-Newton first; if the line search stalls before the
    tolerance (energy differences at machine precision), a matrix-free
    Newton-CG polish with finite-difference Hessian action finishes the job.
    """
    if not scheme.is_energy_based:
        raise UnsupportedSchemeError("minimize requires an energy-based scheme")
    x0 = np.zeros(scheme.ndof) if initial is None else np.asarray(initial, float).copy()
    t0 = time.perf_counter()
    if scheme.ndof == 0:
        return SolveResult(u=x0, iterations=0, residual_norm=0.0, time_s=0.0,
                           energy=float(scheme.energy(x0)))
    nit = 0
    res = sopt.minimize(scheme.energy_and_gradient, x0, jac=True, method="L-BFGS-B",
                        options={"maxiter": settings.max_iterations,
                                 "maxfun": 4 * settings.max_iterations,
                                 "maxcor": settings.maxcor,
                                 "gtol": 0.2 * settings.residual_tol,
                                 "ftol": 1e-16})
    nit += res.nit
    x0 = res.x
    gnorm = float(np.abs(scheme.gradient(x0)).max())
    if gnorm > settings.residual_tol and hasattr(scheme, "hessian"):
        # frozen-Hessian Newton polish: one exact assembly + factorization,
        # then a few backsolves
        import scipy.sparse.linalg as spla
        try:
            H = scheme.hessian(x0).tocsc()
            lu = spla.splu(H)
            for _ in range(30):
                g = scheme.gradient(x0)
                gnorm = float(np.abs(g).max())
                if gnorm <= settings.residual_tol:
                    break
                step = lu.solve(g)
                trial = x0 - step
                tg = float(np.abs(scheme.gradient(trial)).max())
                if not np.isfinite(tg) or tg >= gnorm:
                    break
                x0 = trial
                nit += 1
            gnorm = float(np.abs(scheme.gradient(x0)).max())
        except RuntimeError:
            pass
    hessp = _fd_hessp(scheme)
    rounds = 0
    while gnorm > settings.residual_tol and rounds < 6:
        res = sopt.minimize(scheme.energy_and_gradient, x0, jac=True,
                            method="newton-cg", hessp=hessp,
                            options={"maxiter": 25, "xtol": 1e-14})
        nit += res.nit
        new_g = float(np.abs(scheme.gradient(res.x)).max())
        if new_g < gnorm:
            x0 = res.x
            gnorm = new_g
        else:
            break
        rounds += 1
    if gnorm <= settings.residual_tol:
        return SolveResult(u=x0, iterations=nit, residual_norm=gnorm,
                           time_s=time.perf_counter() - t0,
                           energy=float(scheme.energy(x0)))
    raise NonconvergenceError(f"minimization stalled at |g|={gnorm:.3e}",
                              last_iterate=x0, residual_norm=gnorm, iterations=nit)


def solve_force_balance(scheme, settings, initial=None):
    """Solve the nonlinear force balance of QCF/BQCF to max-norm residual_tol."""
    if scheme.is_energy_based:
        raise UnsupportedSchemeError("solve_force_balance requires a force-based scheme")
    x0 = np.zeros(scheme.ndof) if initial is None else np.asarray(initial, float).copy()
    t0 = time.perf_counter()
    calls = [0]

    def F(x):
        calls[0] += 1
        return scheme.residual(x)

    try:
        x = sopt.newton_krylov(F, x0, f_tol=settings.residual_tol, method="lgmres",
                               maxiter=settings.max_iterations, verbose=False)
    except sopt.NoConvergence as exc:
        last = np.asarray(exc.args[0]) if exc.args else x0
        rn = float(np.abs(scheme.residual(last)).max())
        raise NonconvergenceError(f"Newton-Krylov stalled at |F|={rn:.3e}",
                                  last_iterate=last, residual_norm=rn,
                                  iterations=calls[0]) from exc
    rn = float(np.abs(scheme.residual(x)).max()) if scheme.ndof else 0.0
    if rn > settings.residual_tol:
        raise NonconvergenceError(f"residual post-check failed at |F|={rn:.3e}",
                                  last_iterate=x, residual_norm=rn, iterations=calls[0])
    return SolveResult(u=x, iterations=calls[0], residual_norm=rn,
                       time_s=time.perf_counter() - t0)


def solve(scheme, settings, initial=None):
    """Dispatch to minimize / solve_force_balance by scheme kind."""
    if scheme.is_energy_based:
        return minimize(scheme, settings, initial)
    return solve_force_balance(scheme, settings, initial)
