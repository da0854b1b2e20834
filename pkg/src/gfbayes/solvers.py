"""Inner optimisers: weighted Gauss-Newton and a BFGS minimiser.

Both are deterministic and take analytic derivatives from the caller.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

ARMIJO_C = 1e-4
BACKTRACK = 0.5
MAX_HALVINGS = 100
CURVATURE_EPS = 1e-12
STALL_LIMIT = 50
_EPS = np.finfo(float).eps


@dataclass
class SolverReport:
    iterations: int
    final_objective: float
    converged: bool
    gradient_norm: float


class SolverError(RuntimeError):
    """Inner solver failed; ``report`` holds the state at failure."""

    def __init__(self, message: str, report: SolverReport):
        super().__init__(f"{message} (iterations={report.iterations}, "
                         f"objective={report.final_objective:.6g}, "
                         f"|grad|={report.gradient_norm:.3e})")
        self.report = report


@dataclass
class ResidualProblem:
    """Weighted least squares ``0.5 * f(z)^T C f(z)``."""

    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    weight: np.ndarray

    def objective(self, z) -> float:
        f = self.residual(z)
        return 0.5 * float(f @ self.weight @ f)

    def restricted(self, anchor, basis) -> "ResidualProblem":
        """Same problem in coordinates ``z = anchor + basis @ w``."""
        anchor = np.asarray(anchor, dtype=float)
        return ResidualProblem(
            residual=lambda w: self.residual(anchor + basis @ w),
            jacobian=lambda w: self.jacobian(anchor + basis @ w) @ basis,
            weight=self.weight,
        )


def gauss_newton(p: ResidualProblem, z0, tol: float = 1e-10, max_iter: int = 100,
                 max_halvings: int = 20) -> tuple[np.ndarray, SolverReport]:
    """Minimise ``0.5 f^T C f`` by the weighted normal equations.

    Full steps are taken unless the objective increases, in which case the step
    is halved up to ``max_halvings`` times.  A singular normal matrix is
    regularised once by ``1e-12 * trace * I``.
    """
    z = np.array(z0, dtype=float)
    c = np.asarray(p.weight, dtype=float)
    f = p.residual(z)
    obj = 0.5 * float(f @ c @ f)
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        jac = p.jacobian(z)
        g = jac.T @ (c @ f)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol * (1.0 + abs(obj)):
            return z, SolverReport(it - 1, obj, True, gnorm)
        normal = jac.T @ c @ jac
        try:
            step = np.linalg.solve(normal, -g)
        except np.linalg.LinAlgError:
            reg = 1e-12 * max(float(np.trace(normal)), 1.0)
            try:
                step = np.linalg.solve(normal + reg * np.eye(normal.shape[0]), -g)
            except np.linalg.LinAlgError:
                raise SolverError("singular normal matrix",
                                  SolverReport(it, obj, False, gnorm)) from None
        t = 1.0
        for _ in range(max_halvings + 1):
            z_new = z + t * step
            f_new = p.residual(z_new)
            obj_new = 0.5 * float(f_new @ c @ f_new)
            if obj_new <= obj + 8 * _EPS * (1.0 + abs(obj)):
                break
            t *= 0.5
        else:
            raise SolverError("Gauss-Newton step halving failed",
                              SolverReport(it, obj, False, gnorm))
        z, f, obj = z_new, f_new, obj_new
        if t * np.linalg.norm(step) <= tol:
            g = p.jacobian(z).T @ (c @ f)
            gnorm = float(np.linalg.norm(g))
            return z, SolverReport(it, obj, True, gnorm)
    raise SolverError("Gauss-Newton exceeded max_iter",
                      SolverReport(max_iter, obj, False, gnorm))


def _line_search(obj, grad, z, f, d, slope, gnorm, noise):
    t = 1.0
    for _ in range(MAX_HALVINGS):
        z_new = z + t * d
        f_new = float(obj(z_new))
        if np.isfinite(f_new):
            if abs(f_new - f) <= noise:
                # objective change is rounding noise; judge by the gradient
                g_new = np.asarray(grad(z_new), dtype=float)
                if np.linalg.norm(g_new) < gnorm:
                    return z_new, f_new, g_new, True
            elif f_new <= f + ARMIJO_C * t * slope:
                return z_new, f_new, np.asarray(grad(z_new), dtype=float), False
        t *= BACKTRACK
    return None


def quasi_newton_minimize(obj: Callable[[np.ndarray], float],
                          grad: Callable[[np.ndarray], np.ndarray],
                          z0, tol: float = 1e-10, max_iter: int = 100,
                          callback: Optional[Callable[[np.ndarray, float], None]] = None
                          ) -> tuple[np.ndarray, SolverReport]:
    """BFGS with Armijo backtracking.

    The inverse Hessian starts as (and is reset to) the identity, rescaled by
    ``s^T y / y^T y`` once the first curvature pair is known.  Converged when
    ``|grad| <= tol * (1 + |obj|)``.  Once the objective change of a trial step
    sits at rounding level, the trial is accepted if it lowers the gradient
    norm instead.  A failed quasi-Newton line search is retried along steepest
    descent; if that fails too while its predicted decrease ``-g^T d`` is at
    rounding level, the current point is returned as converged.  So is a run
    of ``STALL_LIMIT`` rounding-level steps that fail to halve the gradient.
    ``callback(z, f)`` sees every accepted iterate.
    """
    z = np.array(z0, dtype=float)
    n = z.size
    f = float(obj(z))
    g = np.asarray(grad(z), dtype=float)
    h_inv = None
    gnorm = float(np.linalg.norm(g))
    stall, stall_ref = 0, gnorm
    for it in range(max_iter):
        if gnorm <= tol * (1.0 + abs(f)):
            return z, SolverReport(it, f, True, gnorm)
        d = None if h_inv is None else -h_inv @ g
        if d is None or float(g @ d) >= 0.0:
            h_inv = None
        found = None
        while found is None:
            if h_inv is None:
                # steepest descent with a unit-length trial step
                d = -g / max(gnorm, 1.0)
            slope = float(g @ d)
            noise = 16 * _EPS * (1.0 + abs(f))
            found = _line_search(obj, grad, z, f, d, slope, gnorm, noise)
            if found is None:
                if h_inv is not None:
                    h_inv = None
                    continue
                if -slope <= noise:
                    # predicted decrease is below what the objective can resolve
                    return z, SolverReport(it, f, True, gnorm)
                raise SolverError("line search found no decrease",
                                  SolverReport(it, f, False, gnorm))
        z_new, f_new, g_new, at_noise = found
        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        if sy > CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
            if h_inv is None:
                h_inv = (sy / float(y @ y)) * np.eye(n)
            rho = 1.0 / sy
            hy = h_inv @ y
            h_inv = (h_inv - rho * (np.outer(s, hy) + np.outer(hy, s))
                     + (rho * rho * float(y @ hy) + rho) * np.outer(s, s))
        else:
            h_inv = None
        z, f, g = z_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        if callback is not None:
            callback(z, f)
        if not at_noise or gnorm <= 0.5 * stall_ref:
            stall, stall_ref = 0, gnorm
        else:
            stall += 1
            if stall >= STALL_LIMIT:
                # gradient is at its rounding floor
                return z, SolverReport(it + 1, f, True, gnorm)
    if gnorm <= tol * (1.0 + abs(f)):
        return z, SolverReport(max_iter, f, True, gnorm)
    raise SolverError("quasi-Newton exceeded max_iter",
                      SolverReport(max_iter, f, False, gnorm))
