"""Gradient dynamics ``dz = -A(z) grad V(z) dtau`` and their time-steppers.

Three steppers are provided: explicit Euler, semi-implicit Euler (mobility
frozen at the step start, gradient implicit) and the discrete-gradient
theta-method whose steps obey ``V(z_{n+1}) <= V(z_n)`` for any step size.
The implicit ones reduce to proximal problems

    argmin_z  0.5 (z - z_n)^T A^+ (z - z_n) + weight * V(z),   z - z_n in im(A),

which are handed to an inner solver (see :class:`ProximalProblem`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numcore import image_basis
from .solvers import SolverError, SolverReport, quasi_newton_minimize

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps

METHODS = ("ee", "si", "dg")


class NonFiniteStateError(FloatingPointError):
    """A step produced NaN/Inf; typically explicit Euler beyond its stability limit."""


class InnerIterationError(RuntimeError):
    """The discrete-gradient fixed-point loop hit its iteration cap."""


class DecayViolation(AssertionError):
    """A discrete-gradient step increased the potential."""


class StepFailure(RuntimeError):
    """A step inside :func:`integrate` failed; carries the step index and method."""

    def __init__(self, step: int, method: str, cause: Exception):
        super().__init__(f"step {step} ({method}) failed: {cause}")
        self.step = step
        self.method = method
        self.cause = cause


@dataclass
class GradientFlowProblem:
    dim: int
    potential: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    mobility: Callable[[np.ndarray], np.ndarray]
    name: str = "gradient-flow"
    # optional A(z) grad V(z) that avoids forming the mobility matrix
    drift: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass
class DiscreteGradientConfig:
    dtau: float
    theta: float = 1.0
    inner_tol: float = 1e-10
    max_inner: int = 500

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if not self.dtau > 0.0:
            raise ValueError(f"dtau must be positive, got {self.dtau}")
        if not self.inner_tol > 0.0:
            raise ValueError(f"inner_tol must be positive, got {self.inner_tol}")
        if self.max_inner < 1:
            raise ValueError("max_inner must be at least 1")


@dataclass
class StepRecord:
    tau: float
    z: np.ndarray
    potential_value: float
    gamma: float = 1.0
    inner_iterations: int = 0


@dataclass
class ProximalProblem:
    """One implicit sub-problem; the objective weight on ``V`` is ``theta*gamma*dtau``."""

    problem: GradientFlowProblem
    anchor: np.ndarray
    mobility: np.ndarray
    gamma: float
    theta: float
    dtau: float
    start: np.ndarray
    basis: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.basis is None:
            self.basis = image_basis(self.mobility)

    @property
    def weight(self) -> float:
        return self.theta * self.gamma * self.dtau

    def coords(self, z) -> np.ndarray:
        """Least-squares coordinates of ``z - anchor`` in the image basis."""
        if self.basis.shape[1] == 0:
            return np.zeros(0)
        return np.linalg.lstsq(self.basis, np.asarray(z) - self.anchor, rcond=None)[0]

    def point(self, w) -> np.ndarray:
        return self.anchor + self.basis @ w

    @property
    def anchor_potential(self) -> float:
        if not hasattr(self, "_v_anchor"):
            self._v_anchor = float(self.problem.potential(self.anchor))
        return self._v_anchor

    def objective_w(self, w) -> float:
        # V is measured from its anchor value so additive constants in V drop out
        dv = float(self.problem.potential(self.point(w))) - self.anchor_potential
        return 0.5 * float(w @ w) + self.weight * dv

    def gradient_w(self, w) -> np.ndarray:
        return w + self.weight * (self.basis.T @ self.problem.gradient(self.point(w)))

    def start_coords(self) -> np.ndarray:
        """Coordinates of the better of ``start`` and ``anchor`` for the objective."""
        w0 = self.coords(self.start)
        zero = np.zeros_like(w0)
        if self.objective_w(zero) < self.objective_w(w0):
            return zero
        return w0


InnerSolver = Callable[[ProximalProblem], tuple[np.ndarray, SolverReport]]


class QuasiNewtonProximalSolver:
    """Default inner solver: BFGS in whitened image coordinates."""

    def __init__(self, tol: float = 1e-12, max_iter: int = 5000):
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, prox: ProximalProblem) -> tuple[np.ndarray, SolverReport]:
        if prox.basis.shape[1] == 0:
            return prox.anchor.copy(), SolverReport(0, 0.0, True, 0.0)
        w, rep = quasi_newton_minimize(prox.objective_w, prox.gradient_w,
                                       prox.start_coords(), tol=self.tol,
                                       max_iter=self.max_iter)
        return prox.point(w), rep


def _check_finite(z, what: str) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NonFiniteStateError(f"{what} produced a non-finite state")
    return z


def explicit_euler_step(p: GradientFlowProblem, z, dtau: float) -> np.ndarray:
    if not dtau > 0.0:
        raise ValueError("dtau must be positive")
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        drift = p.drift(z) if p.drift is not None else p.mobility(z) @ p.gradient(z)
        z_new = z - dtau * drift
    return _check_finite(z_new, "explicit Euler")


def semi_implicit_step(p: GradientFlowProblem, z, dtau: float,
                       solver: Optional[InnerSolver] = None) -> np.ndarray:
    """Solve ``z1 - z = -dtau A(z) grad V(z1)`` as one proximal minimisation.

    For singular ``A(z)`` the update stays in its image.
    """
    if not dtau > 0.0:
        raise ValueError("dtau must be positive")
    solver = solver or QuasiNewtonProximalSolver()
    z = np.asarray(z, dtype=float)
    prox = ProximalProblem(p, z, p.mobility(z), gamma=1.0, theta=1.0,
                           dtau=dtau, start=z)
    z_new, _ = solver(prox)
    return _check_finite(z_new, "semi-implicit Euler")


def gamma_factor(p: GradientFlowProblem, z_n, z_np1, theta: float,
                 rtol: float = 1e-14) -> float:
    """Ratio of the potential drop to its linear prediction at the theta-point.

    Returns 1 when the denominator is below ``rtol * (1 + |V(z_n)|)``, i.e. a
    null step or a critical point, where the quotient is rounding noise.
    """
    return _gamma_parts(p, z_n, z_np1, theta, rtol)[0]


def _gamma_parts(p, z_n, z_np1, theta, rtol=1e-14, v_n=None):
    """gamma plus its relative rounding uncertainty."""
    z_n = np.asarray(z_n, dtype=float)
    z_np1 = np.asarray(z_np1, dtype=float)
    dz = z_np1 - z_n
    z_theta = theta * z_np1 + (1.0 - theta) * z_n
    denom = float(p.gradient(z_theta) @ dz)
    if v_n is None:
        v_n = float(p.potential(z_n))
    if abs(denom) <= rtol * (1.0 + abs(v_n)):
        return 1.0, 0.0
    dv = float(p.potential(z_np1)) - v_n
    noise = 4 * _EPS * (1.0 + abs(v_n)) / abs(dv) if dv != 0.0 else np.inf
    return dv / denom, noise


def _gamma_settled(g_old: float, g_new: float, tol: float, noise: float) -> bool:
    # the state depends on gamma only through the proximal weight 1/gamma, so
    # large gammas are compared on the reciprocal scale; differences below the
    # rounding level of the potential difference count as settled
    scale = max(abs(g_old), abs(g_new))
    return abs(g_new - g_old) <= tol * max(1.0, abs(g_old * g_new)) + noise * scale


def _aitken_gamma(recips, gamma: float) -> float:
    """Aitken extrapolation of three plain iterates of ``1/gamma``.

    Near the relaxation limit gamma grows geometrically, i.e. ``1/gamma``
    converges linearly to 0, which extrapolation recovers in one go.  Only
    monotone runs are extrapolated, at most by a factor 1e3 past the last value.
    """
    u0, u1, u2 = recips
    if not np.all(np.isfinite(recips)) or (u0 - u1) * (u1 - u2) <= 0.0:
        return gamma
    d = u2 - 2.0 * u1 + u0
    if d == 0.0:
        return gamma
    u = u2 - (u2 - u1) ** 2 / d
    if (u - u2) * (u2 - u1) < 0.0:
        return gamma
    u = min(max(u, 1e-3 * u2), 1e3 * u2)
    return 1.0 / u


def discrete_gradient_step(p: GradientFlowProblem, z, cfg: DiscreteGradientConfig,
                           solver: Optional[InnerSolver] = None,
                           tau: float = 0.0) -> tuple[np.ndarray, StepRecord]:
    solver = solver or QuasiNewtonProximalSolver()
    theta, dtau, tol = cfg.theta, cfg.dtau, cfg.inner_tol
    z_n = np.asarray(z, dtype=float)
    v_n = float(p.potential(z_n))
    z_theta = z_n.copy()
    z_next = z_n.copy()
    gamma = 1.0
    dz = np.inf
    recips = []
    for l in range(1, cfg.max_inner + 1):
        prox = ProximalProblem(p, z_n, p.mobility(z_theta), gamma=gamma,
                               theta=theta, dtau=dtau, start=z_theta)
        z_theta_new, _ = solver(prox)
        _check_finite(z_theta_new, "discrete gradient")
        z_next_new = (z_theta_new - (1.0 - theta) * z_n) / theta
        gamma_new, noise = _gamma_parts(p, z_n, z_next_new, theta, v_n=v_n)
        # a proximal solution makes grad V(z_theta) . dz strictly negative, so a
        # negative gamma is rounding noise at a critical point where gamma is huge;
        # a negative weight would make the next sub-problem unbounded below
        gamma_new = abs(gamma_new)
        dz = float(np.linalg.norm(z_next_new - z_next))
        # the state inherits gamma's rounding uncertainty through the step length
        slack = noise * float(np.linalg.norm(z_next_new - z_n))
        ok_state = dz <= tol * (1.0 + float(np.linalg.norm(z_next))) + slack
        ok_gamma = _gamma_settled(gamma, gamma_new, tol, noise)
        z_theta, z_next, gamma = z_theta_new, z_next_new, gamma_new
        if ok_state and ok_gamma:
            break
        recips.append(1.0 / gamma if gamma > 0.0 else np.inf)
        if len(recips) == 3:
            gamma = _aitken_gamma(recips, gamma)
            recips.clear()
    else:
        raise InnerIterationError(
            f"discrete gradient loop did not converge in {cfg.max_inner} iterations "
            f"(|dz|={dz:.3e}, gamma={gamma:.6g})")
    v_next = float(p.potential(z_next))
    if v_next - v_n > 1e-10 * (1.0 + abs(v_n)):
        raise DecayViolation(f"potential rose from {v_n!r} to {v_next!r}")
    return z_next, StepRecord(tau + dtau, z_next, v_next, gamma, l)


def integrate(p: GradientFlowProblem, z0, method: str, dtau: float, tau_end: float,
              solver: Optional[InnerSolver] = None, theta: float = 1.0,
              inner_tol: float = 1e-10, max_inner: int = 500,
              callback: Optional[Callable[[StepRecord], bool]] = None) -> list[StepRecord]:
    """Run ``method`` from ``z0`` to ``tau_end`` and record every step.

    ``callback`` sees each new record; returning True stops the run early.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if tau_end < 0:
        raise ValueError("tau_end must be non-negative")
    n_steps = int(round(tau_end / dtau)) if tau_end > 0 else 0
    if n_steps and abs(n_steps * dtau - tau_end) > 1e-9 * max(1.0, tau_end):
        raise ValueError(f"dtau={dtau} does not divide tau_end={tau_end}")
    cfg = DiscreteGradientConfig(dtau=dtau, theta=theta, inner_tol=inner_tol,
                                 max_inner=max_inner)
    z = np.array(z0, dtype=float)
    records = [StepRecord(0.0, z.copy(), float(p.potential(z)))]
    if callback is not None and callback(records[0]):
        return records
    for n in range(n_steps):
        tau = n * dtau
        try:
            if method == "ee":
                z = explicit_euler_step(p, z, dtau)
                rec = StepRecord(tau + dtau, z, float(p.potential(z)))
            elif method == "si":
                z = semi_implicit_step(p, z, dtau, solver)
                rec = StepRecord(tau + dtau, z, float(p.potential(z)), 1.0, 1)
            else:
                z, rec = discrete_gradient_step(p, z, cfg, solver, tau=tau)
        except (NonFiniteStateError, InnerIterationError, DecayViolation,
                SolverError) as exc:
            raise StepFailure(n + 1, method, exc) from exc
        if not np.isfinite(rec.potential_value):
            raise StepFailure(n + 1, method,
                              NonFiniteStateError("potential is non-finite"))
        rec.tau = (n + 1) * dtau
        records.append(rec)
        if callback is not None and callback(rec):
            break
    return records
