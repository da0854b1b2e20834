"""Particle-flow Fokker-Planck dynamics driven by a kernel KL potential.

The particle density is the Gaussian kernel mixture
``pi~(x) = (1/M) sum_j psi(x - x^j)`` and the potential is

    V = (1/M) sum_j [ log pi~(x^j) - log pi*(x^j) ].

All kernel sums are done in log space, so well-separated particles do not
underflow.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .flow import (GradientFlowProblem, InnerSolver, StepRecord,
                   DiscreteGradientConfig, discrete_gradient_step,
                   explicit_euler_step, semi_implicit_step, METHODS,
                   NonFiniteStateError, InnerIterationError, DecayViolation,
                   StepFailure)
from .numcore import (as_ensemble, cross_covariance, ensemble_covariance,
                      ensemble_mean, psd_pseudo_inverse)
from .solvers import SolverError


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(top, axis=axis) + np.log(np.sum(np.exp(a - top), axis=axis))


class GaussianKernel:
    """``psi(d) = scale * n(d; 0, B)``; ``scale`` only exists to test invariance."""

    def __init__(self, bandwidth_cov, scale: float = 1.0):
        b = np.atleast_2d(np.asarray(bandwidth_cov, dtype=float))
        b = 0.5 * (b + b.T)
        sign, logdet = np.linalg.slogdet(b)
        if sign <= 0 or np.linalg.eigvalsh(b).min() <= 0.0:
            raise ValueError("kernel bandwidth covariance must be SPD")
        self.bandwidth_cov = b
        self.precision = np.linalg.inv(b)
        self.dim = b.shape[0]
        self.log_norm = float(np.log(scale) - 0.5 * (self.dim * np.log(2 * np.pi) + logdet))

    def log_value(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        return self.log_norm - 0.5 * np.einsum("...i,ij,...j->...", d, self.precision, d)

    def value(self, d) -> np.ndarray:
        return np.exp(self.log_value(d))

    def grad(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        return -self.value(d)[..., None] * (d @ self.precision)


@dataclass
class TargetDensity:
    """Unnormalised log target, evaluated on ``(M, N_x)`` batches."""

    log_density: Callable[[np.ndarray], np.ndarray]
    grad_log_density: Callable[[np.ndarray], np.ndarray]


def gaussian_target(mean, cov) -> TargetDensity:
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    prec = np.linalg.inv(np.atleast_2d(cov))
    return TargetDensity(
        log_density=lambda x: -0.5 * np.einsum("mi,ij,mj->m", x - mu, prec, x - mu),
        grad_log_density=lambda x: -(x - mu) @ prec,
    )


def bayes_target(prior_mean, prior_cov, om) -> TargetDensity:
    """Gaussian prior times the likelihood of an :class:`~gfbayes.enkbf.ObservationModel`."""
    prior = gaussian_target(prior_mean, prior_cov)

    def log_density(x):
        d = om.images(x) - om.observation
        return prior.log_density(x) - 0.5 * np.einsum("mi,ij,mj->m", d, om.noise_prec, d)

    def grad_log_density(x):
        d = om.images(x) - om.observation
        g = np.einsum("mji,jk,mk->mi", om.jacobians(x), om.noise_prec, d)
        return prior.grad_log_density(x) - g

    return TargetDensity(log_density, grad_log_density)


def mixture_target(weights, centers, cov) -> TargetDensity:
    """Gaussian mixture with shared covariance as a target."""
    w = np.asarray(weights, dtype=float)
    c = as_ensemble(centers)
    prec = np.linalg.inv(np.atleast_2d(cov))
    logw = np.log(np.where(w > 0, w, 1.0)) + np.where(w > 0, 0.0, -np.inf)

    def comp(x):
        d = x[:, None, :] - c[None, :, :]
        return logw[None, :] - 0.5 * np.einsum("mki,ij,mkj->mk", d, prec, d), d

    def log_density(x):
        return _logsumexp(comp(x)[0], axis=1)

    def grad_log_density(x):
        lp, d = comp(x)
        r = np.exp(lp - _logsumexp(lp, axis=1)[:, None])
        return -np.einsum("mk,mki->mi", r, d) @ prec

    return TargetDensity(log_density, grad_log_density)


@dataclass
class FlowConfig:
    alpha: float = 0.01
    preconditioned: bool = False
    tau_end: float = 10.0
    stationarity_tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


def _log_pairs(k: GaussianKernel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = x[:, None, :] - x[None, :, :]
    return k.log_value(d), d


def _log_kde(k: GaussianKernel, e, x) -> np.ndarray:
    e = as_ensemble(e)
    x = np.atleast_2d(x)
    lp = k.log_value(x[:, None, :] - e[None, :, :])
    return _logsumexp(lp, axis=1) - np.log(e.shape[0])


def kde_density(k: GaussianKernel, e, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(np.exp(_log_kde(k, e, x[None, :])[0]))


def kl_potential(k: GaussianKernel, e, target: TargetDensity) -> float:
    x = as_ensemble(e)
    m = x.shape[0]
    lp, _ = _log_pairs(k, x)
    log_kde = _logsumexp(lp, axis=1) - np.log(m)
    if not np.all(np.isfinite(log_kde)):
        raise FloatingPointError("kernel density underflows at a particle")
    return float(np.mean(log_kde - target.log_density(x)))


def kl_gradient(k: GaussianKernel, e, target: TargetDensity) -> np.ndarray:
    """Per-particle gradient of :func:`kl_potential`, shape ``(M, N_x)``."""
    x = as_ensemble(e)
    m = x.shape[0]
    lp, d = _log_pairs(k, x)
    log_sum = _logsumexp(lp, axis=1)
    if not np.all(np.isfinite(log_sum)):
        raise FloatingPointError("kernel density underflows at a particle")
    bd = d @ k.precision
    # grad log pi~ at x^i: softmax over l of psi(x^i - x^l), times -B^{-1}(x^i - x^l)
    own = -np.einsum("il,ilk->ik", np.exp(lp - log_sum[:, None]), bd)
    # interaction: psi(x^i - x^j) / pi~(x^j), with pi~(x^j) = exp(log_sum_j) / M;
    # the j = i term carries d = 0 and vanishes
    log_kde = log_sum - np.log(m)
    cross = -np.einsum("ij,ijk->ik", np.exp(lp - log_kde[None, :]), bd) / m
    return (own + cross - target.grad_log_density(x)) / m


def shrink_initialise(prior_samples, alpha: float) -> tuple[np.ndarray, GaussianKernel]:
    """Shrink samples toward their mean and widen the kernel to keep two moments."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    x = as_ensemble(prior_samples)
    xbar = ensemble_mean(x)
    p0 = ensemble_covariance(x)
    if np.linalg.eigvalsh(p0).min() <= 0.0:
        raise ValueError("prior sample covariance is not SPD; need more samples "
                         "than dimensions and non-degenerate spread")
    particles = x - alpha * (x - xbar)
    return particles, GaussianKernel((2 * alpha - alpha**2) * p0)


def build_fp_problem(k: GaussianKernel, target: TargetDensity, m: int,
                     cfg: Optional[FlowConfig] = None, n_x: Optional[int] = None
                     ) -> GradientFlowProblem:
    """Flow ``dx^i = -A grad_i V`` with ``A = M I`` or, preconditioned, ``M P^{xx}`` blocks."""
    cfg = cfg or FlowConfig()
    n_x = n_x or k.dim
    shape = (m, n_x)

    if cfg.preconditioned:
        def mobility(z):
            x = np.reshape(z, shape)
            return np.kron(np.eye(m), m * ensemble_covariance(x))
    else:
        eye = m * np.eye(m * n_x)

        def mobility(z):
            return eye

    return GradientFlowProblem(
        dim=m * n_x,
        potential=lambda z: kl_potential(k, np.reshape(z, shape), target),
        gradient=lambda z: kl_gradient(k, np.reshape(z, shape), target).ravel(),
        mobility=mobility,
        name="fokker-planck",
    )


@dataclass
class FlowResult:
    ensemble: np.ndarray
    records: list
    stop_reason: str

    def __iter__(self):
        return iter((self.ensemble, self.records, self.stop_reason))


def run_to_stationarity(problem: GradientFlowProblem, e0, method: str, dtau: float,
                        cfg: FlowConfig, solver: Optional[InnerSolver] = None,
                        theta: float = 1.0) -> FlowResult:
    """Integrate until the stacked gradient norm drops below the threshold or tau_end.

    ``stop_reason`` is ``"stationary"`` or ``"tau_end"``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    x0 = as_ensemble(e0)
    z = x0.ravel().copy()
    records = [StepRecord(0.0, z.copy(), float(problem.potential(z)))]
    if np.linalg.norm(problem.gradient(z)) <= cfg.stationarity_tol:
        return FlowResult(x0.copy(), records, "stationary")
    dg_cfg = DiscreteGradientConfig(dtau=dtau, theta=theta)
    n_max = int(np.ceil(cfg.tau_end / dtau - 1e-9))
    reason = "tau_end"
    for n in range(n_max):
        tau = n * dtau
        try:
            if method == "ee":
                z = explicit_euler_step(problem, z, dtau)
                rec = StepRecord(tau + dtau, z, float(problem.potential(z)))
            elif method == "si":
                z = semi_implicit_step(problem, z, dtau, solver)
                rec = StepRecord(tau + dtau, z, float(problem.potential(z)), 1.0, 1)
            else:
                z, rec = discrete_gradient_step(problem, z, dg_cfg, solver, tau=tau)
        except (NonFiniteStateError, InnerIterationError, DecayViolation,
                SolverError, FloatingPointError) as exc:
            raise StepFailure(n + 1, method, exc) from exc
        rec.tau = (n + 1) * dtau
        records.append(rec)
        if np.linalg.norm(problem.gradient(z)) <= cfg.stationarity_tol:
            reason = "stationary"
            break
    return FlowResult(np.reshape(z, x0.shape).copy(), records, reason)


def empirical_moments(e) -> tuple[np.ndarray, np.ndarray]:
    """Particle average for the mean; the covariance uses the M-1 divisor."""
    x = as_ensemble(e)
    return ensemble_mean(x), ensemble_covariance(x)


def gradient_free_loglik_grad(om, e, x) -> np.ndarray:
    """Ensemble surrogate ``(P^{xx})^+ P^{xh} R^{-1} (h(x) - y)`` for the gradient of ``S``.

    ``x`` may be a single point or an ``(K, N_x)`` batch.
    """
    ens = as_ensemble(e)
    pxx_inv = psd_pseudo_inverse(ensemble_covariance(ens))
    pxh = cross_covariance(ens, om.images(ens))
    single = np.ndim(x) < 2
    pts = np.reshape(np.asarray(x, dtype=float), (-1, ens.shape[1]))
    g = (om.images(pts) - om.observation) @ om.noise_prec.T @ pxh.T @ pxx_inv.T
    return g[0] if single else g
