"""Ensemble Kalman-Bucy filter as a gradient flow.

The ensemble is stacked particle by particle into ``z = (x^1, ..., x^M)``.  The
potential is ``V = (M/2) S(mean) + (1/2) sum_i S(x^i)`` with the Gaussian
negative log-likelihood ``S``, and the mobility is block-diagonal with the
ensemble covariance on every block.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .flow import GradientFlowProblem, ProximalProblem, StepRecord
from .numcore import (as_ensemble, cross_covariance, ensemble_covariance,
                      ensemble_mean, psd_pseudo_inverse)
from .solvers import ResidualProblem, SolverReport, gauss_newton


@dataclass
class ObservationModel:
    """Forward map ``h`` with Gaussian noise covariance ``R`` and datum ``y``.

    ``forward`` maps an ``(M, N_x)`` batch to ``(M, N_y)``; ``forward_jacobian``
    maps it to ``(M, N_y, N_x)``.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    forward_jacobian: Callable[[np.ndarray], np.ndarray]
    noise_cov: np.ndarray
    observation: np.ndarray

    def __post_init__(self):
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        self.observation = np.atleast_1d(np.asarray(self.observation, dtype=float))
        if self.noise_cov.shape != (self.observation.size,) * 2:
            raise ValueError("noise covariance does not match observation size")
        if np.linalg.eigvalsh(self.noise_cov).min() <= 0.0:
            raise ValueError("noise covariance must be SPD")
        self.noise_prec = np.linalg.inv(self.noise_cov)

    def images(self, e) -> np.ndarray:
        return self._images(as_ensemble(e))

    def jacobians(self, e) -> np.ndarray:
        return self._jacobians(as_ensemble(e))

    def _images(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.forward(x), dtype=float).reshape(x.shape[0], -1)

    def _jacobians(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.forward_jacobian(x), dtype=float).reshape(
            x.shape[0], self.observation.size, x.shape[1])


@dataclass
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class LinearReferenceSolution:
    """Scalar Gaussian prior, identity forward map, noise variance ``r``."""

    prior: GaussianPrior
    r: float
    y: float


def linear_model(H, R, y) -> ObservationModel:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return ObservationModel(
        forward=lambda x: x @ H.T,
        forward_jacobian=lambda x: np.broadcast_to(H, (x.shape[0],) + H.shape),
        noise_cov=R,
        observation=y,
    )


def cubic_forward(x):
    return 7.0 / 12.0 * x**3 - 3.5 * x**2 + 8.0 * x


def cubic_derivative(x):
    return 7.0 / 4.0 * x**2 - 7.0 * x + 8.0


def cubic_model(r: float = 1.0, y: float = 2.0) -> ObservationModel:
    """Scalar cubic forward map used for the nonlinear test problem."""
    return ObservationModel(
        forward=cubic_forward,
        forward_jacobian=lambda x: cubic_derivative(x)[:, :, None],
        noise_cov=[[r]],
        observation=[y],
    )


def _nll_batch(om: ObservationModel, x: np.ndarray) -> np.ndarray:
    d = om._images(x) - om.observation
    return 0.5 * np.einsum("mi,ij,mj->m", d, om.noise_prec, d)


def _nll_grad_batch(om: ObservationModel, x: np.ndarray) -> np.ndarray:
    d = om._images(x) - om.observation
    return np.einsum("mji,jk,mk->mi", om._jacobians(x), om.noise_prec, d)


def _with_mean(x: np.ndarray) -> np.ndarray:
    # mean on row 0, members below: one forward evaluation serves both terms
    return np.concatenate([x.sum(axis=0, keepdims=True) / x.shape[0], x])


def neg_log_likelihood(om: ObservationModel, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(_nll_batch(om, x[None, :])[0])


def enkbf_potential(om: ObservationModel, e) -> float:
    return _potential(om, as_ensemble(e))


def _potential(om: ObservationModel, x: np.ndarray) -> float:
    s = _nll_batch(om, _with_mean(x))
    return 0.5 * x.shape[0] * float(s[0]) + 0.5 * float(s[1:].sum())


def enkbf_gradient(om: ObservationModel, e) -> np.ndarray:
    """Gradient of the potential with respect to every particle, stacked."""
    return _member_gradients(om, as_ensemble(e)).ravel()


def _member_gradients(om: ObservationModel, x: np.ndarray) -> np.ndarray:
    g = _nll_grad_batch(om, _with_mean(x))
    return 0.5 * (g[:1] + g[1:])


def enkbf_mobility(e) -> np.ndarray:
    x = as_ensemble(e)
    return np.kron(np.eye(x.shape[0]), ensemble_covariance(x))


def derivative_free_rhs(om: ObservationModel, e) -> np.ndarray:
    """Per-particle drift ``-P^{xh} R^{-1} ((h(x^i) + hbar)/2 - y)``."""
    x = as_ensemble(e)
    hx = om.images(x)
    hbar = hx.mean(axis=0)
    pxh = cross_covariance(x, hx)
    innov = 0.5 * (hx + hbar) - om.observation
    return -(innov @ om.noise_prec.T) @ pxh.T


def ienkf_step(om: ObservationModel, e, dt: float) -> np.ndarray:
    """Gradient-free explicit step with the regularised gain ``P^{xh}(dt P^{hh} + R)^{-1}``."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    x = as_ensemble(e)
    hx = om.images(x)
    hbar = hx.mean(axis=0)
    pxh = cross_covariance(x, hx)
    phh = ensemble_covariance(hx)
    gain = np.linalg.solve((dt * phh + om.noise_cov).T, pxh.T).T
    innov = 0.5 * (hx + hbar) - om.observation
    return x - dt * innov @ gain.T


def run_ienkf(om: ObservationModel, e0, dt: float, tau_end: float) -> list[StepRecord]:
    x = as_ensemble(e0).copy()
    n_steps = int(round(tau_end / dt))
    if abs(n_steps * dt - tau_end) > 1e-9 * max(1.0, tau_end):
        raise ValueError(f"dt={dt} does not divide tau_end={tau_end}")
    records = [StepRecord(0.0, x.ravel().copy(), enkbf_potential(om, x))]
    for n in range(n_steps):
        x = ienkf_step(om, x, dt)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"IEnKF produced a non-finite ensemble at step {n + 1}")
        records.append(StepRecord((n + 1) * dt, x.ravel().copy(), enkbf_potential(om, x)))
    return records


def build_enkbf_problem(om: ObservationModel, m: int, n_x: int = 1) -> GradientFlowProblem:
    """Gradient flow on the stacked ensemble; meant to be run over tau in [0, 1]."""
    shape = (m, n_x)
    return GradientFlowProblem(
        dim=m * n_x,
        potential=lambda z: _potential(om, np.reshape(z, shape)),
        gradient=lambda z: _member_gradients(om, np.reshape(z, shape)).ravel(),
        mobility=lambda z: enkbf_mobility(np.reshape(z, shape)),
        name="enkbf",
        drift=lambda z: _enkbf_drift(om, np.reshape(z, shape)),
    )


def _enkbf_drift(om: ObservationModel, x: np.ndarray) -> np.ndarray:
    # block-diagonal P applied to every particle gradient
    d = x - x.sum(axis=0) / x.shape[0]
    p = d.T @ d / (x.shape[0] - 1)
    return (_member_gradients(om, x) @ p).ravel()


def build_inner_residual(om: ObservationModel, e_n, gamma: float, theta: float,
                         dtau: float, sigma_ref) -> ResidualProblem:
    """Least-squares form of one implicit EnKBF sub-problem.

    Residual ``f(z) = (z - z_n; h(xbar) - y; h(x^1) - y; ...; h(x^M) - y)``.
    The weight blocks are ``I (x) sigma_ref^+``, ``s M R^{-1} / 2`` and
    ``I (x) s R^{-1} / 2`` with ``s = gamma * theta * dtau``, so that
    ``0.5 f^T C f`` equals ``0.5 |z - z_n|^2_{A^+} + s V(z)``.
    """
    x_n = as_ensemble(e_n)
    m, n_x = x_n.shape
    n_y = om.observation.size
    z_n = x_n.ravel()
    s = gamma * theta * dtau
    prox_w = psd_pseudo_inverse(np.atleast_2d(sigma_ref))
    weight = np.zeros((m * n_x + n_y * (m + 1),) * 2)
    k = m * n_x
    weight[:k, :k] = np.kron(np.eye(m), prox_w)
    weight[k:k + n_y, k:k + n_y] = 0.5 * s * m * om.noise_prec
    weight[k + n_y:, k + n_y:] = np.kron(np.eye(m), 0.5 * s * om.noise_prec)

    def residual(z):
        x = np.reshape(z, (m, n_x))
        hbar = om.images(x.mean(axis=0, keepdims=True))[0]
        hx = om.images(x)
        return np.concatenate([z - z_n, hbar - om.observation,
                               (hx - om.observation).ravel()])

    def jacobian(z):
        x = np.reshape(z, (m, n_x))
        jbar = om.jacobians(x.mean(axis=0, keepdims=True))[0]
        jx = om.jacobians(x)
        mean_rows = np.tile(jbar / m, (1, m))
        diag = np.zeros((m * n_y, m * n_x))
        for i in range(m):
            diag[i * n_y:(i + 1) * n_y, i * n_x:(i + 1) * n_x] = jx[i]
        return np.vstack([np.eye(m * n_x), mean_rows, diag])

    return ResidualProblem(residual, jacobian, weight)


class GaussNewtonInnerSolver:
    """Solves the EnKBF proximal sub-problems by Gauss-Newton.

    The covariance block of the supplied mobility plays the role of
    ``sigma_ref``; iterates are confined to the image of the mobility.
    """

    def __init__(self, om: ObservationModel, n_x: int = 1, tol: float = 1e-12,
                 max_iter: int = 100):
        self.om = om
        self.n_x = n_x
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, prox: ProximalProblem) -> tuple[np.ndarray, SolverReport]:
        if prox.basis.shape[1] == 0:
            return prox.anchor.copy(), SolverReport(0, 0.0, True, 0.0)
        n_x = self.n_x
        m = prox.anchor.size // n_x
        sigma = prox.mobility[:n_x, :n_x]
        res = build_inner_residual(self.om, prox.anchor.reshape(m, n_x), prox.gamma,
                                   prox.theta, prox.dtau, sigma)
        reduced = res.restricted(prox.anchor, prox.basis)
        w, rep = gauss_newton(reduced, prox.start_coords(), tol=self.tol,
                              max_iter=self.max_iter)
        return prox.point(w), rep


def analytic_linear_solution(ref: LinearReferenceSolution, tau: float) -> tuple[float, float]:
    """Mean and variance of the scalar linear EnKBF at pseudo-time ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    m0 = float(np.squeeze(ref.prior.mean))
    s0 = float(np.squeeze(ref.prior.cov))
    k = s0 * tau / (s0 * tau + ref.r)
    return m0 + k * (ref.y - m0), s0 - k * s0


def two_member_ensemble(m0: float, s0: float) -> np.ndarray:
    """The M=2 scalar ensemble with mean ``m0`` and (M-1)-variance ``s0``, ordered."""
    d = np.sqrt(0.5 * s0)
    return np.array([[m0 - d], [m0 + d]])
