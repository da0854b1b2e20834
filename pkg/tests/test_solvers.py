import numpy as np
import pytest
from scipy.optimize import least_squares, minimize

from gfbayes.solvers import (ResidualProblem, SolverError, gauss_newton,
                             quasi_newton_minimize)


def rosenbrock(z):
    return (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2


def rosenbrock_grad(z):
    return np.array([-2 * (1 - z[0]) - 400 * z[0] * (z[1] - z[0] ** 2),
                     200 * (z[1] - z[0] ** 2)])


def test_bfgs_rosenbrock():
    z, rep = quasi_newton_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], tol=1e-10,
                                   max_iter=500)
    assert rep.converged
    assert np.allclose(z, [1.0, 1.0], atol=1e-8)


def test_bfgs_quadratic_matches_linear_solve():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    q = a @ a.T + 6 * np.eye(6)
    b = rng.standard_normal(6)
    z, rep = quasi_newton_minimize(lambda z: 0.5 * z @ q @ z - b @ z, lambda z: q @ z - b,
                                   np.zeros(6), tol=1e-12)
    assert np.allclose(z, np.linalg.solve(q, b), atol=1e-10)


def test_bfgs_agrees_with_scipy_on_smooth_problem():
    f = lambda z: np.sum(np.cosh(z - 1.0)) + 0.1 * (z @ z) ** 2
    g = lambda z: np.sinh(z - 1.0) + 0.4 * (z @ z) * z
    z, _ = quasi_newton_minimize(f, g, np.zeros(4), tol=1e-12)
    ref = minimize(f, np.zeros(4), jac=g, method="BFGS", options={"gtol": 1e-12}).x
    assert np.allclose(z, ref, atol=1e-8)


def test_bfgs_handles_badly_scaled_objective():
    # curvature of order 1e10 along one axis: first step length must adapt
    f = lambda z: 0.5 * (1e10 * z[0] ** 2 + z[1] ** 2)
    g = lambda z: np.array([1e10 * z[0], z[1]])
    z, rep = quasi_newton_minimize(f, g, [1.0, 1.0], tol=1e-12, max_iter=200)
    assert rep.converged
    assert np.allclose(z, 0.0, atol=1e-8)


def test_bfgs_iteration_cap_raises():
    with pytest.raises(SolverError) as info:
        quasi_newton_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], max_iter=2)
    assert info.value.report.iterations == 2
    assert not info.value.report.converged


def test_bfgs_starting_at_minimum_takes_no_iterations():
    _, rep = quasi_newton_minimize(rosenbrock, rosenbrock_grad, [1.0, 1.0])
    assert rep.iterations == 0


def test_gauss_newton_linear_problem_single_iteration():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((8, 3))
    b = rng.standard_normal(8)
    c = np.diag(rng.uniform(0.5, 2.0, 8))
    p = ResidualProblem(lambda z: a @ z - b, lambda z: a, c)
    z, rep = gauss_newton(p, np.zeros(3))
    ref = np.linalg.solve(a.T @ c @ a, a.T @ c @ b)
    assert np.allclose(z, ref, atol=1e-12)
    assert rep.iterations == 1


def test_gauss_newton_matches_scipy_least_squares():
    t = np.linspace(0, 2, 20)
    y = 2.0 * np.exp(-1.3 * t) + 0.01 * np.sin(7 * t)
    res = lambda z: z[0] * np.exp(-z[1] * t) - y
    jac = lambda z: np.column_stack([np.exp(-z[1] * t), -z[0] * t * np.exp(-z[1] * t)])
    p = ResidualProblem(res, jac, np.eye(t.size))
    z, rep = gauss_newton(p, [1.0, 1.0], tol=1e-12)
    ref = least_squares(res, [1.0, 1.0], jac=jac, xtol=1e-15, ftol=1e-15, gtol=1e-15).x
    assert rep.converged
    assert np.allclose(z, ref, atol=1e-9)


def test_gauss_newton_weighting_matters():
    # two inconsistent observations of one scalar: weights pick the compromise
    a = np.array([[1.0], [1.0]])
    b = np.array([0.0, 1.0])
    p = ResidualProblem(lambda z: a @ z - b, lambda z: a, np.diag([3.0, 1.0]))
    z, _ = gauss_newton(p, [5.0])
    assert z[0] == pytest.approx(0.25)


def test_restricted_problem_stays_in_subspace():
    a = np.eye(3)
    p = ResidualProblem(lambda z: a @ z - np.array([1.0, 2.0, 3.0]), lambda z: a, np.eye(3))
    basis = np.array([[1.0], [0.0], [0.0]])
    w, _ = gauss_newton(p.restricted(np.zeros(3), basis), np.zeros(1))
    assert w[0] == pytest.approx(1.0)


def test_gauss_newton_iteration_cap():
    res = lambda z: np.array([z[0] ** 2 - 2.0])
    jac = lambda z: np.array([[2 * z[0]]])
    with pytest.raises(SolverError):
        gauss_newton(ResidualProblem(res, jac, np.eye(1)), [100.0], tol=1e-14, max_iter=2)


def test_bfgs_objective_never_rises():
    seen = []
    quasi_newton_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], tol=1e-10, max_iter=500,
                          callback=lambda z, f: seen.append(f))
    f = np.array([rosenbrock(np.array([-1.2, 1.0]))] + seen)
    # accepted steps may only tie at rounding level
    assert np.all(np.diff(f) <= 16 * np.finfo(float).eps * (1 + np.abs(f[:-1])))


def test_solvers_are_deterministic():
    runs = []
    for _ in range(2):
        path = []
        z, _ = quasi_newton_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], max_iter=500,
                                     callback=lambda z, f: path.append(z.copy()))
        runs.append(np.array(path))
    assert np.array_equal(runs[0], runs[1])
    t = np.linspace(0, 1, 10)
    p = ResidualProblem(lambda z: z[0] * np.exp(-z[1] * t) - np.cos(t),
                        lambda z: np.column_stack([np.exp(-z[1] * t), -z[0] * t * np.exp(-z[1] * t)]),
                        np.eye(10))
    assert np.array_equal(gauss_newton(p, [1.0, 0.5])[0], gauss_newton(p, [1.0, 0.5])[0])


def test_gauss_newton_invariant_under_weight_scaling():
    from gfbayes.enkbf import build_inner_residual, cubic_model
    e_n = np.random.default_rng(2).normal(-2.0, 0.7, (5, 1))
    res = build_inner_residual(cubic_model(), e_n, 1.3, 1.0, 0.1, np.cov(e_n.T, ddof=1))
    z_ref, _ = gauss_newton(res, e_n.ravel(), tol=1e-13)
    for c in (1e-3, 7.0, 1e4):
        scaled = ResidualProblem(res.residual, res.jacobian, c * res.weight)
        z, _ = gauss_newton(scaled, e_n.ravel(), tol=1e-13)
        assert np.allclose(z, z_ref, atol=1e-10)
