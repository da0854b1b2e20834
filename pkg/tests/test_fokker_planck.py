import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from gfbayes.enkbf import cubic_derivative, cubic_model, linear_model
from gfbayes.flow import DiscreteGradientConfig, discrete_gradient_step
from gfbayes.fokker_planck import (FlowConfig, GaussianKernel, bayes_target, build_fp_problem,
                                   empirical_moments, gaussian_target, gradient_free_loglik_grad,
                                   kde_density, kl_gradient, kl_potential, mixture_target,
                                   run_to_stationarity, shrink_initialise)
from gfbayes.numcore import ensemble_covariance, make_rng, sample_gaussian

LIN = linear_model([[1.0]], [[0.02]], [0.1])


def fd_gradient(f, z, h=1e-6):
    return np.array([(f(z + e) - f(z - e)) / (2 * h) for e in h * np.eye(z.size)])


def test_kernel_matches_scipy():
    b = np.array([[0.3, 0.1], [0.1, 0.2]])
    k = GaussianKernel(b)
    d = np.array([[0.1, -0.2], [0.5, 0.4]])
    assert np.allclose(k.value(d), multivariate_normal(np.zeros(2), b).pdf(d), rtol=1e-12)


def test_kernel_gradient_vanishes_at_origin():
    k = GaussianKernel(np.eye(3) * 0.4)
    assert np.array_equal(k.grad(np.zeros(3)), np.zeros(3))


def test_kernel_rejects_non_spd():
    with pytest.raises(ValueError):
        GaussianKernel([[0.0]])


def test_kde_density_matches_scipy_mixture():
    e = np.array([[0.0], [1.0], [2.5]])
    k = GaussianKernel([[0.25]])
    ref = np.mean([norm(c, 0.5).pdf(0.7) for c in e.ravel()])
    assert kde_density(k, e, [0.7]) == pytest.approx(ref, rel=1e-12)


def test_mixture_target_matches_scipy():
    w = np.array([0.2, 0.5, 0.3])
    c = np.array([[0.0, 0.0], [1.0, -1.0], [2.0, 0.5]])
    cov = np.array([[0.5, 0.1], [0.1, 0.3]])
    t = mixture_target(w, c, cov)
    x = make_rng(0).standard_normal((4, 2))
    lp = np.array([[np.log(wi) + multivariate_normal(ci, cov).logpdf(xi) for wi, ci in zip(w, c)]
                   for xi in x])
    # unnormalised: differs from the scipy value by the Gaussian normaliser only
    diff = t.log_density(x) - logsumexp(lp, axis=1)
    assert np.allclose(diff, diff[0], atol=1e-12)
    for xi in x:
        fd = fd_gradient(lambda z: t.log_density(z[None])[0], xi)
        assert np.allclose(t.grad_log_density(xi[None])[0], fd, rtol=1e-6, atol=1e-7)


def test_bayes_target_gradient_matches_fd():
    t = bayes_target([-2.0], [[0.5]], cubic_model())
    for x in (-2.5, -1.0, 0.3, 1.7):
        fd = fd_gradient(lambda z: t.log_density(z[None])[0], np.array([x]))
        assert t.grad_log_density(np.array([[x]]))[0] == pytest.approx(fd, rel=1e-7)


@pytest.mark.parametrize("dim", [1, 3])
def test_kl_gradient_matches_finite_differences(dim):
    rng = make_rng(dim)
    a = rng.standard_normal((dim, dim))
    k = GaussianKernel(0.3 * np.eye(dim) + 0.05 * a @ a.T)
    target = gaussian_target(np.zeros(dim), np.eye(dim) * 0.8)
    m = 6
    for _ in range(5):
        x = rng.standard_normal((m, dim))
        fd = fd_gradient(lambda z: kl_potential(k, z.reshape(m, dim), target), x.ravel())
        assert np.allclose(kl_gradient(k, x, target).ravel(), fd, rtol=1e-6, atol=1e-8)


def test_kl_potential_survives_far_apart_particles():
    k = GaussianKernel([[1e-4]])
    x = np.array([[0.0], [10.0], [20.0]])
    t = gaussian_target([0.0], [[1.0]])
    assert np.isfinite(kl_potential(k, x, t))
    assert np.all(np.isfinite(kl_gradient(k, x, t)))


def test_kernel_scaling_invariance_of_flow():
    x = make_rng(2).standard_normal((5, 2))
    t = gaussian_target([0.3, -0.1], np.eye(2))
    b = np.array([[0.2, 0.05], [0.05, 0.1]])
    rhs = []
    for scale in (1.0, 7.3):
        p = build_fp_problem(GaussianKernel(b, scale), t, 5)
        rhs.append(-p.mobility(x.ravel()) @ p.gradient(x.ravel()))
    assert np.allclose(rhs[0], rhs[1], rtol=0, atol=1e-12)


def test_permutation_equivariance_of_gradient():
    x = make_rng(3).standard_normal((7, 2))
    k = GaussianKernel(np.eye(2) * 0.3)
    t = gaussian_target([0.0, 0.0], np.eye(2))
    perm = make_rng(4).permutation(7)
    assert np.allclose(kl_gradient(k, x[perm], t), kl_gradient(k, x, t)[perm], atol=1e-14)
    assert kl_potential(k, x[perm], t) == pytest.approx(kl_potential(k, x, t), rel=1e-14)


def test_translation_equivariance_of_flow():
    shift = np.array([1.5, -0.7])
    x0 = make_rng(5).standard_normal((6, 2))
    k = GaussianKernel(np.eye(2) * 0.2)
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    finals = []
    for c in (np.zeros(2), shift):
        p = build_fp_problem(k, gaussian_target(c, cov), 6)
        z = (x0 + c).ravel()
        for _ in range(3):
            z, _ = discrete_gradient_step(p, z, DiscreteGradientConfig(0.05))
        finals.append(z.reshape(6, 2) - c)
    assert np.allclose(finals[0], finals[1], atol=1e-8)


def test_shrink_initialise_preserves_two_moments():
    prior = sample_gaussian(make_rng(6), [1.0, -1.0], [[1.0, 0.4], [0.4, 2.0]], 30)
    for alpha in (0.005, 0.3, 0.9, 1.0):
        x, k = shrink_initialise(prior, alpha)
        # equal up to the last bit of the summation
        assert np.allclose(x.mean(axis=0), prior.mean(axis=0), rtol=0, atol=1e-15)
        total = k.bandwidth_cov + ensemble_covariance(x)
        assert np.allclose(total, ensemble_covariance(prior), rtol=0, atol=1e-12)


def test_shrink_initialise_validation():
    with pytest.raises(ValueError):
        shrink_initialise(np.zeros((3, 1)), 0.5)
    with pytest.raises(ValueError):
        shrink_initialise(np.arange(3.0), 0.0)


def test_stationary_start_terminates_immediately():
    # symmetric pair around the mean of a Gaussian target is a critical point
    k = GaussianKernel([[0.5]])
    t = gaussian_target([0.0], [[1.0]])
    p = build_fp_problem(k, t, 2, FlowConfig(stationarity_tol=1e-8))
    # find the symmetric stationary spacing by bisection on the gradient
    lo, hi = 1e-3, 3.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g = kl_gradient(k, np.array([[-mid], [mid]]), t)[1, 0]
        lo, hi = (mid, hi) if g < 0 else (lo, mid)
    x0 = np.array([[-lo], [lo]])
    res = run_to_stationarity(p, x0, "dg", 0.1, FlowConfig(stationarity_tol=1e-8))
    assert res.stop_reason == "stationary"
    assert len(res.records) == 1


def test_preconditioned_flow_shares_stationary_points():
    prior = sample_gaussian(make_rng(7), [0.5], [[1.0]], 10)
    x0, k = shrink_initialise(prior, 0.005)
    t = bayes_target([0.5], [[1.0]], LIN)
    cfg = FlowConfig(alpha=0.005)
    plain = run_to_stationarity(build_fp_problem(k, t, 10, cfg), x0, "dg", 0.1, cfg)
    assert plain.stop_reason == "stationary"
    pre = build_fp_problem(k, t, 10, FlowConfig(alpha=0.005, preconditioned=True))
    z = plain.ensemble.ravel()
    assert np.linalg.norm(pre.mobility(z) @ pre.gradient(z)) < 1e-6
    assert np.allclose(pre.mobility(z), np.kron(np.eye(10), 10 * ensemble_covariance(plain.ensemble)))


def test_fp_linear_relaxes_in_one_dg_step():
    prior = sample_gaussian(make_rng(0), [0.5], [[1.0]], 10)
    x0, k = shrink_initialise(prior, 0.005)
    cfg = FlowConfig(alpha=0.005)
    p = build_fp_problem(k, bayes_target([0.5], [[1.0]], LIN), 10, cfg)
    res = run_to_stationarity(p, x0, "dg", 0.1, cfg)
    assert res.stop_reason == "stationary" and len(res.records) == 2
    si = run_to_stationarity(p, x0, "si", 0.1, FlowConfig(alpha=0.005, tau_end=100.0))
    assert res.records[1].potential_value == pytest.approx(si.records[-1].potential_value, abs=1e-9)


def test_dg_decays_on_fp_problem():
    prior = sample_gaussian(make_rng(1), [0.5], [[1.0]], 10)
    x0, k = shrink_initialise(prior, 0.005)
    cfg = FlowConfig(alpha=0.005, tau_end=0.2)
    p = build_fp_problem(k, bayes_target([0.5], [[1.0]], LIN), 10, cfg)
    res = run_to_stationarity(p, x0, "dg", 0.004, cfg)
    v = np.array([r.potential_value for r in res.records])
    assert np.all(np.diff(v) <= 1e-10 * (1 + np.abs(v[:-1])))


def test_empirical_moments():
    x = np.array([[0.0], [1.0], [5.0]])
    m, c = empirical_moments(x)
    assert m[0] == pytest.approx(2.0)
    assert c[0, 0] == pytest.approx(np.var(x, ddof=1))


def test_gradient_free_grad_exact_for_linear_map():
    H = np.array([[1.0, 2.0], [0.5, -1.0]])
    om = linear_model(H, np.diag([0.3, 0.7]), [0.2, -0.4])
    e = make_rng(8).standard_normal((10, 2))
    x = np.array([0.3, 0.9])
    exact = H.T @ om.noise_prec @ (H @ x - om.observation)
    assert np.allclose(gradient_free_loglik_grad(om, e, x), exact, atol=1e-12)
    batch = gradient_free_loglik_grad(om, e, np.vstack([x, x]))
    assert batch.shape == (2, 2) and np.allclose(batch[1], exact)


def test_gradient_free_grad_zero_at_data():
    om = cubic_model(y=2.0)
    from scipy.optimize import brentq
    from gfbayes.enkbf import cubic_forward
    x_star = brentq(lambda v: cubic_forward(v) - 2.0, -1, 2)
    e = make_rng(9).normal(0.0, 0.5, (20, 1))
    assert np.allclose(gradient_free_loglik_grad(om, e, [x_star]), 0.0, atol=1e-12)


def test_gradient_free_grad_improves_as_spread_shrinks():
    om = cubic_model()
    x = np.array([-1.0])
    exact = cubic_derivative(x) * (om.forward(x[None])[0] - om.observation) / 1.0
    xi = make_rng(10).standard_normal((50, 1))
    errs = [abs(gradient_free_loglik_grad(om, x + s * xi, x)[0] - exact[0]) for s in (0.5, 0.1, 0.02)]
    assert errs[0] > errs[1] > errs[2]
