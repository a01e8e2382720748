import numpy as np
import pytest
from scipy import integrate, special, stats

from zipln.errors import ParameterError
from zipln.special import lambert_w, log_phi_tilde, log_phi_tilde_grad, phi_tilde


def test_lambert_w_known_values():
    assert lambert_w(0.0) == 0.0
    assert lambert_w(np.e) == pytest.approx(1.0, abs=1e-14)
    assert lambert_w(1.0) == pytest.approx(0.5671432904097838, abs=1e-12)


def test_lambert_w_residual_on_log_grid():
    z = np.logspace(-9, 6, 400)
    w = lambert_w(z)
    assert np.all(np.abs(w * np.exp(w) - z) <= 1e-12 * np.maximum(1.0, z))


def test_lambert_w_matches_scipy():
    z = np.logspace(-6, 8, 50)
    np.testing.assert_allclose(lambert_w(z), special.lambertw(z).real, rtol=1e-12)


def test_lambert_w_rejects_negative_argument():
    with pytest.raises(ParameterError):
        lambert_w(-0.1)


def test_phi_tilde_small_variance_limit():
    mu = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(phi_tilde(mu, 1e-10), np.exp(-np.exp(mu)), rtol=1e-6)


def test_phi_tilde_decreasing_in_mu():
    mu = np.linspace(-2, 4, 61)
    for s2 in (0.1, 1.0, 3.0):
        assert np.all(np.diff(phi_tilde(mu, s2)) < 0)


def test_phi_tilde_rejects_nonpositive_variance():
    with pytest.raises(ParameterError):
        log_phi_tilde(0.0, 0.0)


def _phi_quadrature(mu, s2):
    sd = np.sqrt(s2)
    peak = -special.lambertw(s2 * np.exp(mu)).real / sd
    value, _ = integrate.quad(lambda t: np.exp(-np.exp(mu + sd * t)) * stats.norm.pdf(t), -12, 12,
                              points=[peak], epsabs=0.0, epsrel=1e-10, limit=400)
    return value


@pytest.mark.parametrize("mu", [-1.0, 0.0, 1.0, 2.0])
@pytest.mark.parametrize("s2", [0.1, 0.25, 0.5])
def test_phi_tilde_close_to_quadrature(mu, s2):
    assert phi_tilde(mu, s2) == pytest.approx(_phi_quadrature(mu, s2), rel=0.01)


def test_phi_tilde_error_over_the_full_grid():
    mus = (-2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0)
    variances = (0.1, 0.5, 1.0, 2.0, 3.0)
    errors = np.array([[abs(phi_tilde(mu, s2) / _phi_quadrature(mu, s2) - 1.0) for s2 in variances]
                       for mu in mus])
    # 1% holds for small variances only; the worst point (mu = -2, sigma^2 = 3) is off by about 3.4%
    assert errors[:, :2].max() <= 0.01
    assert errors.max() <= 0.04
    assert errors[:, -1].max() > errors[:, 0].max()


def test_log_phi_tilde_gradient_matches_finite_differences():
    mu = np.array([-1.5, 0.0, 0.7, 3.0])
    s2 = np.array([0.2, 1.0, 0.5, 2.5])
    h = 1e-6
    d_mu, d_s = log_phi_tilde_grad(mu, s2)
    fd_mu = (log_phi_tilde(mu + h, s2) - log_phi_tilde(mu - h, s2)) / (2 * h)
    fd_s = (log_phi_tilde(mu, s2 + h) - log_phi_tilde(mu, s2 - h)) / (2 * h)
    np.testing.assert_allclose(d_mu, fd_mu, rtol=1e-6)
    np.testing.assert_allclose(d_s, fd_s, rtol=1e-6)


@pytest.mark.slow
def test_phi_tilde_against_monte_carlo():
    # GIVEN 10^7 log-normal draws at mu = 0, sigma^2 = 0.5
    rng = np.random.default_rng(7)
    draws = np.exp(-np.exp(rng.normal(0.0, np.sqrt(0.5), size=10_000_000)))
    mc, se = draws.mean(), draws.std(ddof=1) / np.sqrt(draws.size)
    # THEN the approximation lies within 1% + 3 standard errors
    assert abs(phi_tilde(0.0, 0.5) - mc) <= 0.01 * mc + 3 * se
