"""Lambert W on the nonnegative axis and the log-normal Laplace transform approximation."""

from typing import Tuple

import numpy as np

from .errors import ParameterError

LAMBERT_MAX_ITER = 50
LAMBERT_TOL = 1e-14


def lambert_w(z):
    """Principal branch of W on z >= 0, so that w * exp(w) = z.

    Halley's method started from log(1 + z). The residual is carried as
    w - z * exp(-w), which never overflows for large z.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0) or np.any(np.isnan(z)):
        raise ParameterError("lambert_w is only defined here for z >= 0")
    w = np.log1p(z)
    for _ in range(LAMBERT_MAX_ITER):
        r = w - z * np.exp(-w)
        w1 = w + 1.0
        dw = r / (w1 - (w + 2.0) * r / (2.0 * w1))
        w = w - dw
        if np.all(np.abs(dw) <= LAMBERT_TOL * (1.0 + np.abs(w))):
            break
    return w


def _lambert_arg(mu, sigma2):
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ParameterError("sigma2 must be positive")
    return mu, sigma2, lambert_w(np.exp(np.log(sigma2) + mu))


def log_phi_tilde(mu, sigma2):
    mu, sigma2, w = _lambert_arg(mu, sigma2)
    return -(w * w + 2.0 * w) / (2.0 * sigma2) - 0.5 * np.log1p(w)


def phi_tilde(mu, sigma2):
    """Approximation of E[exp(-X)] for X ~ LogNormal(mu, sigma2)."""
    return np.exp(log_phi_tilde(mu, sigma2))


def log_phi_tilde_grad(mu, sigma2) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of log phi_tilde with respect to mu and sigma2.

    Uses dW/dz = W / (z (1 + W)) with z = sigma2 * exp(mu), written so that
    z never appears in a denominator.
    """
    mu, s, w = _lambert_arg(mu, sigma2)
    w1 = 1.0 + w
    d_mu = -w / s - w / (2.0 * w1**2)
    d_s = w * w / (2.0 * s * s) - w / (2.0 * s * w1**2)
    return d_mu, d_s
