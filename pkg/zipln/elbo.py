"""Evidence lower bounds of the ZIPLN model and their gradients.

Two variational families are supported:

* Standard: q(Z_ij, W_ij) = N(M_ij, S_ij^2) x Bernoulli(P_ij), fully factorized.
* Enhanced: W_ij ~ Bernoulli(P_ij) and Z_ij | W_ij = 1 ~ N(x_i^T B_j, Sigma_jj),
  Z_ij | W_ij = 0 ~ N(M_ij, S_ij^2).

Either family can run with P free or with P tied to the analytic posterior
Psi(theta) of the inflation indicators. Every term is a sum over rows except
(n/2) log det Omega, which is treated as n copies of a per-row term so that a
subset of rows yields the matching share of the bound.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, xlogy

from .errors import MaskViolationError
from .model import CountDataset, ModelParams, VariationalParams, ZIVariant
from .special import log_phi_tilde, log_phi_tilde_grad
from .utils import P_CLAMP, clamped_logit

LOG_2PI_E = np.log(2.0 * np.pi * np.e)


class ElboFamily(str, Enum):
    STANDARD = "standard"
    ENHANCED = "enhanced"


@dataclass(frozen=True)
class ElboVariant:
    family: ElboFamily = ElboFamily.STANDARD
    analytic_p: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", ElboFamily(self.family))

    @property
    def enhanced(self) -> bool:
        return self.family == ElboFamily.ENHANCED

    @property
    def name(self) -> str:
        base = "Enhanced" if self.enhanced else "Standard"
        return base + ("Analytic" if self.analytic_p else "")

    @classmethod
    def from_name(cls, name: str) -> "ElboVariant":
        key = name.lower()
        analytic = key.endswith("analytic")
        family = key[: -len("analytic")] if analytic else key
        return cls(ElboFamily(family), analytic)


STANDARD = ElboVariant(ElboFamily.STANDARD, False)
ENHANCED = ElboVariant(ElboFamily.ENHANCED, False)
STANDARD_ANALYTIC = ElboVariant(ElboFamily.STANDARD, True)
ENHANCED_ANALYTIC = ElboVariant(ElboFamily.ENHANCED, True)
ALL_VARIANTS = (STANDARD, ENHANCED, STANDARD_ANALYTIC, ENHANCED_ANALYTIC)


@dataclass
class ElboGradient:
    dOmega: np.ndarray
    dC: np.ndarray
    dB: np.ndarray
    dZI: Optional[np.ndarray]
    dM: np.ndarray
    dS: np.ndarray
    dP: Optional[np.ndarray]

    def blocks(self):
        out = {"Omega": self.dOmega, "C": self.dC, "B": self.dB, "M": self.dM, "S": self.dS}
        if self.dZI is not None:
            out["ZI"] = self.dZI
        if self.dP is not None:
            out["P"] = self.dP
        return out

    def scaled(self, factor: float) -> "ElboGradient":
        return ElboGradient(**{
            k: None if v is None else factor * v for k, v in vars(self).items()
        })


def bernoulli_entropy(P: np.ndarray) -> float:
    """-sum(P log P + Q log Q) with 0 log 0 = 0.

    Each log is clamped from below only, so entries at exactly 0 or 1 add nothing.
    """
    Q = 1.0 - P
    return float(-np.sum(xlogy(P, np.clip(P, P_CLAMP, 1.0)) + xlogy(Q, np.clip(Q, P_CLAMP, 1.0))))


def inflation_posterior(mu0, log_phi):
    """P(W = 1 | Y = 0) = pi / (phi (1 - pi) + pi), on the logit scale."""
    return expit(mu0 - log_phi)


def psi_analytic(data: CountDataset, theta: ModelParams) -> np.ndarray:
    if theta.zi_variant == ZIVariant.NONE:
        return np.zeros((data.n, data.p))
    log_phi = log_phi_tilde(data.O + theta.mean_field(data.design), theta.sigma_diag[None, :])
    return inflation_posterior(theta.mu0(data.design), log_phi) * data.zero_mask


def _resolve_P(variant: ElboVariant, data: CountDataset, theta: ModelParams,
               psi: VariationalParams) -> np.ndarray:
    if theta.zi_variant == ZIVariant.NONE:
        return np.zeros_like(psi.P)
    if variant.analytic_p:
        return psi_analytic(data, theta)
    leaked = (psi.P != 0) & ~data.zero_mask
    if np.any(leaked):
        i, j = np.argwhere(leaked)[0]
        raise MaskViolationError(
            f"P[{i}, {j}] = {psi.P[i, j]:.3g} on the positive count Y = {data.Y[i, j]}; "
            "P must vanish wherever a count is positive"
        )
    return psi.P


def _zero_terms(theta: ModelParams, data: CountDataset, P: np.ndarray) -> float:
    """E[log p(W)] + H(P); both vanish for a plain PLN model."""
    if theta.zi_variant == ZIVariant.NONE:
        return 0.0
    mu0 = theta.mu0(data.design)
    return float(np.sum(P * mu0 + log_expit(-mu0))) + bernoulli_entropy(P)


def elbo(variant: ElboVariant, data: CountDataset, theta: ModelParams,
         psi: VariationalParams) -> float:
    P = _resolve_P(variant, data, theta, psi)
    Q = 1.0 - P
    n, p = data.n, data.p
    S2 = psi.S**2
    A = np.exp(data.O + psi.M + 0.5 * S2)
    R = psi.M - theta.mean_field(data.design)
    omega = theta.omega
    w_diag = np.diag(omega)

    value = float(np.sum(Q * (data.Y * (data.O + psi.M) - A - data.log_factorial)))
    value += _zero_terms(theta, data, P)
    value += 0.5 * n * theta.logdet_omega + 0.5 * n * p
    if variant.enhanced:
        sdiag = theta.sigma_diag
        V = Q * R
        quad = np.sum((V @ omega) * V)
        quad += np.sum(w_diag * (P * sdiag + Q * S2 + P * Q * R**2))
        value += float(np.sum(Q * np.log(psi.S)) + 0.5 * np.sum(P * np.log(sdiag)))
    else:
        quad = np.sum((R @ omega) * R) + np.sum(w_diag * S2)
        value += float(np.sum(np.log(psi.S)))
    return value - 0.5 * float(quad)


def entropy(variant: ElboVariant, theta: ModelParams, psi: VariationalParams) -> float:
    """Entropy of the variational distribution of (Z, W)."""
    n, p = psi.M.shape
    P = psi.P
    value = 0.5 * n * p * LOG_2PI_E + bernoulli_entropy(P)
    if variant.enhanced:
        value += float(np.sum((1.0 - P) * np.log(psi.S)) + 0.5 * np.sum(P * np.log(theta.sigma_diag)))
    else:
        value += float(np.sum(np.log(psi.S)))
    return value


def _zi_gradient(theta: ModelParams, data: CountDataset, g_mu0: np.ndarray) -> np.ndarray:
    if theta.zi_variant == ZIVariant.ND:
        return np.array([g_mu0.sum()])
    if theta.zi_variant == ZIVariant.CD:
        return data.X0.T @ g_mu0
    return g_mu0 @ data.X0bar.T


def elbo_gradient(variant: ElboVariant, data: CountDataset, theta: ModelParams,
                  psi: VariationalParams) -> ElboGradient:
    """Exact gradient of `elbo` with respect to every free parameter.

    dOmega treats Sigma as Omega^{-1}; dC is the same gradient pulled back
    through Sigma = C C^T. With analytic P the chain rule through Psi(theta)
    is included. dP is None whenever P is not a free parameter (analytic P,
    or no inflation).
    """
    inflated = theta.zi_variant != ZIVariant.NONE
    P = _resolve_P(variant, data, theta, psi)
    Q = 1.0 - P
    n = data.n
    S = psi.S
    S2 = S**2
    A = np.exp(data.O + psi.M + 0.5 * S2)
    R = psi.M - theta.mean_field(data.design)
    omega, sigma = theta.omega, theta.sigma
    w_diag = np.diag(omega)
    sdiag = theta.sigma_diag
    mu0 = theta.mu0(data.design) if inflated else None
    L = data.Y * (data.O + psi.M) - A - data.log_factorial

    if variant.enhanced:
        V = Q * R
        VO = V @ omega
        dM = Q * (data.Y - A) - Q * VO - w_diag * P * Q * R
        dS = Q / S - Q * S * A - w_diag * Q * S
        gR = -Q * VO - w_diag * P * Q * R
        g_omega = 0.5 * n * sigma - 0.5 * (V.T @ V)
        g_omega -= 0.5 * np.diag(np.sum(P * sdiag + Q * S2 + P * Q * R**2, axis=0))
        g_sdiag = 0.5 * np.sum(P, axis=0) / sdiag - 0.5 * w_diag * np.sum(P, axis=0)
        gP = (-L - np.log(S) + 0.5 * np.log(sdiag) + VO * R
              - 0.5 * w_diag * (sdiag - S2 + (1.0 - 2.0 * P) * R**2))
    else:
        RO = R @ omega
        dM = Q * (data.Y - A) - RO
        dS = 1.0 / S - Q * S * A - S * w_diag
        gR = -RO
        g_omega = 0.5 * n * sigma - 0.5 * (R.T @ R + np.diag(np.sum(S2, axis=0)))
        g_sdiag = np.zeros(data.p)
        gP = -L

    dB = -data.X.T @ gR
    dZI = None
    dP = None
    if inflated:
        gP = (gP + mu0 - clamped_logit(P)) * data.zero_mask
        g_mu0 = P - expit(mu0)
        if variant.analytic_p:
            kappa = gP * P * (1.0 - P)
            g_mu0 = g_mu0 + kappa
            m = data.O + theta.mean_field(data.design)
            dlog_mu, dlog_s = log_phi_tilde_grad(m, sdiag[None, :])
            dB = dB - data.X.T @ (kappa * dlog_mu)
            g_sdiag = g_sdiag - np.sum(kappa * dlog_s, axis=0)
        else:
            dP = gP
        dZI = _zi_gradient(theta, data, g_mu0)

    # Omega and Sigma = Omega^{-1} both enter; H is the total derivative in Sigma.
    H = np.diag(g_sdiag) - omega @ g_omega @ omega
    H = 0.5 * (H + H.T)
    dOmega = g_omega - sigma @ np.diag(g_sdiag) @ sigma
    dC = 2.0 * H @ theta.C
    return ElboGradient(dOmega=0.5 * (dOmega + dOmega.T), dC=dC, dB=dB, dZI=dZI,
                        dM=dM, dS=dS, dP=dP)
