"""Domain types and the ZIPLN generative side.

A ZIPLN observation is either a structural zero (W_ij = 1) or a Poisson count
whose log-rate o_ij + Z_ij is a row of a multivariate Gaussian with mean x_i^T B
and covariance Sigma = Omega^{-1}. This module holds the data containers, the
parameter containers, the sampler, the closed-form moments, the moment
inversion used as an identifiability oracle, and the simulation scenarios.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import gammaln, logit

from .errors import (
    ConfigurationError,
    DataError,
    DegenerateMomentsError,
    IdentifiabilityError,
    ParameterError,
)
from .utils import make_rng, sigmoid

logger = logging.getLogger(__name__)

# Largest Poisson rate the sampler accepts.
POISSON_RATE_LIMIT = 1e9
SPD_TOL = 1e-8


class ZIVariant(str, Enum):
    NONE = "none"  # plain PLN, no inflation
    ND = "nd"  # one global probability
    CD = "cd"  # row-wise covariates X0 (n x d0), coefficients B0 (d0 x p)
    RD = "rd"  # column-wise covariates X0bar (d0 x p), coefficients B0bar (n x d0)


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def _full_rank(mat: np.ndarray) -> bool:
    return np.linalg.matrix_rank(mat) == min(mat.shape)


@dataclass(frozen=True)
class Design:
    """Everything about a dataset except the counts."""

    X: np.ndarray
    O: np.ndarray
    X0: Optional[np.ndarray] = None
    X0bar: Optional[np.ndarray] = None

    def __post_init__(self):
        X = _as_matrix(self.X, "X")
        O = _as_matrix(self.O, "O")
        if X.shape[0] != O.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but O has {O.shape[0]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "O", O)
        if self.X0 is not None and self.X0bar is not None:
            raise DataError("give either row-wise X0 or column-wise X0bar, not both")
        if self.X0 is not None:
            X0 = _as_matrix(self.X0, "X0")
            if X0.shape[0] != X.shape[0]:
                raise DataError(f"X0 has {X0.shape[0]} rows, expected {X.shape[0]}")
            object.__setattr__(self, "X0", X0)
        if self.X0bar is not None:
            X0bar = _as_matrix(self.X0bar, "X0bar")
            if X0bar.shape[1] != O.shape[1]:
                raise DataError(f"X0bar has {X0bar.shape[1]} columns, expected {O.shape[1]}")
            object.__setattr__(self, "X0bar", X0bar)

    @classmethod
    def build(cls, n: int, p: int, X=None, O=None, X0=None, X0bar=None) -> "Design":
        X = np.ones((n, 1)) if X is None else X
        O = np.zeros((n, p)) if O is None else O
        return cls(X=X, O=O, X0=X0, X0bar=X0bar)

    @property
    def n(self) -> int:
        return self.O.shape[0]

    @property
    def p(self) -> int:
        return self.O.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def d0(self) -> int:
        if self.X0 is not None:
            return self.X0.shape[1]
        if self.X0bar is not None:
            return self.X0bar.shape[0]
        return 0

    def require_full_rank(self):
        if not _full_rank(self.X) or self.X.shape[0] < self.X.shape[1]:
            raise IdentifiabilityError(
                f"X ({self.n} x {self.d}) is not full column rank: B is not identifiable; "
                "identifiability requires full-rank covariate matrices in both components"
            )
        if self.X0 is not None and (not _full_rank(self.X0) or self.n < self.X0.shape[1]):
            raise IdentifiabilityError(
                f"X0 ({self.n} x {self.d0}) is not full column rank: B0 is not identifiable"
            )
        if self.X0bar is not None and (not _full_rank(self.X0bar) or self.p < self.X0bar.shape[0]):
            raise IdentifiabilityError(
                f"X0bar ({self.d0} x {self.p}) is not full row rank: B0bar is not identifiable"
            )

    def take_rows(self, rows: np.ndarray) -> "Design":
        return Design(
            X=self.X[rows],
            O=self.O[rows],
            X0=None if self.X0 is None else self.X0[rows],
            X0bar=self.X0bar,
        )


@dataclass(frozen=True)
class CountDataset:
    Y: np.ndarray
    design: Design

    def __post_init__(self):
        Y = np.asarray(self.Y)
        if Y.ndim != 2:
            raise DataError(f"counts must be an n x p matrix, got shape {Y.shape}")
        if Y.shape != self.design.O.shape:
            raise DataError(f"counts have shape {Y.shape} but offsets {self.design.O.shape}")
        if not np.issubdtype(Y.dtype, np.integer):
            if not np.all(np.isfinite(Y)) or np.any(np.floor(Y) != Y):
                raise DataError("counts must be integers")
            Y = Y.astype(np.int64)
        if np.any(Y < 0):
            raise DataError("counts must be nonnegative")
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_arrays(cls, Y, X=None, O=None, X0=None, X0bar=None) -> "CountDataset":
        Y = np.asarray(Y)
        if Y.ndim != 2:
            raise DataError(f"counts must be an n x p matrix, got shape {Y.shape}")
        return cls(Y=Y, design=Design.build(Y.shape[0], Y.shape[1], X=X, O=O, X0=X0, X0bar=X0bar))

    X = property(lambda self: self.design.X)
    O = property(lambda self: self.design.O)
    X0 = property(lambda self: self.design.X0)
    X0bar = property(lambda self: self.design.X0bar)
    n = property(lambda self: self.design.n)
    p = property(lambda self: self.design.p)
    d = property(lambda self: self.design.d)
    d0 = property(lambda self: self.design.d0)

    @cached_property
    def log_factorial(self) -> np.ndarray:
        return gammaln(self.Y + 1.0)

    @cached_property
    def zero_mask(self) -> np.ndarray:
        return self.Y == 0

    def take_rows(self, rows) -> "CountDataset":
        rows = np.asarray(rows)
        return CountDataset(Y=self.Y[rows], design=self.design.take_rows(rows))

    def with_counts(self, Y) -> "CountDataset":
        return CountDataset(Y=np.asarray(Y), design=self.design)


@dataclass(frozen=True)
class ZIConfig:
    variant: ZIVariant = ZIVariant.ND
    pln_intercept: bool = False
    zi_intercept: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", ZIVariant(self.variant))

    def validate(self, design: Design):
        if self.variant == ZIVariant.CD and design.X0 is None:
            raise ConfigurationError("the CD variant needs row-wise ZI covariates X0")
        if self.variant == ZIVariant.RD and design.X0bar is None:
            raise ConfigurationError("the RD variant needs column-wise ZI covariates X0bar")

    def prepare_design(self, design: Design) -> Design:
        """Design as the model sees it: intercepts added, unused ZI covariates dropped."""
        self.validate(design)
        X = design.X
        if self.pln_intercept:
            X = np.hstack([np.ones((design.n, 1)), X])
        X0 = X0bar = None
        if self.variant == ZIVariant.CD:
            X0 = design.X0
            if self.zi_intercept:
                X0 = np.hstack([np.ones((design.n, 1)), X0])
        elif self.variant == ZIVariant.RD:
            X0bar = design.X0bar
            if self.zi_intercept:
                X0bar = np.vstack([np.ones((1, design.p)), X0bar])
        return Design(X=X, O=design.O, X0=X0, X0bar=X0bar)

    def prepare(self, data: CountDataset) -> CountDataset:
        return CountDataset(Y=data.Y, design=self.prepare_design(data.design))


def zi_shape(variant: ZIVariant, design: Design) -> Optional[Tuple[int, ...]]:
    variant = ZIVariant(variant)
    if variant == ZIVariant.ND:
        return (1,)
    if variant == ZIVariant.CD:
        return (design.d0, design.p)
    if variant == ZIVariant.RD:
        return (design.n, design.d0)
    return None


@dataclass(frozen=True)
class ModelParams:
    """theta = (Omega, B, ZI coefficients) plus the factor C with Sigma = C C^T.

    The ZI parameter is stored on the logit scale: for ND, `zi` holds logit(pi)
    as a length-1 array; for CD it is B0 (d0 x p); for RD it is B0bar (n x d0);
    for NONE it is None.
    """

    omega: np.ndarray
    sigma: np.ndarray
    C: np.ndarray
    B: np.ndarray
    zi_variant: ZIVariant = ZIVariant.ND
    zi: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "zi_variant", ZIVariant(self.zi_variant))
        p = self.omega.shape[0]
        if self.omega.shape != (p, p) or self.sigma.shape != (p, p) or self.C.shape != (p, p):
            raise ParameterError("Omega, Sigma and C must be square matrices of the same size")
        if self.B.ndim != 2 or self.B.shape[1] != p:
            raise ParameterError(f"B must be d x {p}, got shape {self.B.shape}")
        if self.zi_variant == ZIVariant.NONE:
            object.__setattr__(self, "zi", None)
        elif self.zi is None:
            raise ParameterError(f"the {self.zi_variant.value} variant needs a ZI parameter")
        else:
            object.__setattr__(self, "zi", np.asarray(self.zi, dtype=float))
            if self.zi_variant == ZIVariant.ND and self.zi.shape != (1,):
                raise ParameterError("ND expects a single inflation probability")
            if self.zi_variant == ZIVariant.CD and self.zi.shape[1:] != (p,):
                raise ParameterError(f"B0 must be d0 x {p}, got shape {self.zi.shape}")

    @classmethod
    def from_omega(cls, omega, B, zi_variant=ZIVariant.ND, zi=None) -> "ModelParams":
        omega = np.asarray(omega, dtype=float)
        omega = np.atleast_2d(omega)
        if not np.allclose(omega, omega.T, rtol=0, atol=SPD_TOL * max(1.0, np.abs(omega).max())):
            raise ParameterError("Omega must be symmetric")
        omega = 0.5 * (omega + omega.T)
        try:
            chol = linalg.cho_factor(omega, lower=True)
        except linalg.LinAlgError:
            raise ParameterError("Omega must be positive definite")
        sigma = linalg.cho_solve(chol, np.eye(omega.shape[0]))
        sigma = 0.5 * (sigma + sigma.T)
        C = np.linalg.cholesky(sigma)
        return cls(omega=omega, sigma=sigma, C=C, B=np.atleast_2d(np.asarray(B, dtype=float)),
                   zi_variant=zi_variant, zi=zi)

    @classmethod
    def from_sigma(cls, sigma, B, zi_variant=ZIVariant.ND, zi=None) -> "ModelParams":
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        try:
            C = np.linalg.cholesky(0.5 * (sigma + sigma.T))
        except np.linalg.LinAlgError:
            raise ParameterError("Sigma must be positive definite")
        return cls.from_factor(C, B, zi_variant, zi)

    @classmethod
    def from_factor(cls, C, B, zi_variant=ZIVariant.ND, zi=None) -> "ModelParams":
        """Omega = (C C^T)^{-1}; any invertible C gives an SPD Omega."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        sigma = C @ C.T
        sign, logabsdet = np.linalg.slogdet(C)
        if sign == 0 or not np.isfinite(logabsdet):
            raise ParameterError("factor C is singular")
        try:
            c_inv = linalg.solve(C, np.eye(C.shape[0]))
        except linalg.LinAlgError:
            raise ParameterError("factor C is singular")
        omega = c_inv.T @ c_inv
        return cls(omega=0.5 * (omega + omega.T), sigma=0.5 * (sigma + sigma.T), C=C,
                   B=np.atleast_2d(np.asarray(B, dtype=float)), zi_variant=zi_variant, zi=zi)

    @property
    def p(self) -> int:
        return self.omega.shape[0]

    @property
    def sigma_diag(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.C, self.C)

    @property
    def logdet_omega(self) -> float:
        return -2.0 * np.linalg.slogdet(self.C)[1]

    @property
    def pi(self) -> float:
        """Global inflation probability (ND only)."""
        if self.zi_variant != ZIVariant.ND:
            raise ParameterError("a single pi only exists for the ND variant")
        return float(sigmoid(self.zi[0]))

    def mu0(self, design: Design) -> np.ndarray:
        """Logit-scale inflation field, n x p."""
        if self.zi_variant == ZIVariant.ND:
            return np.full((design.n, design.p), self.zi[0])
        if self.zi_variant == ZIVariant.CD:
            return design.X0 @ self.zi
        if self.zi_variant == ZIVariant.RD:
            return self.zi @ design.X0bar
        raise ParameterError("a plain PLN model has no inflation field")

    def pi_matrix(self, design: Design) -> np.ndarray:
        if self.zi_variant == ZIVariant.NONE:
            return np.zeros((design.n, design.p))
        return sigmoid(self.mu0(design))

    def mean_field(self, design: Design) -> np.ndarray:
        return design.X @ self.B

    def check(self):
        if not np.all(np.linalg.eigvalsh(self.omega) > 0):
            raise ParameterError("Omega is not positive definite")
        if not np.allclose(self.sigma @ self.omega, np.eye(self.p), atol=SPD_TOL * max(1.0, np.abs(self.sigma).max())):
            raise ParameterError("cached Sigma is not the inverse of Omega")

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)


def zi_from_pi(pi: float) -> np.ndarray:
    if not 0.0 <= pi <= 1.0:
        raise ParameterError(f"pi must lie in [0, 1], got {pi}")
    with np.errstate(divide="ignore"):
        return np.array([logit(pi)])


@dataclass(frozen=True)
class VariationalParams:
    """psi = (M, S, P); S holds standard deviations."""

    M: np.ndarray
    S: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        if not (self.M.shape == self.S.shape == self.P.shape):
            raise ParameterError("M, S and P must share one shape")
        if np.any(self.S <= 0):
            raise ParameterError("variational standard deviations must be positive")
        if np.any(self.P < 0) or np.any(self.P > 1):
            raise ParameterError("variational probabilities must lie in [0, 1]")

    @property
    def Q(self) -> np.ndarray:
        return 1.0 - self.P

    def A(self, design: Design) -> np.ndarray:
        return np.exp(design.O + self.M + 0.5 * self.S**2)

    def take_rows(self, rows) -> "VariationalParams":
        return VariationalParams(M=self.M[rows], S=self.S[rows], P=self.P[rows])

    def replace(self, **changes) -> "VariationalParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class LatentTruth:
    Z: np.ndarray
    W: np.ndarray
    T: np.ndarray


def sample_dataset(params: ModelParams, design: Design, seed) -> Tuple[CountDataset, LatentTruth]:
    """Draw Y from the ZIPLN model; returns the counts and the hidden layers."""
    design.require_full_rank()
    params.check()
    rng = make_rng(seed)
    n, p = design.n, design.p
    chol = np.linalg.cholesky(params.sigma)
    Z = params.mean_field(design) + rng.standard_normal((n, p)) @ chol.T
    W = (rng.random((n, p)) < params.pi_matrix(design)).astype(np.int64)
    log_rate = design.O + Z
    if np.max(log_rate) > np.log(POISSON_RATE_LIMIT):
        raise ParameterError(
            f"Poisson rate exp({np.max(log_rate):.3g}) exceeds the sampler limit {POISSON_RATE_LIMIT:.0e}"
        )
    T = rng.poisson(np.exp(log_rate)).astype(np.int64)
    Y = (1 - W) * T
    return CountDataset(Y=Y, design=design), LatentTruth(Z=Z, W=W, T=T)


def zipln_mean_var(params: ModelParams, design: Design) -> Tuple[np.ndarray, np.ndarray]:
    pi = params.pi_matrix(design)
    sdiag = params.sigma_diag
    A = np.exp(design.O + params.mean_field(design) + 0.5 * sdiag)
    mean = (1.0 - pi) * A
    var = mean + (1.0 - pi) * A**2 * (np.exp(sdiag) - (1.0 - pi))
    return mean, var


def population_moments(mu, sigma, pi):
    """First three raw moments and covariance of the covariate-free ZIPLN model.

    mu: p-vector of latent means, sigma: p x p latent covariance, pi: p-vector.
    Returns (m1, m2, m3, cov) with cov the full p x p covariance of Y.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    keep = 1.0 - np.asarray(pi, dtype=float)
    sdiag = np.diag(sigma)
    A = np.exp(mu + 0.5 * sdiag)
    e_s = np.exp(sdiag)
    m1 = keep * A
    m2 = keep * A * (1.0 + A * e_s)
    m3 = keep * A * (1.0 + 3.0 * A * e_s + A**2 * e_s**3)
    cov = np.outer(m1, m1) * np.expm1(sigma)
    np.fill_diagonal(cov, m2 - m1**2)
    return m1, m2, m3, cov


@dataclass(frozen=True)
class MomentEstimate:
    mu: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray


def moment_recover(m1, m2, m3, cov) -> MomentEstimate:
    """Invert the first three moments and the covariance back to (mu, Sigma, pi)."""
    m1, m2, m3 = (np.atleast_1d(np.asarray(m, dtype=float)) for m in (m1, m2, m3))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d2 = m2 - m1
    d3 = m3 - 3.0 * m2 + 2.0 * m1
    if np.any(m1 <= 0) or np.any(d2 <= 0) or np.any(d3 <= 0):
        bad = np.flatnonzero((m1 <= 0) | (d2 <= 0) | (d3 <= 0))
        raise DegenerateMomentsError(
            f"non-positive moment combination in columns {bad.tolist()}: "
            "inflation close to 1 or no over-dispersion"
        )
    e_sjj = np.maximum(d3 * m1 / d2**2, 1.0 + 1e-12)
    # A e^{sigma} = d2 / m1 and e^{mu} = A e^{sigma} e^{-3 sigma / 2}
    log_e_mu = np.log(d2 / m1) - 1.5 * np.log(e_sjj)
    pi = 1.0 - m1**3 * d3 / d2**3
    sigma = np.log1p(cov / np.outer(m1, m1))
    np.fill_diagonal(sigma, np.log(e_sjj))
    return MomentEstimate(mu=log_e_mu, sigma=sigma, pi=pi)


def sample_moments(Y: np.ndarray):
    Y = np.asarray(Y, dtype=float)
    return Y.mean(axis=0), (Y**2).mean(axis=0), (Y**3).mean(axis=0), np.cov(Y, rowvar=False)


def toeplitz_cov(p: int, alpha: float) -> np.ndarray:
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if p < 1:
        raise ParameterError("p must be positive")
    return linalg.toeplitz(alpha ** np.arange(p))


def _one_hot(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return np.eye(k)[rng.integers(k, size=n)]


@dataclass(frozen=True)
class Scenario:
    params: ModelParams
    design: Design
    alpha: float = field(default=float("nan"))


def scenario_params(config: ZIConfig, n: int, p: int, d: int, d0: int, gamma: float, rho: float,
                    seed) -> Scenario:
    """Random ground truth following the simulation protocol (no intercepts, O = 0)."""
    if min(n, p, d) < 1:
        raise ParameterError("n, p and d must be positive")
    variant = ZIVariant(config.variant)
    if variant == ZIVariant.ND and not 0.0 <= rho <= 1.0:
        raise ParameterError(f"pi must lie in [0, 1], got {rho}")
    if variant in (ZIVariant.CD, ZIVariant.RD) and not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must lie in (0, 1), got {rho}")
    if variant in (ZIVariant.CD, ZIVariant.RD) and d0 < 1:
        raise ParameterError("d0 must be positive for covariate-driven inflation")
    rng = make_rng(seed)
    alpha = float(rng.uniform(0.7, 0.9))
    sigma = toeplitz_cov(p, alpha)
    X = _one_hot(rng, n, d)
    B = rng.normal(gamma, 1.0, size=(d, p))
    X0 = X0bar = zi = None
    if variant == ZIVariant.ND:
        zi = zi_from_pi(rho)
    elif variant == ZIVariant.CD:
        X0 = _one_hot(rng, n, d0)
        zi = rng.normal(logit(rho), 1.0, size=(d0, p))
    elif variant == ZIVariant.RD:
        zi = _one_hot(rng, n, d0)
        X0bar = rng.normal(logit(rho), 1.0, size=(d0, p))
    design = Design(X=X, O=np.zeros((n, p)), X0=X0, X0bar=X0bar)
    params = ModelParams.from_sigma(sigma, B, variant, zi)
    return Scenario(params=params, design=design, alpha=alpha)
