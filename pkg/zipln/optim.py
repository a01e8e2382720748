"""Fitting ZIPLN models.

Two drivers share one initialization:

* `vem_fit` alternates closed-form M-step updates (B, Omega, ZI coefficients)
  with a VE-step (closed-form P, then a few safeguarded Newton-diagonal steps on
  M and log S). Standard family with free P only; the ELBO never decreases.
* `gradient_fit` takes joint ascent steps on every free parameter with
  Omega = (C C^T)^{-1}, per-coordinate adaptive step sizes and step halving.
  Works for every ELBO variant and optionally on minibatches of rows.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .config import Settings
from .elbo import STANDARD, ElboGradient, ElboVariant, elbo, elbo_gradient, psi_analytic
from .errors import (
    ConfigurationError,
    DivergenceError,
    IdentifiabilityError,
    InternalError,
    ParameterError,
    StalledAscentError,
)
from .model import CountDataset, Design, ModelParams, VariationalParams, ZIConfig, ZIVariant, zi_shape
from .utils import clamped_logit, make_rng

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-8
SAFEGUARD_TOL = 1e-6
MAX_HALVINGS = 20
LOGIT_P_BOUND = 16.1  # expit(16.1) ~ 1 - 1e-7
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100


class FitMethod(str, Enum):
    VEM = "vem"
    GRADIENT = "grad"


@dataclass(frozen=True)
class FitConfig:
    method: FitMethod = FitMethod.VEM
    elbo_variant: ElboVariant = STANDARD
    zi: ZIConfig = field(default_factory=ZIConfig)
    max_iters: int = Settings.MAX_ITERS
    rel_tol: float = Settings.TOL
    window: int = Settings.WINDOW
    learning_rate: float = Settings.LEARNING_RATE
    # Moving-average factor of the squared gradients.
    decay: float = 0.9
    inner_steps: int = Settings.INNER_STEPS
    minibatch_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", FitMethod(self.method))

    def validate(self, n: Optional[int] = None):
        if self.method == FitMethod.VEM and self.elbo_variant != STANDARD:
            raise ConfigurationError(
                f"VEM only applies to the Standard ELBO with free P, not {self.elbo_variant.name}"
            )
        if not self.rel_tol > 0:
            raise ConfigurationError("rel_tol must be positive")
        if self.max_iters < 1 or self.window < 1 or self.inner_steps < 1:
            raise ConfigurationError("max_iters, window and inner_steps must be positive")
        if not self.learning_rate > 0 or not 0.0 <= self.decay < 1.0:
            raise ConfigurationError("learning_rate must be positive and decay in [0, 1)")
        if self.minibatch_size is not None:
            if self.minibatch_size < 1 or (n is not None and self.minibatch_size > n):
                raise ConfigurationError(f"minibatch_size must lie in [1, n], got {self.minibatch_size}")
            if self.method == FitMethod.VEM:
                raise ConfigurationError("minibatches are only available for gradient ascent")


@dataclass
class FitResult:
    theta: ModelParams
    psi: VariationalParams
    elbo_trace: List[float]
    n_iters: int
    converged: bool
    wall_time: float
    variant: ElboVariant
    zi: ZIConfig
    method: FitMethod
    design: Design

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]


def init_params(data: CountDataset, config: FitConfig) -> Tuple[ModelParams, VariationalParams]:
    data.design.require_full_rank()
    variant = config.zi.variant
    M = np.log1p(data.Y) - data.O
    S = np.ones_like(M)
    if variant == ZIVariant.NONE:
        P = np.zeros_like(M)
    else:
        P = 0.5 * data.zero_mask
    B = np.linalg.lstsq(data.X, M, rcond=None)[0]
    zi = None
    if variant == ZIVariant.ND:
        zi = np.zeros(1)
    elif variant in (ZIVariant.CD, ZIVariant.RD):
        zi = np.zeros(zi_shape(variant, data.design))
    theta = ModelParams.from_factor(np.eye(data.p), B, variant, zi)
    return theta, VariationalParams(M=M, S=S, P=P)


def update_B(data: CountDataset, psi: VariationalParams) -> np.ndarray:
    try:
        gram = linalg.cho_factor(data.X.T @ data.X, lower=True)
    except linalg.LinAlgError:
        raise IdentifiabilityError("X^T X is singular: the PLN covariates are not full rank")
    return linalg.cho_solve(gram, data.X.T @ psi.M)


def _sigma_update(data: CountDataset, B: np.ndarray, psi: VariationalParams) -> Tuple[np.ndarray, bool]:
    """Sigma = [g(M - XB) + Diag(1^T S^2)] / n, ridged when it is near singular."""
    R = psi.M - data.X @ B
    K = R.T @ R + np.diag(np.sum(psi.S**2, axis=0))
    K = 0.5 * (K + K.T)
    jitter = data.n < data.p
    if not jitter:
        try:
            linalg.cho_factor(K, lower=True)
        except linalg.LinAlgError:
            jitter = True
    if jitter:
        ridge = 1e-5 * np.trace(K) / data.p
        logger.warning(f"Omega update is ill-conditioned (n={data.n}, p={data.p}); adding ridge {ridge:.3g}")
        K = K + ridge * np.eye(data.p)
    return K / data.n, jitter


def update_Omega(data: CountDataset, theta: ModelParams, psi: VariationalParams) -> np.ndarray:
    sigma, _ = _sigma_update(data, theta.B, psi)
    omega = linalg.cho_solve(linalg.cho_factor(sigma, lower=True), np.eye(data.p))
    return 0.5 * (omega + omega.T)


def _logistic_objective(design: np.ndarray, targets: np.ndarray, coef: np.ndarray) -> np.ndarray:
    eta = design @ coef
    return np.sum(targets * eta + log_expit(-eta), axis=0)


def logistic_newton(design: np.ndarray, targets: np.ndarray, coef0: np.ndarray,
                    tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Column-wise maximizers of sum_i t_ic eta_ic - log(1 + exp(eta_ic)), eta = design @ coef.

    Damped Newton: each column halves its step until the objective does not drop.
    """
    coef = np.array(coef0, dtype=float, copy=True)
    k = design.shape[1]
    current = _logistic_objective(design, targets, coef)
    for it in range(max_iter):
        mu = expit(design @ coef)
        grad = design.T @ (targets - mu)
        if np.max(np.abs(grad)) <= tol:
            logger.debug(f"logistic Newton converged in {it} iterations")
            break
        weights = mu * (1.0 - mu)
        hess = np.einsum("ik,ic,il->ckl", design, weights, design) + 1e-12 * np.eye(k)
        step = np.linalg.solve(hess, grad.T[:, :, None])[:, :, 0].T
        t = np.ones(coef.shape[1])
        for _ in range(30):
            trial = coef + t * step
            value = _logistic_objective(design, targets, trial)
            worse = value < current
            if not np.any(worse):
                break
            t = np.where(worse, 0.5 * t, t)
        accept = value >= current
        coef = np.where(accept, trial, coef)
        current = np.where(accept, value, current)
    return coef


def _is_intercept_only(mat: Optional[np.ndarray]) -> bool:
    return mat is not None and mat.size > 0 and min(mat.shape) == 1 and bool(np.all(mat == 1.0))


def update_B0(data: CountDataset, psi: VariationalParams, variant: ZIVariant,
              coef0: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Maximizer of E[log p(W)] in the ZI coefficients for fixed P."""
    variant = ZIVariant(variant)
    P = psi.P
    if variant == ZIVariant.NONE:
        return None
    if variant == ZIVariant.ND:
        return np.array([clamped_logit(P.mean())])
    if variant == ZIVariant.CD:
        if _is_intercept_only(data.X0):
            return clamped_logit(P.mean(axis=0))[None, :]
        start = np.zeros((data.X0.shape[1], data.p)) if coef0 is None else coef0
        return logistic_newton(data.X0, P, start)
    if _is_intercept_only(data.X0bar):
        return clamped_logit(P.mean(axis=1))[:, None]
    start = np.zeros((data.X0bar.shape[0], data.n)) if coef0 is None else coef0.T
    return logistic_newton(data.X0bar.T, P.T, start).T


def update_P(data: CountDataset, theta: ModelParams, psi: VariationalParams) -> np.ndarray:
    if theta.zi_variant == ZIVariant.NONE:
        return np.zeros((data.n, data.p))
    return expit(psi.A(data.design) + theta.mu0(data.design)) * data.zero_mask


def _m_objective(data, theta, M, S, Q) -> np.ndarray:
    A = np.exp(data.O + M + 0.5 * S**2)
    R = M - theta.mean_field(data.design)
    return np.sum(Q * (data.Y * M - A), axis=1) - 0.5 * np.sum((R @ theta.omega) * R, axis=1)


def _newton_M(data: CountDataset, theta: ModelParams, psi: VariationalParams) -> np.ndarray:
    """One diagonal-Newton step on M with per-row backtracking."""
    M, S, Q = psi.M, psi.S, psi.Q
    w_diag = np.diag(theta.omega)
    A = psi.A(data.design)
    R = M - theta.mean_field(data.design)
    grad = Q * (data.Y - A) - R @ theta.omega
    direction = grad / (Q * A + w_diag)
    current = _m_objective(data, theta, M, S, Q)
    t = np.ones(data.n)
    out = M.copy()
    pending = np.ones(data.n, dtype=bool)
    for _ in range(30):
        trial = M + t[:, None] * direction
        with np.errstate(over="ignore"):
            value = _m_objective(data, theta, trial, S, Q)
        ok = pending & np.isfinite(value) & (value >= current)
        out[ok] = trial[ok]
        pending &= ~ok
        if not np.any(pending):
            break
        t = np.where(pending, 0.5 * t, t)
    return out


def _s_objective(base, log_s, w_diag) -> np.ndarray:
    s2 = np.exp(2.0 * log_s)
    return -base * np.exp(0.5 * s2) + log_s - 0.5 * w_diag * s2


def _newton_log_S(data: CountDataset, theta: ModelParams, psi: VariationalParams) -> np.ndarray:
    """One Newton step on log S; the S-part of the ELBO is concave in log S entrywise."""
    w_diag = np.diag(theta.omega)
    base = psi.Q * np.exp(data.O + psi.M)
    log_s = np.log(psi.S)
    s2 = psi.S**2
    qa = base * np.exp(0.5 * s2)
    grad = 1.0 - qa * s2 - w_diag * s2
    hess = -qa * (2.0 * s2 + s2**2) - 2.0 * w_diag * s2
    step = -grad / hess
    current = _s_objective(base, log_s, w_diag)
    t = np.ones_like(log_s)
    out = log_s.copy()
    pending = np.ones_like(log_s, dtype=bool)
    for _ in range(30):
        trial = log_s + t * step
        with np.errstate(over="ignore"):
            value = _s_objective(base, trial, w_diag)
        ok = pending & np.isfinite(value) & (value >= current)
        out[ok] = trial[ok]
        pending &= ~ok
        if not np.any(pending):
            break
        t = np.where(pending, 0.5 * t, t)
    return np.exp(out)


def _converged(trace: List[float], config: FitConfig) -> bool:
    if len(trace) <= config.window:
        return False
    now, before = trace[-1], trace[-1 - config.window]
    return abs(now - before) <= config.rel_tol * abs(now)


def vem_fit(data: CountDataset, config: FitConfig) -> FitResult:
    config.validate(data.n)
    if config.method != FitMethod.VEM:
        raise ConfigurationError("vem_fit needs method=vem")
    start = time.perf_counter()
    data = config.zi.prepare(data)
    variant = config.zi.variant
    theta, psi = init_params(data, config)
    trace = [elbo(STANDARD, data, theta, psi)]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        # M-step: B does not depend on Omega, so (B, then Omega) is the joint maximizer.
        B = update_B(data, psi)
        sigma, jittered = _sigma_update(data, B, psi)
        zi = update_B0(data, psi, variant, theta.zi) if variant != ZIVariant.NONE else None
        theta = ModelParams.from_sigma(sigma, B, variant, zi)
        # VE-step
        psi = psi.replace(P=update_P(data, theta, psi))
        for _ in range(config.inner_steps):
            psi = psi.replace(M=_newton_M(data, theta, psi))
            psi = psi.replace(S=_newton_log_S(data, theta, psi))
        value = elbo(STANDARD, data, theta, psi)
        if not np.isfinite(value):
            raise DivergenceError("ELBO is not finite", iteration=it)
        previous = trace[-1]
        if value < previous - MONOTONE_TOL * abs(previous):
            if not jittered:
                raise InternalError(
                    f"VEM decreased the ELBO from {previous:.10g} to {value:.10g} at iteration {it}"
                )
            logger.debug(f"ELBO dropped after a ridged Omega update at iteration {it}")
        trace.append(value)
        logger.debug(f"VEM iteration {it}: ELBO {value:.6f}")
        if _converged(trace, config):
            converged = True
            break
    wall = time.perf_counter() - start
    _log_outcome("VEM", config, it, converged, trace[-1], wall)
    return FitResult(theta=theta, psi=psi, elbo_trace=trace, n_iters=it, converged=converged,
                     wall_time=wall, variant=STANDARD, zi=config.zi, method=FitMethod.VEM,
                     design=data.design)


def _log_outcome(label, config, iters, converged, value, wall):
    if converged:
        logger.info(f"{label} fit ({config.elbo_variant.name}, {config.zi.variant.value}) converged "
                    f"after {iters} iterations: ELBO {value:.4f} in {wall:.2f}s")
    else:
        logger.warning(f"{label} fit ({config.elbo_variant.name}, {config.zi.variant.value}) stopped "
                       f"at max_iters={iters} without converging: ELBO {value:.4f}")


# Blocks indexed by sample, updated only on the rows of a minibatch.
LOCAL_BLOCKS = ("M", "log_S", "logit_P")


@dataclass
class AscentState:
    """Unconstrained coordinates of (theta, psi) plus the adaptive step statistics."""

    values: Dict[str, np.ndarray]
    sq_avg: Dict[str, np.ndarray]
    variant: ElboVariant
    zi_variant: ZIVariant
    learning_rate: float
    decay: float
    steps: int = 0

    def local_blocks(self):
        blocks = list(LOCAL_BLOCKS)
        if self.zi_variant == ZIVariant.RD:
            blocks.append("zi")
        return [b for b in blocks if b in self.values]

    def params(self, data: CountDataset, rows=None) -> Tuple[ModelParams, VariationalParams]:
        v = self.values
        take = (lambda a: a) if rows is None else (lambda a: a[rows])
        zi = v.get("zi")
        if zi is not None and self.zi_variant == ZIVariant.RD:
            zi = take(zi)
        theta = ModelParams.from_factor(v["C"], v["B"], self.zi_variant, zi)
        M = take(v["M"])
        S = np.exp(take(v["log_S"]))
        if "logit_P" in v:
            mask = data.zero_mask if rows is None else data.zero_mask[rows]
            P = expit(take(v["logit_P"])) * mask
        else:
            P = np.zeros_like(M)
        return theta, VariationalParams(M=M, S=S, P=P)


def _initial_state(data: CountDataset, config: FitConfig,
                   start: Optional[Tuple[ModelParams, VariationalParams]] = None) -> AscentState:
    theta, psi = init_params(data, config) if start is None else start
    if theta.zi_variant != config.zi.variant:
        raise ConfigurationError("the starting point was fitted with another inflation variant")
    values = {"M": psi.M.copy(), "log_S": np.log(psi.S), "B": theta.B.copy(), "C": theta.C.copy()}
    if theta.zi is not None:
        values["zi"] = theta.zi.copy()
        if not config.elbo_variant.analytic_p:
            values["logit_P"] = clamped_logit(psi.P) * data.zero_mask
    return AscentState(values=values, sq_avg={k: np.zeros_like(v) for k, v in values.items()},
                       variant=config.elbo_variant, zi_variant=config.zi.variant,
                       learning_rate=config.learning_rate, decay=config.decay)


def _take_theta_rows(theta: ModelParams, rows) -> ModelParams:
    if theta.zi_variant != ZIVariant.RD:
        return theta
    return theta.replace(zi=theta.zi[rows])


def stochastic_gradient(variant: ElboVariant, data: CountDataset, theta: ModelParams,
                        psi: VariationalParams, batch) -> ElboGradient:
    """Unbiased minibatch estimate of the full gradient.

    Row terms of the batch are scaled by n / |batch|; rows outside the batch
    get zero gradient in every per-sample block.
    """
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ParameterError("a minibatch needs at least one row")
    scale = data.n / batch.size
    g = elbo_gradient(variant, data.take_rows(batch), _take_theta_rows(theta, batch),
                      psi.take_rows(batch)).scaled(scale)

    def scatter(block):
        if block is None:
            return None
        full = np.zeros((data.n,) + block.shape[1:])
        np.add.at(full, batch, block)
        return full

    dZI = scatter(g.dZI) if theta.zi_variant == ZIVariant.RD else g.dZI
    return ElboGradient(dOmega=g.dOmega, dC=g.dC, dB=g.dB, dZI=dZI, dM=scatter(g.dM),
                        dS=scatter(g.dS), dP=scatter(g.dP))


def _unconstrained_gradient(state: AscentState, g: ElboGradient, rows) -> Dict[str, np.ndarray]:
    v = state.values
    out = {"M": g.dM[rows], "log_S": g.dS[rows] * np.exp(v["log_S"][rows]), "B": g.dB, "C": g.dC}
    if "zi" in v:
        out["zi"] = g.dZI[rows] if state.zi_variant == ZIVariant.RD else g.dZI
    if "logit_P" in v:
        P = expit(v["logit_P"][rows])
        out["logit_P"] = g.dP[rows] * P * (1.0 - P)
    return out


def _batch_objective(state: AscentState, data: CountDataset, batch) -> float:
    sub = data.take_rows(batch)
    theta, psi = state.params(data, batch)
    return (data.n / len(batch)) * elbo(state.variant, sub, theta, psi)


def minibatch_step(data: CountDataset, state: AscentState, batch) -> AscentState:
    """One safeguarded adaptive ascent step driven by the rows in `batch`."""
    batch = np.unique(np.asarray(batch, dtype=int))
    if batch.size == 0:
        raise ParameterError("a minibatch needs at least one row")
    local = set(state.local_blocks())
    theta, psi = state.params(data)
    g = stochastic_gradient(state.variant, data, theta, psi, batch)
    grads = _unconstrained_gradient(state, g, batch)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient in block {name}", iteration=state.steps)

    sq_avg = {}
    directions = {}
    for name, grad in grads.items():
        prev = state.sq_avg[name][batch] if name in local else state.sq_avg[name]
        avg = state.decay * prev + (1.0 - state.decay) * grad**2
        sq_avg[name] = avg
        directions[name] = grad / (np.sqrt(avg) + 1e-8)

    before = _batch_objective(state, data, batch)
    rate = state.learning_rate
    for _ in range(MAX_HALVINGS + 1):
        values = {k: v.copy() for k, v in state.values.items()}
        for name, direction in directions.items():
            if name in local:
                values[name][batch] += rate * direction
            else:
                values[name] = values[name] + rate * direction
        if "logit_P" in values:
            np.clip(values["logit_P"], -LOGIT_P_BOUND, LOGIT_P_BOUND, out=values["logit_P"])
        trial = AscentState(values=values, sq_avg=state.sq_avg, variant=state.variant,
                            zi_variant=state.zi_variant, learning_rate=state.learning_rate,
                            decay=state.decay, steps=state.steps)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                after = _batch_objective(trial, data, batch)
        except ParameterError:
            after = -np.inf
        if np.isfinite(after) and after >= before - SAFEGUARD_TOL * abs(before):
            break
        logger.debug(f"step {state.steps}: halving rate to {rate / 2:.3g}")
        rate *= 0.5
    else:
        raise StalledAscentError(
            f"no acceptable step after {MAX_HALVINGS} halvings at step {state.steps}"
        )
    new_sq = {k: v.copy() for k, v in state.sq_avg.items()}
    for name, avg in sq_avg.items():
        if name in local:
            new_sq[name][batch] = avg
        else:
            new_sq[name] = avg
    trial.sq_avg = new_sq
    trial.steps = state.steps + 1
    return trial


def _finish(state: AscentState, data: CountDataset) -> Tuple[ModelParams, VariationalParams]:
    theta, psi = state.params(data)
    if state.variant.analytic_p:
        psi = psi.replace(P=psi_analytic(data, theta))
    return theta, psi


def gradient_fit(data: CountDataset, config: FitConfig,
                 start: Optional[Tuple[ModelParams, VariationalParams]] = None) -> FitResult:
    """Joint adaptive ascent; `start` warm-starts from a previous (theta, psi)."""
    config.validate(data.n)
    t0 = time.perf_counter()
    data = config.zi.prepare(data)
    state = _initial_state(data, config, start)
    variant = config.elbo_variant
    trace = [elbo(variant, data, *state.params(data))]
    rng = make_rng(config.seed)
    everything = np.arange(data.n)
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        if config.minibatch_size is None or config.minibatch_size >= data.n:
            state = minibatch_step(data, state, everything)
        else:
            order = rng.permutation(data.n)
            for lo in range(0, data.n, config.minibatch_size):
                state = minibatch_step(data, state, order[lo:lo + config.minibatch_size])
        value = elbo(variant, data, *state.params(data))
        if not np.isfinite(value):
            raise DivergenceError("ELBO is not finite", iteration=it)
        trace.append(value)
        logger.debug(f"ascent iteration {it}: ELBO {value:.6f}")
        if _converged(trace, config):
            converged = True
            break
    theta, psi = _finish(state, data)
    wall = time.perf_counter() - t0
    _log_outcome("Gradient", config, it, converged, trace[-1], wall)
    return FitResult(theta=theta, psi=psi, elbo_trace=trace, n_iters=it, converged=converged,
                     wall_time=wall, variant=variant, zi=config.zi, method=FitMethod.GRADIENT,
                     design=data.design)


def fit(data: CountDataset, config: FitConfig) -> FitResult:
    if config.method == FitMethod.VEM:
        return vem_fit(data, config)
    return gradient_fit(data, config)
