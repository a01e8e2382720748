"""Parameter counts and ELBO-based information criteria.

All criteria are on the "higher is better" scale:
AIC = J - K, BIC = J - K log(n) / 2, ICL = BIC - H(q), with J the final ELBO
standing in for the log-likelihood.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .elbo import entropy
from .errors import FingerprintMismatchError, ParameterError
from .model import CountDataset, ZIConfig, ZIVariant
from .optim import FitResult
from .utils import fingerprint

logger = logging.getLogger(__name__)

CRITERIA = ("AIC", "BIC", "ICL")
COLUMNS = ["name", "elbo_variant", "zi", "elbo", "K", "n", "AIC", "BIC", "ICL", "entropy",
           "converged", "rd_warning"]


def param_count(config: ZIConfig, n: int, p: int, d: int, d0: int = 0) -> int:
    """K = p(p+1)/2 + pd + c, c being the size of the ZI parameter."""
    if min(n, p, d) < 1:
        raise ParameterError("n, p and d must be positive")
    variant = ZIVariant(config.variant)
    if variant in (ZIVariant.CD, ZIVariant.RD) and d0 < 1:
        raise ParameterError("d0 must be positive for covariate-driven inflation")
    c = {
        ZIVariant.NONE: 0,
        ZIVariant.ND: 1,
        ZIVariant.CD: p * d0,
        ZIVariant.RD: n * d0,
    }[variant]
    return p * (p + 1) // 2 + p * d + c


@dataclass
class CriteriaRow:
    name: str
    elbo_variant: str
    zi: str
    elbo: float
    K: int
    n: int
    p: int
    AIC: float
    BIC: float
    ICL: float
    entropy: float
    converged: bool = True
    rd_warning: bool = False
    fingerprint: Optional[str] = None

    @classmethod
    def build(cls, name, elbo_variant, zi, elbo, K, n, p, entropy, converged=True,
              rd_warning=False, fingerprint=None) -> "CriteriaRow":
        bic = elbo - 0.5 * K * np.log(n)
        return cls(name=name, elbo_variant=elbo_variant, zi=zi, elbo=float(elbo), K=int(K), n=int(n),
                   p=int(p), AIC=float(elbo - K), BIC=float(bic), ICL=float(bic - entropy),
                   entropy=float(entropy), converged=converged, rd_warning=rd_warning,
                   fingerprint=fingerprint)

    def to_dict(self) -> dict:
        return asdict(self)


def criteria(fit: FitResult, data: CountDataset, name: Optional[str] = None) -> CriteriaRow:
    design = fit.design
    K = param_count(fit.zi, data.n, data.p, design.d, design.d0)
    rd = fit.zi.variant == ZIVariant.RD
    if rd:
        logger.warning("RD inflation has n x d0 parameters: criteria grow with n and are only indicative")
    if not fit.converged:
        logger.warning(f"criteria computed on a fit that did not converge ({fit.n_iters} iterations)")
    label = name or f"{fit.variant.name}-{fit.zi.variant.value}"
    return CriteriaRow.build(
        name=label,
        elbo_variant=fit.variant.name,
        zi=fit.zi.variant.value,
        elbo=fit.elbo,
        K=K,
        n=data.n,
        p=data.p,
        entropy=entropy(fit.variant, fit.theta, fit.psi),
        converged=fit.converged,
        rd_warning=rd,
        fingerprint=fingerprint(data.Y),
    )


@dataclass
class CriteriaReport:
    rows: List[CriteriaRow]
    best: Dict[str, str] = field(default_factory=dict)

    @property
    def rd_warning(self) -> bool:
        return any(r.rd_warning for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.to_dict() for r in self.rows], columns=COLUMNS)
        for crit in CRITERIA:
            frame[f"best_{crit}"] = frame["name"] == self.best.get(crit)
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "best": dict(self.best),
                "rd_warning": self.rd_warning}

    def to_text(self) -> str:
        frame = self.to_frame()[["name", "elbo_variant", "zi", "K", "elbo", "AIC", "BIC", "ICL"]].copy()
        for crit in CRITERIA:
            frame[crit] = [
                f"{value:.2f}{' *' if name == self.best.get(crit) else ''}"
                for name, value in zip(frame["name"], frame[crit])
            ]
        frame["elbo"] = frame["elbo"].map(lambda v: f"{v:.2f}")
        text = frame.to_string(index=False)
        if self.rd_warning:
            text += "\n(RD rows: K grows with n, criteria are indicative only)"
        return text


def compare_models(rows: Sequence[CriteriaRow]) -> CriteriaReport:
    """Tabulate criteria rows and mark the best model for each criterion.

    Ties go to the model with fewer parameters, then to the lexically first name.
    """
    rows = list(rows)
    if not rows:
        raise ParameterError("nothing to compare")
    keys = {(r.n, r.p) for r in rows}
    prints = {r.fingerprint for r in rows if r.fingerprint is not None}
    if len(keys) > 1 or len(prints) > 1:
        raise FingerprintMismatchError(
            "models were fitted on different datasets and cannot be compared"
        )
    best = {}
    for crit in CRITERIA:
        winner = min(rows, key=lambda r: (-getattr(r, crit), r.K, r.name))
        best[crit] = winner.name
    return CriteriaReport(rows=rows, best=best)
