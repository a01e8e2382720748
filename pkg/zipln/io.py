"""Files in and out: count tables, covariate formulas, matrices, manifests, fit directories."""

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .elbo import psi_analytic
from .errors import ConfigurationError, DataError, FingerprintMismatchError, MalformedInputError
from .model import CountDataset, ZIVariant
from .optim import FitResult
from .selection import CriteriaRow
from .simbench import reconstruct
from .utils import fingerprint

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"
_LINE_RE = re.compile(r"line (\d+)")


def write_matrix(path: str, values, index: Optional[Sequence] = None,
                 columns: Optional[Sequence] = None, index_label: str = "id"):
    """CSV with a header row and a leading id column; reals keep 17 significant digits."""
    arr = np.asarray(values)
    if arr.ndim == 1:
        arr = arr[:, None]
    frame = pd.DataFrame(arr, index=index, columns=columns)
    frame.to_csv(path, float_format=FLOAT_FORMAT, index=True, index_label=index_label)


def _read_frame(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise MalformedInputError(path, None, "file not found")
    try:
        frame = pd.read_csv(path, index_col=0, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise MalformedInputError(path, 1, "empty file")
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise MalformedInputError(path, int(match.group(1)) if match else None, str(e).strip())
    frame.index = frame.index.astype(str)
    if frame.index.has_duplicates:
        dup = frame.index[frame.index.duplicated()][0]
        line = int(np.flatnonzero(frame.index == dup)[1]) + 2
        raise MalformedInputError(path, line, f"duplicate id {dup!r}")
    return frame


def _real(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return np.nan


def _to_reals(raw: pd.DataFrame) -> pd.DataFrame:
    # float() rounds correctly, so 17-digit reals read back bit for bit
    return raw.apply(lambda col: col.map(_real)).astype(float)


def _first_bad_cell(path: str, raw: pd.DataFrame, bad: np.ndarray, reason: str):
    i, j = np.argwhere(bad)[0]
    # line 1 holds the header
    raise MalformedInputError(path, int(i) + 2, f"column {raw.columns[j]!r}: {reason} ({raw.iat[i, j]!r})")


def read_matrix(path: str) -> pd.DataFrame:
    raw = _read_frame(path)
    frame = _to_reals(raw)
    bad = frame.isna().to_numpy()
    if bad.any():
        _first_bad_cell(path, raw, bad, "not a number")
    return frame.astype(float)


def read_count_table(path: str) -> pd.DataFrame:
    """Sample-by-variable table of nonnegative integer counts."""
    raw = _read_frame(path)
    if raw.shape[1] == 0:
        raise MalformedInputError(path, 1, "no count columns")
    frame = _to_reals(raw)
    values = frame.to_numpy(dtype=float)
    with np.errstate(invalid="ignore"):
        _check_cells(path, raw, ~np.isfinite(values), "not a number")
        _check_cells(path, raw, np.floor(values) != values, "not an integer")
        _check_cells(path, raw, values < 0, "negative count")
    logger.info(f"Read {values.shape[0]} samples x {values.shape[1]} variables from {path}")
    return frame.astype(np.int64)


def _check_cells(path, raw, bad, reason):
    if bad.any():
        _first_bad_cell(path, raw, bad, reason)


def read_table(path: str, ids: Sequence[str]) -> pd.DataFrame:
    """Covariate table aligned on `ids` (sample ids, or variable ids for column covariates)."""
    frame = _read_frame(path)
    missing = [i for i in ids if i not in frame.index]
    if missing:
        raise MalformedInputError(path, None, f"no row for id(s) {missing[:5]}")
    return frame.loc[list(ids)]


def _column(frame: pd.DataFrame, name: str, path: str) -> pd.Series:
    if name not in frame.columns:
        raise ConfigurationError(f"{path}: unknown column {name!r} in formula")
    series = frame[name]
    numeric = series.map(_real).astype(float)
    return numeric if not numeric.isna().any() else series.astype(str)


def _is_numeric(series: pd.Series) -> bool:
    return pd.api.types.is_numeric_dtype(series)


def design_matrix(frame: pd.DataFrame, formula: str, intercept: bool,
                  path: str = "covariates") -> Tuple[np.ndarray, List[str]]:
    """Build a design matrix from a formula such as ``site + depth`` or ``site:time``.

    Terms are separated by '+'. A term is a column name or a pairwise
    interaction 'a:b'. Numeric columns enter as they are; categorical columns
    (and interactions involving one) are one-hot encoded. The first level is
    dropped whenever an intercept or an earlier categorical term already spans
    the constant.
    """
    terms = [t.strip() for t in formula.split("+") if t.strip()]
    if not terms:
        raise ConfigurationError(f"empty formula {formula!r}")
    blocks = []
    names: List[str] = []
    spans_constant = intercept
    for term in terms:
        parts = [p.strip() for p in term.split(":")]
        if len(parts) > 2:
            raise ConfigurationError(f"only pairwise interactions are supported, got {term!r}")
        cols = [_column(frame, p, path) for p in parts]
        if all(_is_numeric(c) for c in cols):
            values = cols[0].to_numpy(dtype=float)
            if len(cols) == 2:
                values = values * cols[1].to_numpy(dtype=float)
            blocks.append(values[:, None])
            names.append(term)
            continue
        if len(cols) == 2 and any(_is_numeric(c) for c in cols):
            raise ConfigurationError(f"mixed numeric/categorical interaction {term!r} is not supported")
        labels = cols[0].astype(str)
        if len(cols) == 2:
            labels = labels + ":" + cols[1].astype(str)
        dummies = pd.get_dummies(labels, prefix=term, prefix_sep="=", drop_first=spans_constant, dtype=float)
        spans_constant = True
        blocks.append(dummies.to_numpy())
        names.extend(dummies.columns)
    return np.hstack(blocks), names


def total_count_offsets(Y: np.ndarray) -> np.ndarray:
    totals = np.asarray(Y).sum(axis=1)
    if np.any(totals <= 0):
        bad = np.flatnonzero(totals <= 0)
        raise DataError(f"samples {bad[:5].tolist()} have zero total count; log offsets are undefined")
    return np.repeat(np.log(totals)[:, None], np.asarray(Y).shape[1], axis=1)


def prevalence_filter(counts: pd.DataFrame, min_prevalence: float) -> pd.DataFrame:
    """Keep the variables observed (count > 0) in at least `min_prevalence` of the samples."""
    if not 0.0 <= min_prevalence <= 1.0:
        raise ConfigurationError("min_prevalence must lie in [0, 1]")
    keep = (counts > 0).mean(axis=0) >= min_prevalence
    dropped = int((~keep).sum())
    if dropped:
        logger.info(f"Prevalence filter {min_prevalence:.0%} dropped {dropped} of {counts.shape[1]} variables")
    if not keep.any():
        raise DataError(f"no variable reaches prevalence {min_prevalence}")
    return counts.loc[:, keep]


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    inputs: Dict[str, str] = field(default_factory=dict)
    zi: Dict = field(default_factory=dict)
    fit: Dict = field(default_factory=dict)
    out_dir: str = ""
    seed: int = 0
    version: str = __version__
    fingerprint: Optional[str] = None
    # relative paths in argv resolve against this directory on replay
    cwd: str = field(default_factory=os.getcwd)

    def save(self, out_dir: Optional[str] = None) -> str:
        path = os.path.join(out_dir or self.out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
        return path

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


def save_fit(out_dir: str, result: FitResult, data: CountDataset, criteria: CriteriaRow,
             samples: Sequence[str], variables: Sequence[str]) -> Dict[str, str]:
    """Write theta, psi, the ELBO trace and the criteria of one fit as CSV/JSON files."""
    os.makedirs(out_dir, exist_ok=True)
    theta, psi = result.theta, result.psi
    samples, variables = list(samples), list(variables)
    paths = {}

    def put(name, values, index, columns):
        paths[name] = os.path.join(out_dir, f"{name}.csv")
        write_matrix(paths[name], values, index=index, columns=columns)

    put("omega", theta.omega, variables, variables)
    put("sigma", theta.sigma, variables, variables)
    put("B", theta.B, [f"x{k}" for k in range(theta.B.shape[0])], variables)
    if theta.zi is not None:
        zi = theta.zi
        if zi.ndim == 1:
            put("zi", zi, ["logit_pi"], ["value"])
        elif result.zi.variant == ZIVariant.RD:
            put("zi", zi, samples, [f"x0_{k}" for k in range(zi.shape[1])])
        else:
            put("zi", zi, [f"x0_{k}" for k in range(zi.shape[0])], variables)
    put("M", psi.M, samples, variables)
    put("S", psi.S, samples, variables)
    put("P", psi.P, samples, variables)
    put("fitted", reconstruct(result, data), samples, variables)
    prepared = CountDataset(Y=data.Y, design=result.design)
    put("psi", psi_analytic(prepared, theta), samples, variables)
    paths["elbo_trace"] = os.path.join(out_dir, "elbo_trace.csv")
    pd.DataFrame({"iteration": np.arange(len(result.elbo_trace)), "elbo": result.elbo_trace}).to_csv(
        paths["elbo_trace"], index=False, float_format=FLOAT_FORMAT
    )
    paths["criteria"] = os.path.join(out_dir, "criteria.json")
    summary = criteria.to_dict()
    summary.update(n_iters=result.n_iters, method=result.method.value)
    with open(paths["criteria"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    logger.info(f"Wrote fit to {out_dir}")
    return paths


def load_criteria(fit_dir: str) -> CriteriaRow:
    path = os.path.join(fit_dir, "criteria.json")
    if not os.path.isfile(path):
        raise MalformedInputError(path, None, "not a fit directory (criteria.json missing)")
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    fields = CriteriaRow.__dataclass_fields__
    return CriteriaRow(**{k: v for k, v in raw.items() if k in fields})


def load_matrix(fit_dir: str, name: str) -> pd.DataFrame:
    return read_matrix(os.path.join(fit_dir, f"{name}.csv"))


def check_fingerprint(fit_dir: str, counts: np.ndarray):
    row = load_criteria(fit_dir)
    actual = fingerprint(counts)
    if row.fingerprint != actual:
        raise FingerprintMismatchError(f"{fit_dir} was fitted on another dataset")


@dataclass
class Projection:
    scores: np.ndarray
    loadings: np.ndarray
    explained: np.ndarray
    k: int


def pca_project(M: np.ndarray, k: int, tol: float = 1e-10) -> Projection:
    """Top-k principal components of the column-centered latent means."""
    M = np.asarray(M, dtype=float)
    n, p = M.shape
    if not 1 <= k <= p:
        raise ConfigurationError(f"k must lie in [1, {p}], got {k}")
    centered = M - M.mean(axis=0)
    U, s, Vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > tol * max(s[0] if s.size else 0.0, 1e-300)))
    if k > rank:
        logger.warning(f"requested {k} components but the centered latent means have rank {rank}; truncating")
        k = rank
    total = float(np.sum(s**2))
    explained = s[:k] ** 2 / total if total > 0 else np.zeros(k)
    return Projection(scores=U[:, :k] * s[:k], loadings=Vt[:k].T, explained=explained, k=k)
