"""Simulation benchmark: scenario grids, estimator roster, metrics and reports.

Every (cell, replicate) pair is an independent job. Jobs get their seeds from
one root `SeedSequence` in grid order, run in a bounded pool driven by asyncio,
and their records are sorted before they are returned, so the record set does
not depend on the number of workers.
"""

import asyncio
import json
import logging
import os
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.stats

from .config import Settings
from .elbo import ENHANCED, ENHANCED_ANALYTIC, STANDARD, STANDARD_ANALYTIC
from .errors import ConfigurationError, ParameterError, ZiplnError
from .model import CountDataset, ZIConfig, ZIVariant, sample_dataset, scenario_params
from .optim import FitConfig, FitMethod, FitResult, fit
from .utils import spawn_seeds

logger = logging.getLogger(__name__)

AXES = ("pi", "gamma", "n", "p")
METHODS = ("Standard", "Enhanced", "StandardAnalytic", "EnhancedAnalytic", "PLN", "OraclePLN")
PLN_METHODS = ("PLN", "OraclePLN")

RECORD_COLUMNS = ["scenario", "axis_value", "replicate", "method", "rmse_sigma", "rmse_b",
                  "rmse_pi", "recon_error", "elbo", "wall_time_s", "status", "axis",
                  "poisson_zero_rate"]
METRICS = ["rmse_sigma", "rmse_b", "rmse_pi", "recon_error", "elbo", "wall_time_s"]

PI_CONVENTION = (
    "ND: |pi_hat - pi_star|; CD/RD: root mean square difference of the n x p "
    "inflation probability matrices"
)

_PAPER_AXIS_VALUES = {
    "pi": tuple(np.round(np.arange(0.2, 0.95, 0.1), 2)),
    "gamma": tuple(np.round(np.arange(0.0, 3.25, 0.5), 2)),
    "n": (100, 200, 300, 400, 500, 600),
    "p": (100, 200, 300, 400, 500),
}
_DESK_AXIS_VALUES = dict(_PAPER_AXIS_VALUES, p=(10, 20, 30, 40, 50))


@dataclass(frozen=True)
class Cell:
    scenario: str
    axis: str
    axis_value: float
    n: int
    p: int
    d: int
    d0: int
    gamma: float
    rho: float


@dataclass(frozen=True)
class ScenarioGrid:
    axis: str
    values: Tuple[float, ...] = ()
    replicates: int = Settings.REPLICATES
    n: int = 300
    p: int = 30
    d: int = 3
    d0: int = 4
    gamma: float = 2.0
    rho: float = 0.3
    zi: ZIVariant = ZIVariant.ND
    seed: int = Settings.SEED
    max_iters: int = Settings.MAX_ITERS
    rel_tol: float = Settings.TOL

    def __post_init__(self):
        axis = self.axis.replace("_sweep", "")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "zi", ZIVariant(self.zi))
        if not self.values and axis in _DESK_AXIS_VALUES:
            object.__setattr__(self, "values", _DESK_AXIS_VALUES[axis])
        object.__setattr__(self, "values", tuple(self.values))

    @classmethod
    def desk(cls, axis: str, **overrides) -> "ScenarioGrid":
        return cls(axis=axis, **overrides)

    @classmethod
    def paper(cls, axis: str, **overrides) -> "ScenarioGrid":
        axis = axis.replace("_sweep", "")
        settings = dict(values=_PAPER_AXIS_VALUES.get(axis, ()), replicates=30, n=1000, p=250)
        settings.update(overrides)
        return cls(axis=axis, **settings)

    def validate(self):
        if self.axis not in AXES:
            raise ConfigurationError(f"unknown axis {self.axis!r}, expected one of {AXES}")
        if not self.values:
            raise ConfigurationError("a grid needs at least one axis value")
        if self.replicates < 1:
            raise ConfigurationError("replicates must be positive")
        if self.axis == "pi" and not all(0.0 < v < 1.0 for v in self.values):
            raise ConfigurationError("pi values must lie in (0, 1)")
        if self.axis in ("n", "p") and not all(int(v) == v and v >= 1 for v in self.values):
            raise ConfigurationError(f"{self.axis} values must be positive integers")
        if self.zi == ZIVariant.NONE:
            raise ConfigurationError("the benchmark simulates inflated data; pick nd, cd or rd")

    def cells(self) -> List[Cell]:
        self.validate()
        out = []
        for value in self.values:
            n, p, gamma, rho = self.n, self.p, self.gamma, self.rho
            if self.axis == "pi":
                rho = float(value)
            elif self.axis == "gamma":
                gamma = float(value)
            elif self.axis == "n":
                n = int(value)
            else:
                p = int(value)
            out.append(Cell(scenario=f"{self.axis}={value:g}", axis=self.axis, axis_value=float(value),
                            n=n, p=p, d=self.d, d0=self.d0, gamma=gamma, rho=rho))
        return out


@dataclass
class BenchRecord:
    scenario: str
    axis_value: float
    replicate: int
    method: str
    rmse_sigma: float = float("nan")
    rmse_b: float = float("nan")
    rmse_pi: float = float("nan")
    recon_error: float = float("nan")
    elbo: float = float("nan")
    wall_time_s: float = float("nan")
    status: str = "ok"
    axis: str = ""
    poisson_zero_rate: float = float("nan")


@dataclass(frozen=True)
class BenchJob:
    cell: Cell
    replicate: int
    scenario_seed: int
    sample_seed: int
    methods: Tuple[str, ...]
    zi: ZIVariant
    max_iters: int
    rel_tol: float


def rmse(estimate, truth) -> float:
    """Euclidean (Frobenius for matrices) distance between an estimate and the truth."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ParameterError(f"shape mismatch: estimate {estimate.shape} vs truth {truth.shape}")
    return float(np.linalg.norm((estimate - truth).ravel()))


def reconstruct(fit_result: FitResult, data: CountDataset) -> np.ndarray:
    """Expected counts (1 - P) exp(O + M + S^2 / 2) under the fitted variational law."""
    psi = fit_result.psi
    return (1.0 - psi.P) * np.exp(data.O + psi.M + 0.5 * psi.S**2)


def _rms(diff: np.ndarray) -> float:
    return float(np.sqrt(np.mean(diff**2)))


def method_config(method: str, zi: ZIVariant, max_iters: int, rel_tol: float, seed: int) -> FitConfig:
    common = dict(max_iters=max_iters, rel_tol=rel_tol, seed=seed)
    if method in PLN_METHODS:
        return FitConfig(method=FitMethod.VEM, elbo_variant=STANDARD, zi=ZIConfig(ZIVariant.NONE), **common)
    if method == "Standard":
        return FitConfig(method=FitMethod.VEM, elbo_variant=STANDARD, zi=ZIConfig(zi), **common)
    variant = {"Enhanced": ENHANCED, "StandardAnalytic": STANDARD_ANALYTIC,
               "EnhancedAnalytic": ENHANCED_ANALYTIC}.get(method)
    if variant is None:
        raise ConfigurationError(f"unknown method {method!r}, expected one of {METHODS}")
    return FitConfig(method=FitMethod.GRADIENT, elbo_variant=variant, zi=ZIConfig(zi), **common)


def _score(method: str, result: FitResult, data: CountDataset, scenario) -> Dict[str, float]:
    truth = scenario.params
    scores = {
        "rmse_sigma": rmse(result.theta.sigma, truth.sigma),
        "rmse_b": rmse(result.theta.B, truth.B),
        "elbo": result.elbo,
        "wall_time_s": result.wall_time,
    }
    if method not in PLN_METHODS:
        if truth.zi_variant == ZIVariant.ND:
            scores["rmse_pi"] = abs(result.theta.pi - truth.pi)
        else:
            scores["rmse_pi"] = _rms(result.theta.pi_matrix(result.design) - truth.pi_matrix(scenario.design))
    if method != "OraclePLN":
        scores["recon_error"] = _rms(reconstruct(result, data) - data.Y)
    return scores


def run_job(job: BenchJob) -> List[BenchRecord]:
    """Draw one ground truth, one dataset, and fit every method on it."""
    cell = job.cell
    base = dict(scenario=cell.scenario, axis_value=cell.axis_value, replicate=job.replicate, axis=cell.axis)
    try:
        scenario = scenario_params(ZIConfig(job.zi), cell.n, cell.p, cell.d, cell.d0, cell.gamma,
                                   cell.rho, job.scenario_seed)
        data, latent = sample_dataset(scenario.params, scenario.design, job.sample_seed)
    except ZiplnError as e:
        logger.warning(f"{cell.scenario} replicate {job.replicate}: simulation failed: {e}")
        return [BenchRecord(method=m, status=f"failed: {type(e).__name__}: {e}", **base) for m in job.methods]
    zero_rate = float(np.mean(latent.T == 0))
    records = []
    for method in job.methods:
        record = BenchRecord(method=method, poisson_zero_rate=zero_rate, **base)
        config = method_config(method, job.zi, job.max_iters, job.rel_tol, job.sample_seed)
        target = data.with_counts(latent.T) if method == "OraclePLN" else data
        try:
            result = fit(target, config)
            for key, value in _score(method, result, target, scenario).items():
                setattr(record, key, value)
            if not result.converged:
                record.status = "not_converged"
        except (ZiplnError, np.linalg.LinAlgError, FloatingPointError) as e:
            logger.warning(f"{cell.scenario} replicate {job.replicate} {method} failed: {e}")
            record.status = f"failed: {type(e).__name__}: {e}"
        records.append(record)
    return records


def grid_jobs(grid: ScenarioGrid, methods: Sequence[str]) -> List[BenchJob]:
    methods = tuple(methods)
    if not methods:
        raise ConfigurationError("at least one method is required")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigurationError(f"unknown methods {unknown}, expected a subset of {METHODS}")
    cells = grid.cells()
    seeds = spawn_seeds(grid.seed, len(cells) * grid.replicates)
    jobs = []
    for i, cell in enumerate(cells):
        for r in range(grid.replicates):
            scenario_seed, sample_seed = seeds[i * grid.replicates + r].generate_state(2)
            jobs.append(BenchJob(cell=cell, replicate=r, scenario_seed=int(scenario_seed),
                                 sample_seed=int(sample_seed), methods=methods, zi=grid.zi,
                                 max_iters=grid.max_iters, rel_tol=grid.rel_tol))
    return jobs


def _record_key(record: BenchRecord):
    return (record.axis_value, record.replicate, METHODS.index(record.method))


async def run_scenario_grid(grid: ScenarioGrid, methods: Sequence[str] = METHODS,
                            parallelism: int = Settings.JOBS,
                            executor: Optional[Executor] = None) -> List[BenchRecord]:
    jobs = grid_jobs(grid, methods)
    if parallelism < 1:
        raise ConfigurationError("parallelism must be positive")
    logger.info(f"Running {len(jobs)} jobs ({grid.axis} sweep, {len(grid.values)} cells x "
                f"{grid.replicates} replicates, methods {list(methods)}) on {parallelism} worker(s)")
    own_executor = executor is None
    if own_executor:
        executor = ProcessPoolExecutor(parallelism) if parallelism > 1 else ThreadPoolExecutor(1)
    loop = asyncio.get_running_loop()
    gate = asyncio.Semaphore(parallelism)

    async def submit(job: BenchJob) -> List[BenchRecord]:
        async with gate:
            return await loop.run_in_executor(executor, run_job, job)

    records: List[BenchRecord] = []
    try:
        tasks = [asyncio.create_task(submit(job)) for job in jobs]
        for done, task in enumerate(asyncio.as_completed(tasks), start=1):
            batch = await task
            records.extend(batch)
            logger.info(f"[{done}/{len(jobs)}] {batch[0].scenario} replicate {batch[0].replicate} done")
    finally:
        if own_executor:
            executor.shutdown(wait=True)
    failed = sum(1 for r in records if r.status.startswith("failed"))
    if failed:
        logger.warning(f"{failed} of {len(records)} records failed")
    return sorted(records, key=_record_key)


def run_grid(grid: ScenarioGrid, methods: Sequence[str] = METHODS,
             parallelism: int = Settings.JOBS) -> List[BenchRecord]:
    return asyncio.run(run_scenario_grid(grid, methods, parallelism))


def mean_ci(values, confidence: float = 0.95) -> Tuple[float, float, float]:
    """Mean and t-based confidence interval of the finite values."""
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return float("nan"), float("nan"), float("nan")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, float("nan"), float("nan")
    sem = scipy.stats.sem(arr)
    if sem == 0:
        return mean, mean, mean
    low, high = scipy.stats.t.interval(confidence, arr.size - 1, loc=mean, scale=sem)
    return mean, float(low), float(high)


def records_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=RECORD_COLUMNS)


def aggregate(frame: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for (scenario, axis_value, method), group in frame.groupby(["scenario", "axis_value", "method"], sort=False):
        ok = group[~group["status"].str.startswith("failed")]
        row = {"scenario": scenario, "axis": group["axis"].iloc[0], "axis_value": axis_value,
               "method": method, "n_ok": len(ok), "n_failed": len(group) - len(ok)}
        for metric in METRICS:
            mean, low, high = mean_ci(ok[metric])
            row[f"{metric}_mean"] = mean
            row[f"{metric}_ci_low"] = low
            row[f"{metric}_ci_high"] = high
        row["poisson_zero_rate_mean"] = float(group["poisson_zero_rate"].mean())
        rows.append(row)
    return pd.DataFrame(rows)


def emit_report(records: Sequence[BenchRecord], out_dir: str,
                metadata: Optional[dict] = None) -> Dict[str, str]:
    """Write records.csv, one aggregate CSV per axis and a metadata JSON."""
    if not records:
        raise ParameterError("no records to report")
    os.makedirs(out_dir, exist_ok=True)
    frame = records_frame(records)
    paths = {"records": os.path.join(out_dir, "records.csv")}
    frame.to_csv(paths["records"], index=False, float_format="%.17g")
    for axis, part in frame.groupby("axis", sort=True):
        key = f"aggregate_{axis}"
        paths[key] = os.path.join(out_dir, f"{key}.csv")
        aggregate(part).to_csv(paths[key], index=False, float_format="%.17g")
    meta = {"pi_rmse_convention": PI_CONVENTION, "methods": sorted(set(frame["method"]), key=METHODS.index),
            "records": len(frame)}
    meta.update(metadata or {})
    paths["metadata"] = os.path.join(out_dir, "metadata.json")
    with open(paths["metadata"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
    for path in paths.values():
        logger.info(f"Wrote {path}")
    return paths


def grid_metadata(grid: ScenarioGrid) -> dict:
    out = asdict(grid)
    out["zi"] = grid.zi.value
    out["values"] = list(grid.values)
    return out
