import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np
import pandas as pd
import pytest

from zipln.elbo import STANDARD
from zipln.errors import ConfigurationError, ParameterError
from zipln.model import (
    CountDataset,
    Design,
    ModelParams,
    VariationalParams,
    ZIConfig,
    ZIVariant,
    sample_dataset,
    scenario_params,
)
from zipln.optim import FitMethod, FitResult, fit
from zipln.simbench import (
    METHODS,
    BenchRecord,
    ScenarioGrid,
    aggregate,
    emit_report,
    grid_jobs,
    mean_ci,
    method_config,
    reconstruct,
    records_frame,
    rmse,
    run_grid,
    run_job,
    run_scenario_grid,
)


def test_rmse_examples():
    assert rmse([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]) == 0.0
    assert rmse([[3.0, 0.0]], [[0.0, 4.0]]) == pytest.approx(5.0)
    with pytest.raises(ParameterError):
        rmse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_rmse_matches_double_loop(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    total = 0.0
    for i in range(4):
        for j in range(3):
            total += (a[i, j] - b[i, j]) ** 2
    assert rmse(a, b) == pytest.approx(np.sqrt(total), rel=1e-12)


def _fit_result(M, S, P, O):
    design = Design.build(M.shape[0], M.shape[1], O=O)
    theta = ModelParams.from_omega(np.eye(M.shape[1]), np.zeros((1, M.shape[1])), ZIVariant.ND, [0.0])
    return FitResult(theta=theta, psi=VariationalParams(M=M, S=S, P=P), elbo_trace=[0.0], n_iters=0,
                     converged=True, wall_time=0.0, variant=STANDARD, zi=ZIConfig(), method=FitMethod.VEM,
                     design=design)


def test_reconstruct_expected_counts():
    O = np.array([[0.0, np.log(2.0)]])
    data = CountDataset.from_arrays([[0, 3]], O=O)
    result = _fit_result(np.zeros((1, 2)), np.ones((1, 2)), np.array([[0.5, 0.0]]), O)
    expected = np.array([[0.5 * np.exp(0.5), 2.0 * np.exp(0.5)]])
    np.testing.assert_allclose(reconstruct(result, data), expected)
    assert expected[0, 0] == pytest.approx(0.8244, abs=1e-4)


def test_mean_ci():
    mean, low, high = mean_ci([1.0, 2.0, 3.0])
    assert mean == 2.0
    # t_{0.975, 2} = 4.3027, sem = 1 / sqrt(3)
    assert high - mean == pytest.approx(4.302653 / np.sqrt(3), rel=1e-5)
    assert mean_ci([5.0, 5.0]) == (5.0, 5.0, 5.0)
    single = mean_ci([4.0])
    assert single[0] == 4.0 and np.isnan(single[1])
    assert mean_ci([np.nan, 1.0, 3.0])[0] == 2.0


def test_grid_defaults():
    grid = ScenarioGrid(axis="pi_sweep")
    assert grid.axis == "pi"
    assert grid.values == (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    assert (grid.n, grid.p, grid.d, grid.d0) == (300, 30, 3, 4)
    assert len(grid.cells()) == 8
    assert ScenarioGrid.desk("p").values == (10, 20, 30, 40, 50)
    paper = ScenarioGrid.paper("n")
    assert (paper.p, paper.replicates) == (250, 30)
    assert paper.values == (100, 200, 300, 400, 500, 600)


def test_grid_rejects_unknown_axis_and_values():
    with pytest.raises(ConfigurationError):
        ScenarioGrid(axis="rho", values=(1,)).cells()
    with pytest.raises(ConfigurationError):
        ScenarioGrid(axis="pi", values=(1.5,)).cells()
    with pytest.raises(ConfigurationError):
        grid_jobs(ScenarioGrid(axis="pi"), ["Magic"])


def test_method_config_roster():
    assert method_config("PLN", ZIVariant.ND, 10, 1e-6, 0).zi.variant == ZIVariant.NONE
    assert method_config("Standard", ZIVariant.ND, 10, 1e-6, 0).method == FitMethod.VEM
    assert method_config("EnhancedAnalytic", ZIVariant.CD, 10, 1e-6, 0).method == FitMethod.GRADIENT
    with pytest.raises(ConfigurationError):
        method_config("Magic", ZIVariant.ND, 10, 1e-6, 0)


def test_job_seeds_depend_only_on_position():
    grid = ScenarioGrid(axis="pi", values=(0.2, 0.4), replicates=3, seed=9)
    wider = ScenarioGrid(axis="pi", values=(0.2, 0.4), replicates=3, seed=9, n=50)
    seeds = [(j.scenario_seed, j.sample_seed) for j in grid_jobs(grid, ["PLN"])]
    assert seeds == [(j.scenario_seed, j.sample_seed) for j in grid_jobs(wider, ["Standard"])]
    assert len(set(seeds)) == 6


def test_failed_simulation_is_recorded():
    # GIVEN n = 2 samples but d = 3 covariate categories
    grid = ScenarioGrid(axis="n", values=(2,), replicates=1, p=3, d=3)
    job = grid_jobs(grid, ["Standard", "PLN"])[0]
    # WHEN the job runs
    records = run_job(job)
    # THEN every method gets a failed record instead of an exception
    assert [r.method for r in records] == ["Standard", "PLN"]
    assert all(r.status.startswith("failed: IdentifiabilityError") for r in records)
    assert all(np.isnan(r.rmse_sigma) for r in records)


def _small_grid():
    return ScenarioGrid(axis="pi", values=(0.3, 0.5), replicates=2, n=40, p=3, d=1, max_iters=15, seed=5)


@pytest.mark.asyncio
async def test_grid_run_is_independent_of_parallelism():
    methods = ("Standard", "StandardAnalytic", "PLN", "OraclePLN")
    serial = await run_scenario_grid(_small_grid(), methods, parallelism=1)
    with ThreadPoolExecutor(2) as pool:
        parallel = await run_scenario_grid(_small_grid(), methods, parallelism=2, executor=pool)

    def strip(records):
        return [{k: v for k, v in asdict(r).items() if k != "wall_time_s"} for r in records]

    assert len(serial) == 2 * 2 * len(methods)
    assert pd.DataFrame(strip(serial)).equals(pd.DataFrame(strip(parallel)))
    oracle = [r for r in serial if r.method == "OraclePLN"]
    assert all(np.isnan(r.recon_error) and np.isnan(r.rmse_pi) for r in oracle)
    standard = [r for r in serial if r.method == "Standard"]
    assert all(np.isfinite(r.rmse_pi) and 0.0 <= r.poisson_zero_rate <= 1.0 for r in standard)


def test_emit_report_files(tmp_path):
    records = [
        BenchRecord(scenario="pi=0.3", axis_value=0.3, replicate=r, method="Standard", rmse_sigma=v,
                    elbo=-10.0 * v, wall_time_s=0.1, axis="pi", poisson_zero_rate=0.05)
        for r, v in enumerate([1.0, 2.0, 4.0])
    ]
    records.append(BenchRecord(scenario="pi=0.3", axis_value=0.3, replicate=3, method="Standard",
                               status="failed: DivergenceError: boom", axis="pi"))
    paths = emit_report(records, str(tmp_path), {"seed": 1})
    frame = pd.read_csv(paths["records"])
    assert list(frame.columns[:4]) == ["scenario", "axis_value", "replicate", "method"]
    agg = pd.read_csv(paths["aggregate_pi"])
    assert agg.loc[0, "n_ok"] == 3 and agg.loc[0, "n_failed"] == 1
    assert agg.loc[0, "rmse_sigma_mean"] == pytest.approx(7.0 / 3.0)
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["seed"] == 1 and "pi_rmse_convention" in meta


def test_emit_report_single_record(tmp_path):
    record = BenchRecord(scenario="n=100", axis_value=100, replicate=0, method="PLN", rmse_sigma=0.5, axis="n")
    paths = emit_report([record], str(tmp_path))
    agg = pd.read_csv(paths["aggregate_n"])
    assert agg.loc[0, "rmse_sigma_mean"] == 0.5
    assert np.isnan(agg.loc[0, "rmse_sigma_ci_low"])
    with pytest.raises(ParameterError):
        emit_report([], str(tmp_path))


def test_aggregate_mean_is_raw_mean(rng):
    values = rng.uniform(size=6)
    records = [BenchRecord(scenario="g=1", axis_value=1.0, replicate=i, method="Enhanced", rmse_b=v, axis="gamma")
               for i, v in enumerate(values)]
    agg = aggregate(records_frame(records))
    assert agg.loc[0, "rmse_b_mean"] == pytest.approx(values.mean())
    assert agg.loc[0, "rmse_b_ci_low"] < values.mean() < agg.loc[0, "rmse_b_ci_high"]


@pytest.mark.slow
def test_zipln_beats_pln_on_b_with_heavy_inflation():
    # GIVEN pi = 0.7, where a plain PLN fit absorbs the zeros into B
    grid = ScenarioGrid(axis="pi", values=(0.7,), replicates=5, n=300, p=20, seed=3)
    records = records_frame(run_grid(grid, ("Standard", "PLN"), parallelism=1))
    means = records.groupby("method")["rmse_b"].mean()
    assert means["Standard"] < means["PLN"]


@pytest.mark.slow
def test_sigma_error_shrinks_with_n():
    grid = ScenarioGrid(axis="n", values=(100, 600), replicates=5, p=20, seed=4)
    records = records_frame(run_grid(grid, ("Standard",), parallelism=1))
    means = records.groupby("axis_value")["rmse_sigma"].mean()
    assert means[600] < means[100]


def test_methods_roster_is_complete():
    assert set(METHODS) == {"Standard", "Enhanced", "StandardAnalytic", "EnhancedAnalytic", "PLN", "OraclePLN"}


@pytest.mark.slow
def test_standard_pi_beats_the_observed_zero_fraction():
    # GIVEN pi = 0.3 and gamma = 2, where some zeros come from the Poisson part
    wins = 0
    for seed in range(10):
        scenario = scenario_params(ZIConfig(ZIVariant.ND), 300, 20, 3, 4, 2.0, 0.3, seed)
        data, _ = sample_dataset(scenario.params, scenario.design, 1000 + seed)
        result = fit(data, method_config("Standard", ZIVariant.ND, 500, 1e-6, seed))
        # THEN the fitted pi is closer to the truth than the share of zeros
        naive = abs(float(np.mean(data.Y == 0)) - 0.3)
        wins += abs(result.theta.pi - 0.3) < naive
    assert wins >= 8


@pytest.mark.slow
def test_pln_reconstructs_counts_best():
    grid = ScenarioGrid(axis="pi", replicates=1, n=200, p=15, seed=8, max_iters=300)
    zi_methods = ["Standard", "Enhanced", "StandardAnalytic", "EnhancedAnalytic"]
    records = records_frame(run_grid(grid, zi_methods + ["PLN"], parallelism=1))
    recon = records.pivot_table(index="axis_value", columns="method", values="recon_error")
    pln_wins = recon[zi_methods].ge(recon["PLN"], axis=0).all(axis=1)
    assert len(pln_wins) == 8
    assert pln_wins.mean() >= 0.7


@pytest.mark.slow
def test_oracle_pln_recovers_sigma_better_than_pln():
    grid = ScenarioGrid(axis="pi", values=(0.3, 0.5, 0.7), replicates=3, n=300, p=20, seed=6)
    records = records_frame(run_grid(grid, ("PLN", "OraclePLN"), parallelism=1))
    means = records.pivot_table(index="axis_value", columns="method", values="rmse_sigma")
    assert (means["OraclePLN"] <= means["PLN"]).sum() >= 2


@pytest.mark.slow
def test_rd_pi_error_drops_from_low_to_mid_inflation():
    grid = ScenarioGrid(axis="pi", values=(0.2, 0.5), replicates=5, n=300, p=30, zi=ZIVariant.RD, seed=12)
    records = records_frame(run_grid(grid, ("Standard",), parallelism=1))
    means = records.groupby("axis_value")["rmse_pi"].mean()
    assert means[0.5] < means[0.2]


@pytest.mark.slow
def test_b_error_drops_as_the_mean_grows():
    grid = ScenarioGrid(axis="gamma", values=(0.0, 3.0), replicates=5, n=300, p=30, seed=13)
    records = records_frame(run_grid(grid, ("Standard",), parallelism=1))
    means = records.groupby("axis_value")["rmse_b"].mean()
    assert means[3.0] < means[0.0]
