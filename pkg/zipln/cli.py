import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .config import Settings
from .elbo import ElboFamily, ElboVariant
from .errors import ConfigurationError, ZiplnError
from .io import (
    RunManifest,
    check_fingerprint,
    design_matrix,
    load_criteria,
    load_matrix,
    pca_project,
    prevalence_filter,
    read_count_table,
    read_matrix,
    read_table,
    save_fit,
    total_count_offsets,
    write_matrix,
)
from .model import CountDataset, Design, ZIConfig, ZIVariant, sample_dataset, scenario_params
from .optim import FitConfig, FitMethod, fit
from .selection import compare_models, criteria
from .simbench import METHODS, ScenarioGrid, emit_report, grid_metadata, run_grid
from .utils import coerce_seed, fingerprint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2


def _shared(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=Settings.SEED)
    parser.add_argument("--out", default=Settings.OUT_DIR, help="output directory")
    parser.add_argument("--zi", choices=[v.value for v in ZIVariant], default=ZIVariant.ND.value)
    parser.add_argument("--method", choices=[m.value for m in FitMethod], default=FitMethod.VEM.value)
    parser.add_argument("--elbo", choices=[f.value for f in ElboFamily], default=ElboFamily.STANDARD.value)
    parser.add_argument("--analytic-p", action="store_true", help="tie P to the analytic posterior of W")
    parser.add_argument("--max-iters", type=int, default=Settings.MAX_ITERS)
    parser.add_argument("--tol", type=float, default=Settings.TOL)
    parser.add_argument("--jobs", type=int, default=Settings.JOBS)
    parser.add_argument("--log-level", default=Settings.LOG_LEVEL)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zipln", description="Zero-inflated Poisson log-normal models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model on a count table")
    _shared(p_fit)
    p_fit.add_argument("counts", help="CSV: sample id column, one column per variable")
    p_fit.add_argument("--covariates", help="CSV of sample covariates for the PLN component")
    p_fit.add_argument("--formula", help="terms of --covariates, e.g. 'site + depth' or 'site:time'")
    p_fit.add_argument("--intercept", action="store_true", help="add an intercept to the PLN design")
    p_fit.add_argument("--zi-covariates",
                       help="CSV of ZI covariates: per sample for cd, per variable for rd")
    p_fit.add_argument("--zi-formula", help="terms of --zi-covariates")
    p_fit.add_argument("--zi-intercept", action="store_true", help="add an intercept to the ZI design")
    offsets = p_fit.add_mutually_exclusive_group()
    offsets.add_argument("--offsets", help="CSV of offsets, same layout as the counts")
    offsets.add_argument("--offset-total-counts", action="store_true", help="o_ij = log of the sample total")
    p_fit.add_argument("--min-prevalence", type=float, default=0.0,
                       help="drop variables present in fewer samples than this fraction")
    p_fit.add_argument("--learning-rate", type=float, default=Settings.LEARNING_RATE)
    p_fit.add_argument("--minibatch", type=int, default=None, help="rows per minibatch (gradient ascent)")
    p_fit.set_defaults(handler=cmd_fit)

    p_sim = sub.add_parser("simulate", help="simulate a dataset and its ground truth")
    _shared(p_sim)
    p_sim.add_argument("--n", type=int, default=300)
    p_sim.add_argument("--p", type=int, default=30)
    p_sim.add_argument("--d", type=int, default=3)
    p_sim.add_argument("--d0", type=int, default=4)
    p_sim.add_argument("--pi", type=float, default=0.3, help="inflation level (rho for cd/rd)")
    p_sim.add_argument("--gamma", type=float, default=2.0, help="mean of the regression coefficients")
    p_sim.set_defaults(handler=cmd_simulate)

    p_bench = sub.add_parser("bench", help="run a simulation grid")
    _shared(p_bench)
    p_bench.add_argument("--axis", choices=["pi", "gamma", "n", "p"], required=True)
    scale = p_bench.add_mutually_exclusive_group()
    scale.add_argument("--desk", action="store_true", help="desk-scale grid (default)")
    scale.add_argument("--paper-scale", action="store_true", help="n = 1000, p = 250, 30 replicates")
    p_bench.add_argument("--replicates", type=int, default=None)
    p_bench.add_argument("--values", help="comma-separated axis values")
    p_bench.add_argument("--methods", default=",".join(METHODS), help="comma-separated subset of the roster")
    p_bench.set_defaults(handler=cmd_bench)

    p_cmp = sub.add_parser("compare", help="compare fitted models by AIC, BIC and ICL")
    p_cmp.add_argument("fit_dirs", nargs="+")
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--counts", help="count CSV the fits must have been computed on")
    p_cmp.add_argument("--log-level", default=Settings.LOG_LEVEL)
    p_cmp.set_defaults(handler=cmd_compare)

    p_proj = sub.add_parser("project", help="principal components of the latent means")
    p_proj.add_argument("fit_dir")
    p_proj.add_argument("--k", type=int, default=2)
    p_proj.add_argument("--out", default=None)
    p_proj.add_argument("--log-level", default=Settings.LOG_LEVEL)
    p_proj.set_defaults(handler=cmd_project)

    p_rep = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p_rep.add_argument("manifest")
    p_rep.add_argument("--log-level", default=Settings.LOG_LEVEL)
    p_rep.set_defaults(handler=cmd_replay)
    return parser


def _zi_config(args) -> ZIConfig:
    return ZIConfig(variant=ZIVariant(args.zi), pln_intercept=getattr(args, "intercept", False),
                    zi_intercept=getattr(args, "zi_intercept", False))


def _fit_config(args, zi: ZIConfig) -> FitConfig:
    return FitConfig(
        method=FitMethod(args.method),
        elbo_variant=ElboVariant(ElboFamily(args.elbo), args.analytic_p),
        zi=zi,
        max_iters=args.max_iters,
        rel_tol=args.tol,
        learning_rate=getattr(args, "learning_rate", Settings.LEARNING_RATE),
        minibatch_size=getattr(args, "minibatch", None),
        seed=coerce_seed(args.seed),
    )


def _manifest(args, argv: List[str], **extra) -> RunManifest:
    return RunManifest(command=args.command, argv=list(argv), out_dir=os.path.abspath(args.out),
                       seed=args.seed, **extra)


def _load_dataset(args):
    counts = read_count_table(args.counts)
    if args.min_prevalence > 0:
        counts = prevalence_filter(counts, args.min_prevalence)
    samples, variables = list(counts.index), list(counts.columns)
    Y = counts.to_numpy()
    n, p = Y.shape
    X = None
    if args.covariates:
        if not args.formula:
            raise ConfigurationError("--covariates needs --formula")
        X, _ = design_matrix(read_table(args.covariates, samples), args.formula, args.intercept, args.covariates)
    elif args.intercept:
        raise ConfigurationError("--intercept only applies together with --covariates")
    X0 = X0bar = None
    zi = ZIVariant(args.zi)
    if args.zi_covariates:
        if zi not in (ZIVariant.CD, ZIVariant.RD):
            raise ConfigurationError("--zi-covariates only applies to --zi cd or rd")
        if not args.zi_formula:
            raise ConfigurationError("--zi-covariates needs --zi-formula")
        ids = samples if zi == ZIVariant.CD else variables
        mat, _ = design_matrix(read_table(args.zi_covariates, ids), args.zi_formula, args.zi_intercept,
                               args.zi_covariates)
        if zi == ZIVariant.CD:
            X0 = mat
        else:
            X0bar = mat.T
    elif zi == ZIVariant.CD:
        # one probability per variable
        X0 = np.ones((n, 1))
        args.zi_intercept = False
    elif zi == ZIVariant.RD:
        # one probability per sample
        X0bar = np.ones((1, p))
        args.zi_intercept = False
    if args.offsets:
        O = read_matrix(args.offsets).reindex(index=samples, columns=variables)
        if O.isna().any().any():
            raise ConfigurationError(f"{args.offsets} does not cover every sample and variable of the counts")
        O = O.to_numpy()
    elif args.offset_total_counts:
        O = total_count_offsets(Y)
    else:
        O = None
    data = CountDataset(Y=Y, design=Design.build(n, p, X=X, O=O, X0=X0, X0bar=X0bar))
    return data, samples, variables


def cmd_fit(args, argv: List[str]) -> int:
    data, samples, variables = _load_dataset(args)
    zi = _zi_config(args)
    config = _fit_config(args, zi)
    config.validate(data.n)
    result = fit(data, config)
    row = criteria(result, data, name=os.path.basename(os.path.normpath(args.out)))
    save_fit(args.out, result, data, row, samples, variables)
    inputs = {k: os.path.abspath(v) for k, v in (("counts", args.counts), ("covariates", args.covariates),
                                                   ("zi_covariates", args.zi_covariates),
                                                   ("offsets", args.offsets)) if v}
    _manifest(args, argv, inputs=inputs, zi={"variant": zi.variant.value, "pln_intercept": zi.pln_intercept,
                                             "zi_intercept": zi.zi_intercept},
              fit={"method": config.method.value, "elbo_variant": config.elbo_variant.name,
                   "max_iters": config.max_iters, "rel_tol": config.rel_tol,
                   "learning_rate": config.learning_rate, "minibatch_size": config.minibatch_size},
              fingerprint=fingerprint(data.Y)).save()
    print(f"ELBO {result.elbo:.6f}  K {row.K}  AIC {row.AIC:.4f}  BIC {row.BIC:.4f}  ICL {row.ICL:.4f}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _check_simulation_flags(args, zi: ZIVariant):
    if min(args.n, args.p, args.d) < 1:
        raise ConfigurationError("--n, --p and --d must be positive")
    if zi in (ZIVariant.CD, ZIVariant.RD):
        if not 0.0 < args.pi < 1.0:
            raise ConfigurationError(f"--pi must lie in (0, 1) for --zi {zi.value}, got {args.pi}")
        if args.d0 < 1:
            raise ConfigurationError(f"--d0 must be positive for --zi {zi.value}")
    elif not 0.0 <= args.pi <= 1.0:
        raise ConfigurationError(f"--pi must lie in [0, 1], got {args.pi}")
    coerce_seed(args.seed)


def cmd_simulate(args, argv: List[str]) -> int:
    zi = ZIVariant(args.zi)
    _check_simulation_flags(args, zi)
    if zi == ZIVariant.NONE:
        zi_cfg = ZIConfig(ZIVariant.ND)
        rho = 0.0
    else:
        zi_cfg = ZIConfig(zi)
        rho = args.pi
    scenario = scenario_params(zi_cfg, args.n, args.p, args.d, args.d0, args.gamma, rho, args.seed)
    data, latent = sample_dataset(scenario.params, scenario.design, np.random.SeedSequence(args.seed).spawn(1)[0])
    os.makedirs(args.out, exist_ok=True)
    samples = [f"s{i}" for i in range(args.n)]
    variables = [f"v{j}" for j in range(args.p)]
    design = scenario.design
    theta = scenario.params
    write_matrix(os.path.join(args.out, "Y.csv"), data.Y, samples, variables)
    write_matrix(os.path.join(args.out, "T.csv"), latent.T, samples, variables)
    write_matrix(os.path.join(args.out, "W.csv"), latent.W, samples, variables)
    write_matrix(os.path.join(args.out, "Z.csv"), latent.Z, samples, variables)
    write_matrix(os.path.join(args.out, "O.csv"), design.O, samples, variables)
    write_matrix(os.path.join(args.out, "X.csv"), design.X, samples, [f"x{k}" for k in range(design.d)])
    write_matrix(os.path.join(args.out, "sigma.csv"), theta.sigma, variables, variables)
    write_matrix(os.path.join(args.out, "omega.csv"), theta.omega, variables, variables)
    write_matrix(os.path.join(args.out, "B.csv"), theta.B, [f"x{k}" for k in range(design.d)], variables)
    write_matrix(os.path.join(args.out, "pi.csv"), theta.pi_matrix(design), samples, variables)
    if design.X0 is not None:
        write_matrix(os.path.join(args.out, "X0.csv"), design.X0, samples, [f"x0_{k}" for k in range(design.d0)])
        write_matrix(os.path.join(args.out, "B0.csv"), theta.zi, [f"x0_{k}" for k in range(design.d0)], variables)
    if design.X0bar is not None:
        write_matrix(os.path.join(args.out, "X0bar.csv"), design.X0bar.T, variables,
                     [f"x0_{k}" for k in range(design.d0)])
        write_matrix(os.path.join(args.out, "B0bar.csv"), theta.zi, samples, [f"x0_{k}" for k in range(design.d0)])
    truth = {"alpha": scenario.alpha, "zi": zi.value, "pi": rho, "gamma": args.gamma,
             "n": args.n, "p": args.p, "d": args.d, "d0": args.d0}
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
    _manifest(args, argv, zi={"variant": zi.value}, fingerprint=fingerprint(data.Y)).save()
    logger.info(f"Simulated {args.n} x {args.p} counts into {args.out} "
                f"({float(np.mean(data.Y == 0)):.1%} zeros)")
    return EXIT_OK


def cmd_bench(args, argv: List[str]) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    overrides = dict(zi=ZIVariant(args.zi), seed=args.seed, max_iters=args.max_iters, rel_tol=args.tol)
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    if args.values:
        overrides["values"] = tuple(float(v) for v in args.values.split(","))
    if args.paper_scale:
        grid = ScenarioGrid.paper(args.axis, **overrides)
    else:
        grid = ScenarioGrid.desk(args.axis, **overrides)
    records = run_grid(grid, methods, parallelism=args.jobs)
    emit_report(records, args.out, metadata={"grid": grid_metadata(grid)})
    _manifest(args, argv, zi={"variant": grid.zi.value}, fit={"methods": methods}).save()
    frame = pd.DataFrame([{"scenario": r.scenario, "method": r.method, "status": r.status} for r in records])
    print(frame.groupby(["scenario", "method"], sort=False)["status"]
          .apply(lambda s: f"{(s != 'ok').sum()} not ok / {len(s)}").to_string())
    return EXIT_OK


def cmd_compare(args, argv: List[str]) -> int:
    rows = [load_criteria(d) for d in args.fit_dirs]
    for d, row in zip(args.fit_dirs, rows):
        row.name = os.path.basename(os.path.normpath(d))
    if args.counts:
        Y = read_count_table(args.counts).to_numpy()
        for d in args.fit_dirs:
            check_fingerprint(d, Y)
    report = compare_models(rows)
    print(report.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.to_csv(os.path.join(args.out, "comparison.csv"))
        with open(os.path.join(args.out, "comparison.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        RunManifest(command="compare", argv=list(argv), out_dir=os.path.abspath(args.out),
                    inputs={f"fit{i}": os.path.abspath(d) for i, d in enumerate(args.fit_dirs)},
                    fingerprint=rows[0].fingerprint).save()
    return EXIT_OK


def cmd_project(args, argv: List[str]) -> int:
    M = load_matrix(args.fit_dir, "M")
    projection = pca_project(M.to_numpy(), args.k)
    out = args.out or os.path.join(args.fit_dir, "projection")
    os.makedirs(out, exist_ok=True)
    pcs = [f"PC{k + 1}" for k in range(projection.k)]
    write_matrix(os.path.join(out, "scores.csv"), projection.scores, list(M.index), pcs)
    write_matrix(os.path.join(out, "loadings.csv"), projection.loadings, list(M.columns), pcs)
    write_matrix(os.path.join(out, "explained.csv"), projection.explained, pcs, ["explained_variance"],
                 index_label="component")
    RunManifest(command="project", argv=list(argv), out_dir=os.path.abspath(out),
                inputs={"fit_dir": os.path.abspath(args.fit_dir)}).save()
    print(pd.Series(projection.explained, index=pcs, name="explained_variance").to_string())
    return EXIT_OK


def cmd_replay(args, argv: List[str]) -> int:
    manifest = RunManifest.load(args.manifest)
    logger.info(f"Replaying {manifest.command} from {args.manifest} in {manifest.cwd}")
    here = os.getcwd()
    os.chdir(manifest.cwd)
    try:
        return run(manifest.argv)
    finally:
        os.chdir(here)


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s [%(levelname)s] %(message)s")
    try:
        Settings.validate()
        return args.handler(args, argv)
    except ZiplnError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 1


def main():
    """Entry point for the `zipln` console script and `python -m zipln.cli`."""
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        logger.info("Received keyboard interrupt, exiting.")
        sys.exit(130)


if __name__ == "__main__":
    main()
