"""Command-line surface.

Subcommands: fit, simulate, study, summarize, geweke.  Exit codes: 0 on
success, 1 on validation problems (bad flags, bad files, bad config), 2 on
numerical failures during fitting.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import causal, dataio, diagnostics
from .errors import NumericalError, ValidationError
from .harness import load_manifest, run_study
from .rng import RngStream
from .samplers import PosteriorDraws, run_chain
from .simgen import SimTruth, generate_dataset


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmfa", description="Causal mixed-outcome factor analysis")
    sub = p.add_subparsers(dest="command")

    fit = sub.add_parser("fit", parents=[], help="fit the model and write effect tables")
    fit.add_argument("--data", required=True, help="outcomes CSV")
    fit.add_argument("--treatment", required=True, help="treatment-times CSV")
    fit.add_argument("--covariates", default=None)
    fit.add_argument("--config", default=None, help="key=value fit configuration file")
    fit.add_argument("--iters", type=int, default=None)
    fit.add_argument("--thin", type=int, default=None)
    fit.add_argument("--burnin", type=int, default=None, help="burn-in draws to discard")
    fit.add_argument("--max-factors", type=int, default=None)
    fit.add_argument("--chains", type=int, default=None)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--out-dir", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    sim.add_argument("--scenario", default=None, help="key=value scenario file")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out-dir", required=True)

    study = sub.add_parser("study", help="run the simulation study")
    study.add_argument("--manifest", required=True, help="JSON study manifest")
    study.add_argument("--out-dir", required=True)
    study.add_argument("--jobs", type=int, default=None)
    study.add_argument("--resume", action="store_true",
                       help="skip (dataset, analysis) tasks whose output file exists")

    summ = sub.add_parser("summarize", help="recompute effect tables from persisted draws")
    summ.add_argument("--draws", required=True, help="directory written by fit")
    summ.add_argument("--out-dir", required=True)

    gw = sub.add_parser("geweke", help="joint-distribution sampler self-test")
    gw.add_argument("--seed", type=int, default=0)
    gw.add_argument("--samples", type=int, default=20_000)
    gw.add_argument("--out", required=True, help="z-score panel CSV path")
    return p


def _effects_pipeline(draws_list, data, seed, out_dir):
    """Counterfactuals, effect summaries and all result files for a fit."""
    merged = _concat_draws(draws_list)
    cf = causal.predict_counterfactuals(merged, data, RngStream(seed, (777,)))
    effects = causal.compute_effects(cf, data)
    summaries = causal.summarize_effects(effects, data)
    names_mat = causal.rank_correlations(effects, data)
    dataio.write_effects(summaries, names_mat, out_dir)
    dataio.write_probability_bands(causal.probability_bands(cf, data),
                                   Path(out_dir) / "probabilities.csv")
    return merged


def _concat_draws(chains: list[PosteriorDraws]) -> PosteriorDraws:
    if len(chains) == 1:
        return chains[0]
    kw = {}
    for f in ("loadings", "f_factors", "g_factors", "h_factors", "eta1", "eta2",
              "eta3", "noise_var", "dispersion", "factor_var", "anchor"):
        kw[f] = np.concatenate([getattr(c, f) for c in chains], axis=0)
    return PosteriorDraws(config=chains[0].config, seed=chains[0].seed, **kw)


def cmd_fit(args) -> int:
    config = dataio.fit_config_from_file(
        args.config, iterations=args.iters, thin=args.thin,
        burn_in_draws=args.burnin, max_factors=args.max_factors,
        chains=args.chains, seed=args.seed)
    data = dataio.load_dataset(args.data, args.treatment, args.covariates)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chains = []
    for c in range(config.chains):
        chains.append(run_chain(
            data, config, RngStream(config.seed, (c,)), chain_id=c,
            checkpoint_path=str(out_dir / f"checkpoint_chain{c}.bin")))
    merged = _effects_pipeline(chains, data, config.seed, out_dir)
    dataio.write_draws(merged, out_dir / "param_draws.csv")
    dataio.write_dataset(data, out_dir / "dataset")
    dataio.write_config_echo(config, out_dir / "config_echo.txt")
    diag = diagnostics.compute_chain_diagnostics(chains)
    dataio.write_diagnostics(diag, out_dir)
    print(f"fit complete: {merged.n_draws} retained draws over {config.chains} chain(s)")
    print(f"results in {out_dir}")
    return 0


def cmd_simulate(args) -> int:
    scenario = dataio.scenario_from_file(args.scenario, seed=args.seed)
    data, truth = generate_dataset(scenario)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset(data, out_dir)
    _write_truth(truth, data, out_dir)
    with open(out_dir / "scenario_echo.txt", "w") as fh:
        from dataclasses import asdict
        for k, v in asdict(scenario).items():
            fh.write(f"{k}={v}\n")
    print(f"dataset written to {out_dir} "
          f"({data.N} units, {data.T} periods, {data.n_treated} treated)")
    return 0


def _write_truth(truth: SimTruth, data, out_dir):
    import csv as _csv
    with open(Path(out_dir) / "truth_cells.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["unit", "time", "mu", "p", "q", "y0", "k0", "z0",
                         "alpha_true", "beta_true", "gamma_true", "delta_true"])
        for i, u in enumerate(data.unit_labels):
            for t in range(data.T):
                writer.writerow([
                    u, t + 1,
                    format(truth.mu[i, t], ".17g"), format(truth.p[i, t], ".17g"),
                    format(truth.q[i, t], ".17g"), format(truth.y0[i, t], ".17g"),
                    int(truth.k0[i, t]), int(truth.z0[i, t]),
                    format(truth.alpha_true[i, t], ".17g"),
                    format(truth.beta_true[i, t], ".17g"),
                    format(truth.gamma_true[i, t], ".17g"),
                    format(truth.delta_true[i, t], ".17g"),
                ])
    np.savez(Path(out_dir) / "truth_params.npz",
             loadings=truth.loadings, f_path=truth.f_path, g_path=truth.g_path,
             h_path=truth.h_path, last_untreated=truth.last_untreated,
             noise_var=truth.noise_var, dispersion=truth.dispersion)


def cmd_study(args) -> int:
    study = load_manifest(args.manifest)
    jobs = args.jobs
    if jobs is None:
        jobs = int(os.environ.get("CMFA_THREADS", "1"))
    metrics, failures = run_study(study, args.out_dir, jobs=jobs,
                                  resume=bool(getattr(args, "resume", False)),
                                  progress=lambda b, a: print(f"done dataset {b} {a}",
                                                              flush=True))
    print(f"study complete: {len(metrics)} metric rows, {len(failures)} failed tasks")
    return 0


def cmd_summarize(args) -> int:
    src = Path(args.draws)
    config = dataio.fit_config_from_file(src / "config_echo.txt")
    data = dataio.load_dataset(src / "dataset" / "outcomes.csv",
                               src / "dataset" / "treatment.csv",
                               (src / "dataset" / "covariates.csv")
                               if (src / "dataset" / "covariates.csv").exists() else None)
    draws = dataio.read_draws(src / "param_draws.csv", config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _effects_pipeline([draws], data, config.seed, out_dir)
    print(f"summaries written to {out_dir}")
    return 0


def cmd_geweke(args) -> int:
    res = diagnostics.geweke_test(samples=args.samples, seed=args.seed)
    import csv as _csv
    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["statistic", "z", "prior_mean", "chain_mean"])
        for name, z, pm, cm in zip(res.names, res.z_scores, res.prior_means,
                                   res.chain_means):
            writer.writerow([name, format(z, ".17g"), format(pm, ".17g"),
                             format(cm, ".17g")])
    status = "PASS" if res.passed() else "FAIL"
    print(f"geweke panel: {res.fraction_within_4:.0%} of statistics within |z|<4 "
          f"(max |z| = {res.max_abs_z:.2f}) -> {status}")
    return 0 if res.passed() else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    handler = {"fit": cmd_fit, "simulate": cmd_simulate, "study": cmd_study,
               "summarize": cmd_summarize, "geweke": cmd_geweke}[args.command]
    try:
        return handler(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
