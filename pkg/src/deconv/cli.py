"""Command line front end: simulate, fit, evaluate, export-expectations.

Every subcommand writes a RunManifest next to its outputs, and every
stochastic output is fully determined by the resolved seed. Seed
resolution order: --seed flag, then the config's `seed` key, then the
NDM_SEED environment variable, then 0.

Exit codes: 0 success, 2 configuration problem, 3 data problem,
4 shape mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .config import get_seed, load_fit_settings, load_sim_spec, parse_config
from .dataio import (
    RunManifest,
    read_dataset,
    read_ground_truth,
    read_matrix_csv,
    write_dataset,
    write_ground_truth,
    write_matrix_csv,
)
from .errors import ConfigError, DataError, ShapeError
from .metrics import evaluate_estimates, evaluate_fit
from .model import Dataset
from .report import CHECKPOINT_NAME, FitReport, _jsonable, load_checkpoint
from .simulate import simulate
from .splitmerge import fit_nonparametric
from .vi import fit_parametric


def resolve_seed(flag_seed: Optional[int], config_seed: Optional[int]) -> int:
    if flag_seed is not None:
        return flag_seed
    if config_seed is not None:
        return config_seed
    env = os.environ.get("NDM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError("NDM_SEED must be an integer, got %r" % env)
    return 0


def check_family_support(family: str, y: np.ndarray) -> None:
    """The observation family's support can be stricter than the domain."""
    if family == "normal":
        bad = ~np.isfinite(y)
    elif family == "poisson":
        bad = (y < 0) | (y != np.floor(y))
    elif family == "gamma":
        bad = y <= 0
    else:  # beta density is unbounded at the endpoints, so they are out
        bad = (y <= 0) | (y >= 1)
    if bad.any():
        n, m = np.argwhere(bad)[0]
        raise DataError(
            "observation family %r cannot model y[%d, %d] = %r"
            % (family, n, m, y[n, m])
        )


def _config_snapshot(raw: dict) -> dict:
    return {key: value for key, (value, _) in raw.items()}


def _load_report(path: str) -> FitReport:
    try:
        return FitReport.load(path)
    except OSError as e:
        raise DataError("cannot read %s: %s" % (path, e))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError("%s is not a valid fit report: %s" % (path, e))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    raw = parse_config(args.config)
    seed = resolve_seed(args.seed, get_seed(raw, args.config))
    spec = load_sim_spec(args.config, seed=seed)
    manifest = RunManifest("simulate", seed, _config_snapshot(raw))
    manifest.add_input(args.config)

    out = simulate(spec)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "data.csv")
    written = write_dataset(data_path, out.dataset, out.warnings)
    truth_path = os.path.join(args.out, "ground_truth.json")
    write_ground_truth(truth_path, out.dataset.ground_truth)
    written.append(truth_path)

    manifest.add_outputs(written)
    manifest.write(os.path.join(args.out, "run_manifest.json"))
    print(
        "simulated %d observations x %d features (procedure %d, domain %s) -> %s"
        % (spec.n, spec.m, spec.procedure, out.dataset.domain, data_path)
    )
    for w in out.warnings:
        print("warning: %s" % w, file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# fit


def _apply_denominators(dataset: Dataset, path: str) -> Dataset:
    denom = read_matrix_csv(path)
    n, m = dataset.y.shape
    if denom.shape not in ((n, 1), (n, m)):
        raise ShapeError(
            "denominators are %dx%d, expected %dx1 or %dx%d"
            % (denom.shape[0], denom.shape[1], n, n, m)
        )
    if np.any(denom <= 0):
        i, j = np.argwhere(denom <= 0)[0]
        raise DataError("denominator at row %d col %d is not positive" % (i, j))
    return Dataset(y=dataset.y / denom, domain="unit")


def cmd_fit(args) -> int:
    raw = parse_config(args.config)
    settings = load_fit_settings(args.config)
    seed = resolve_seed(args.seed, settings.seed)
    manifest = RunManifest("fit", seed, _config_snapshot(raw))
    manifest.add_input(args.config)
    manifest.add_input(args.data)

    dataset = read_dataset(args.data)
    if args.counts_to_proportions:
        manifest.add_input(args.counts_to_proportions)
        dataset = _apply_denominators(dataset, args.counts_to_proportions)
    hp = settings.hyperparameters(dataset.n_features)
    check_family_support(hp.obs_family, dataset.y)

    opts = settings.options
    if args.no_splits:
        opts.enable_splits = False
    if args.no_merges:
        opts.enable_merges = False
    if args.checkpoint_every:
        opts.checkpoint_every = args.checkpoint_every
        opts.checkpoint_dir = args.out

    resume = None
    if args.resume:
        payload = load_checkpoint(args.out)
        if payload is None:
            raise ConfigError("--resume: no %s in %s" % (CHECKPOINT_NAME, args.out))
        mode = payload.get("mode", "parametric")
        if mode != args.mode:
            raise ConfigError(
                "checkpoint in %s is from a %s run, not %s" % (args.out, mode, args.mode)
            )
        if payload["seed"] != seed:
            raise ConfigError(
                "checkpoint seed %d does not match run seed %d" % (payload["seed"], seed)
            )
        if args.mode == "nonparametric" and payload.get("k0") != settings.k:
            raise ConfigError(
                "checkpoint started from k=%s, config says k=%d"
                % (payload.get("k0"), settings.k)
            )
        manifest.add_input(os.path.join(args.out, CHECKPOINT_NAME))
        resume = payload

    os.makedirs(args.out, exist_ok=True)
    limiter = contextlib.nullcontext()
    if args.threads:
        try:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        except ImportError:
            pass  # numerics are thread-count independent either way
    with limiter:
        if args.mode == "parametric":
            report = fit_parametric(hp, dataset, settings.k, opts, seed=seed, resume=resume)
        else:
            report = fit_nonparametric(hp, dataset, settings.k, opts, seed=seed, resume=resume)

    fit_path = os.path.join(args.out, "fit.json")
    report.save(fit_path)
    outputs = [fit_path]
    if opts.checkpoint_every and os.path.exists(os.path.join(args.out, CHECKPOINT_NAME)):
        outputs.append(os.path.join(args.out, CHECKPOINT_NAME))
    manifest.config["threads"] = args.threads
    manifest.add_outputs(outputs)
    manifest.write(os.path.join(args.out, "run_manifest.json"))
    print(
        "%s fit: %d factors, converged=%s after %d iterations, final elbo %.4f -> %s"
        % (report.mode, report.n_factors, report.converged, report.iterations,
           report.elbo_trace[-1], fit_path)
    )
    for w in report.warnings:
        print("warning: %s" % w, file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _read_estimates_dir(dirpath: str, manifest: RunManifest) -> dict:
    mu_path = os.path.join(dirpath, "mu.csv")
    if not os.path.exists(mu_path):
        raise DataError("estimates directory %s has no mu.csv" % dirpath)
    mu = read_matrix_csv(mu_path)
    manifest.add_input(mu_path)
    k, m = mu.shape
    est = {"mu_hat": mu}

    beta_path = os.path.join(dirpath, "beta.csv")
    if os.path.exists(beta_path):
        beta = read_matrix_csv(beta_path).ravel()
        manifest.add_input(beta_path)
        if beta.shape[0] == k + 1:
            beta = beta[:-1]  # trailing remainder mass
        elif beta.shape[0] != k:
            raise ShapeError(
                "beta.csv has %d values for %d factors (expected %d or %d)"
                % (beta.shape[0], k, k, k + 1)
            )
        est["beta_hat"] = beta

    pi_path = os.path.join(dirpath, "pi.csv")
    if os.path.exists(pi_path):
        pi = read_matrix_csv(pi_path)
        manifest.add_input(pi_path)
        if pi.shape[1] != k:
            raise ShapeError(
                "pi.csv has %d columns for %d factors" % (pi.shape[1], k)
            )
        est["pi_hat"] = pi

    xbar_path = os.path.join(dirpath, "xbar.csv")
    if os.path.exists(xbar_path):
        xbar = read_matrix_csv(xbar_path)
        manifest.add_input(xbar_path)
        if xbar.shape[1] != k * m:
            raise ShapeError(
                "xbar.csv has %d columns, expected %d (K*M)" % (xbar.shape[1], k * m)
            )
        est["xbar_hat"] = xbar.reshape(xbar.shape[0], k, m)
    return est


def _manifest_sidecar(out_path: str) -> str:
    base = out_path[:-5] if out_path.endswith(".json") else out_path
    return base + ".run_manifest.json"


def cmd_evaluate(args) -> int:
    manifest = RunManifest("evaluate", None)
    truth = read_ground_truth(args.truth)
    manifest.add_input(args.truth)
    try:
        if args.fit:
            report = _load_report(args.fit)
            manifest.add_input(args.fit)
            metrics = evaluate_fit(report.state, truth)
        else:
            est = _read_estimates_dir(args.estimates_dir, manifest)
            metrics = evaluate_estimates(truth, **est)
    except ValueError as e:
        raise ShapeError(str(e))

    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_outputs([args.out])
    manifest.write(_manifest_sidecar(args.out))
    print(
        "matched %d factors: nrmse_mu=%s cosine_beta=%s cosine_pi=%s -> %s"
        % (metrics["n_matched"], metrics["nrmse_mu"], metrics["cosine_beta"],
           metrics["cosine_pi"], args.out)
    )
    return 0


# ---------------------------------------------------------------------------
# export-expectations


def cmd_export(args) -> int:
    report = _load_report(args.fit)
    manifest = RunManifest("export-expectations", None)
    manifest.add_input(args.fit)
    ex = report.expectations()
    k, m = ex["mu"].shape
    n = ex["pi"].shape[0]
    os.makedirs(args.out, exist_ok=True)

    written = []

    def put(name, matrix, header):
        path = os.path.join(args.out, name)
        write_matrix_csv(path, matrix, header)
        written.append(path)

    put("mu.csv", ex["mu"], ["m%d" % j for j in range(m)])
    put("beta.csv", ex["beta"].reshape(-1, 1), ["beta"])  # K+1 rows, remainder last
    put("pi.csv", ex["pi"], ["k%d" % j for j in range(k)])
    put("p.csv", ex["p"].reshape(-1, 1), ["p"])
    put("sigma.csv", ex["sigma"].reshape(k, m * m),
        ["m%d_m%d" % (i, j) for i in range(m) for j in range(m)])
    put("xbar.csv", ex["xbar"].reshape(n, k * m),
        ["k%d_m%d" % (kk, j) for kk in range(k) for j in range(m)])

    manifest.add_outputs(written)
    manifest.write(os.path.join(args.out, "run_manifest.json"))
    print("exported expectations for %d factors to %s" % (k, args.out))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deconv",
        description="Deconvolution mixed-membership models: simulate, fit, evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic convolved dataset")
    sim.add_argument("--config", required=True, help="key=value simulation config")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit a deconvolution model")
    fit.add_argument("--config", required=True, help="key=value fit config")
    fit.add_argument("--data", required=True, help="dataset CSV")
    fit.add_argument("--mode", choices=("parametric", "nonparametric"),
                     default="parametric")
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                     help="checkpoint every N iterations (cycles in nonparametric mode)")
    fit.add_argument("--resume", action="store_true",
                     help="resume from the checkpoint in --out")
    fit.add_argument("--no-splits", action="store_true",
                     help="disable split moves (nonparametric mode)")
    fit.add_argument("--no-merges", action="store_true",
                     help="disable merge moves (nonparametric mode)")
    fit.add_argument("--threads", type=int, default=None,
                     help="cap BLAS thread pools; results do not depend on this")
    fit.add_argument("--counts-to-proportions", metavar="DENOM_CSV", default=None,
                     help="divide counts by per-row (or per-entry) denominators "
                          "and treat the result as unit-domain data")
    fit.set_defaults(func=cmd_fit)

    ev = sub.add_parser("evaluate", help="score estimates against ground truth")
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--fit", help="fit report JSON")
    src.add_argument("--estimates-dir",
                     help="directory with mu.csv (+ optional beta.csv, pi.csv, xbar.csv)")
    ev.add_argument("--truth", required=True, help="ground truth JSON")
    ev.add_argument("--out", required=True, help="metrics JSON path")
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("export-expectations",
                        help="flatten posterior expectations to CSV")
    ex.add_argument("--fit", required=True, help="fit report JSON")
    ex.add_argument("--out", required=True, help="output directory")
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except DataError as e:
        print("data error: %s" % e, file=sys.stderr)
        return 3
    except ShapeError as e:
        print("shape error: %s" % e, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
