"""Command-line entry point: ``antianneal {generate,fit,diagnose,bench,dpmm}``."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..anneal import NO_PERTURBATION, AnnealSchedule, PerturbPolicy
from ..diagnostics import (BasinEscapeError, empirical_em_rate, loglik_surface_slice,
                           overlap_matrix, projected_hessian_condition)
from ..dpmm import dpmm_fit, effective_components
from ..mixture import MixtureModel
from .config import ConfigError, load_config, load_model_spec
from .data import ingest_idx, pca_project, read_dataset, sample_mixture, sample_sizes, write_dataset
from .experiment import run_experiment

log = logging.getLogger("antianneal")


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def cmd_generate(args) -> int:
    if args.idx:
        X = ingest_idx(args.idx)
        if args.pca:
            X = pca_project(X, args.pca)
    else:
        model, sizes = load_model_spec(args.model)
        if args.sizes:
            X = sample_sizes(model, [int(s) for s in _floats(args.sizes)], args.seed)
        elif args.n:
            X = sample_mixture(model, args.n, args.seed)
        elif sizes:
            X = sample_sizes(model, sizes, args.seed)
        else:
            raise ConfigError("model has no default sizes; pass --n or --sizes")
    write_dataset(args.output, X, binary=args.binary)
    log.info("wrote %d x %d dataset to %s", X.shape[0], X.shape[1], args.output)
    return 0


def _summary_line(summary):
    if "error" in summary:
        e = summary["error"]
        return f"mean final err {e['mean_final']:.6g}, best {e['best_final']:.6g}"
    if "effective_components" in summary:
        return f"effective components per run {summary['effective_components']['per_run']}"
    return f"{len(summary['runs'])} runs"


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    if args.replications:
        cfg.replications = args.replications
    if args.seed is not None:
        cfg.master_seed = args.seed
    summary = run_experiment(cfg, args.output)
    print(f"{cfg.algorithm.name}: {_summary_line(summary)}; failures {summary['failures']}")
    return 0 if summary["failures"] < len(summary["runs"]) else 1


def _two_component(alpha1, mu1, mu2, var):
    return MixtureModel([alpha1, 1 - alpha1], [[mu1], [mu2]], [[[var]], [[var]]])


def cmd_diagnose(args) -> int:
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    if args.surface:
        model, sizes = load_model_spec(args.surface)
        X = sample_mixture(model, args.n, args.seed) if args.n else sample_sizes(model, sizes, args.seed)
        grid = np.linspace(args.grid_min, args.grid_max, args.grid_points)
        surface = loglik_surface_slice(X, model, grid, grid)
        w.writerow(["mu_a", "mu_b", "loglik"])
        for a, ga in enumerate(grid):
            for b, gb in enumerate(grid):
                w.writerow([repr(float(ga)), repr(float(gb)), repr(float(surface[a, b]))])
    else:
        w.writerow(["alpha1", "mu1", "kappa", "max_overlap", "rate"])
        for mu1 in _floats(args.mu1):
            for alpha1 in _floats(args.alpha1):
                truth = _two_component(alpha1, mu1, args.mu2, args.var)
                X = sample_mixture(truth, args.n, args.seed)
                kappa = projected_hessian_condition(X, truth).condition_number
                overlap = overlap_matrix(X, truth).max_overlap
                rate = ""
                if args.rate:
                    try:
                        rate = repr(empirical_em_rate(X, truth))
                    except BasinEscapeError as exc:
                        log.warning("alpha1=%g mu1=%g: %s", alpha1, mu1, exc)
                w.writerow([repr(alpha1), repr(mu1), repr(kappa), repr(overlap), rate])
    if out is not sys.stdout:
        out.close()
    return 0


def cmd_bench(args) -> int:
    base = load_config(args.config)
    root = Path(args.output or base.output)
    rows = []
    for name in args.algorithms.split(","):
        cfg = copy.deepcopy(base)
        cfg.algorithm.name = name.strip()
        cfg.algorithm.tol = None
        summary = run_experiment(cfg.validate(), str(root / cfg.algorithm.name))
        err = summary.get("error", {})
        rows.append([cfg.algorithm.name, summary["failures"], err.get("mean_final", ""),
                     err.get("best_final", "")])
        print(f"{cfg.algorithm.name}: {_summary_line(summary)}")
    with open(root / "bench.csv", "w", newline="") as fh:
        fh.write("# schema_version=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "failures", "mean_final_err", "best_final_err"])
        w.writerows(rows)
    return 0


def cmd_dpmm(args) -> int:
    X = read_dataset(args.data)
    schedule = AnnealSchedule(tuple(_floats(args.schedule or "1")), inner_tol=args.tol)
    policy = PerturbPolicy(args.epsilon) if args.schedule and args.epsilon > 0 else NO_PERTURBATION
    elbos = []
    state, trace = dpmm_fit(X, args.truncation, schedule, args.concentration, args.seed, policy,
                            callback=lambda k, beta, st, bound: elbos.append(
                                {"iteration": k, "beta": beta, "elbo": bound}))
    result = {
        "schema_version": 1,
        "trace": elbos,
        "reason": trace.reason,
        "masses": state.masses.tolist(),
        "expected_weights": state.expected_weights().tolist(),
        "effective_components": effective_components(state, args.mass_threshold),
    }
    text = json.dumps(result, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antianneal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a dataset from a model spec or ingest IDX")
    g.add_argument("model", nargs="?", default="unbalanced2", help="fixture name or model JSON")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--sizes", help="per-component counts, e.g. 20000,20")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--binary", action="store_true", help="write the binary format")
    g.add_argument("--idx", help="ingest an IDX image file instead of sampling")
    g.add_argument("--pca", type=int, help="project IDX data onto this many components")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="run a configured experiment")
    f.add_argument("config")
    f.add_argument("-o", "--output", help="override the config output directory")
    f.add_argument("--replications", type=int)
    f.add_argument("--seed", type=int, help="override the master seed")
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("diagnose", help="condition-number / overlap / rate sweep as CSV")
    d.add_argument("--alpha1", default="0.025,0.1,0.5,0.9,0.975")
    d.add_argument("--mu1", default="10,30")
    d.add_argument("--mu2", type=float, default=0.0)
    d.add_argument("--var", type=float, default=9.0)
    d.add_argument("--n", type=int, default=20000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--rate", action="store_true", help="also estimate the empirical EM rate")
    d.add_argument("--surface", metavar="MODEL",
                   help="instead evaluate a log-likelihood grid over two component means")
    d.add_argument("--grid-min", type=float, default=-10.0)
    d.add_argument("--grid-max", type=float, default=10.0)
    d.add_argument("--grid-points", type=int, default=41)
    d.add_argument("-o", "--output")
    d.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("bench", help="run several algorithms on one config")
    b.add_argument("config")
    b.add_argument("--algorithms", default="em,anneal,ecg,bfgs")
    b.add_argument("-o", "--output")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("dpmm", help="variational DP mixture on a dataset file")
    v.add_argument("data")
    v.add_argument("--truncation", type=int, default=10)
    v.add_argument("--concentration", type=float, default=1.0)
    v.add_argument("--schedule", help="beta schedule, e.g. 0.8,1.0,1.2,1.0")
    v.add_argument("--epsilon", type=float, default=0.05)
    v.add_argument("--tol", type=float, default=1e-6)
    v.add_argument("--mass-threshold", type=float, default=1e-3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("-o", "--output")
    v.set_defaults(func=cmd_dpmm)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
