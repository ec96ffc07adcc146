"""Replicated experiment runs writing per-run CSV traces and a JSON summary."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from ..anneal import anneal_fit
from ..dpmm import dpmm_fit, effective_components
from ..gradopt import bfgs_fit, ecg_fit, em_warm_start
from ..mixture import MixtureError, MixtureModel, as_data, em_fit
from .config import ExperimentConfig, load_model_spec
from .data import init_model, read_dataset, sample_mixture, sample_sizes
from .metrics import param_error, weight_error

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("iteration", "beta", "loglik", "err", "weight_err", "elapsed_ms")
DPMM_COLUMNS = ("iteration", "beta", "elbo", "effective_components", "elapsed_ms")


def build_dataset(cfg: ExperimentConfig) -> tuple[np.ndarray, Optional[MixtureModel]]:
    """Dataset and (when known) the true model it was drawn from."""
    d = cfg.dataset
    if d.file is not None:
        X = read_dataset(d.file)
        truth = load_model_spec(d.truth)[0] if d.truth else None
        return X, truth
    truth, sizes = load_model_spec(d.generator)
    if d.sizes is not None:
        sizes = d.sizes
    if d.n is not None and d.sizes is None:
        return sample_mixture(truth, d.n, d.seed), truth
    if sizes is None:
        raise ValueError(f"model {d.generator!r} has no default sizes; set n or sizes")
    return sample_sizes(truth, sizes, d.seed), truth


def replication_seeds(master_seed: int, replications: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(replications)
    return [int(c.generate_state(1)[0]) for c in children]


def _fit_once(X, truth, cfg: ExperimentConfig, seed: int):
    """Run one replication; returns (rows, final_model_or_state, reason)."""
    a = cfg.algorithm
    rows = []
    t0 = time.perf_counter()

    def elapsed():
        return round(1000 * (time.perf_counter() - t0), 3) if cfg.record_timing else ""

    if a.name == "dpmm":
        def dp_cb(k, beta, state, bound):
            rows.append((k, beta, bound, effective_components(state, a.mass_threshold), elapsed()))

        state, trace = dpmm_fit(X, a.truncation, a.anneal_schedule(), a.concentration, seed,
                                a.perturb_policy(), a.resp_tol, callback=dp_cb)
        return rows, state, trace.reason

    rng = np.random.default_rng(seed)
    init = init_model(X, a.k, rng, a.reg)

    def cb(k, model):
        err = param_error(model, truth) if truth is not None else ""
        werr = weight_error(model, truth) if truth is not None else ""
        rows.append([k, None, None, err, werr, elapsed()])

    if a.name == "em":
        model, trace = em_fit(X, init, a.tolerance, a.max_iters, a.reg, cb)
    elif a.name == "anneal":
        model, trace = anneal_fit(X, a.k, a.anneal_schedule(), a.perturb_policy(), init, rng,
                                  a.reg, cb)
    else:
        start = em_warm_start(X, init, a.warm_start_iters)
        fit = ecg_fit if a.name == "ecg" else bfgs_fit
        model, trace = fit(X, start, a.tolerance, a.max_iters, cb)
    for row, beta, ll in zip(rows, trace.betas, trace.loglik):
        row[1], row[2] = beta, ll
    return [tuple(r) for r in rows], model, trace.reason


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _pad(trajs):
    n = max(len(t) for t in trajs)
    return np.array([list(t) + [t[-1]] * (n - len(t)) for t in trajs], dtype=float)


def run_experiment(cfg: ExperimentConfig, output: Optional[str] = None) -> dict:
    """Run every replication and write ``run_XXX.csv`` plus ``summary.json``.

    Replication ``r`` uses the ``r``-th seed spawned from the master seed.
    Failures are recorded in the summary and the remaining replications
    still run.  Returns the summary dictionary.
    """
    cfg.validate()
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    X, truth = build_dataset(cfg)
    X = as_data(X)
    is_dp = cfg.algorithm.name == "dpmm"
    runs = []
    for r, seed in enumerate(replication_seeds(cfg.master_seed, cfg.replications)):
        path = out / f"run_{r:03d}.csv"
        entry = {"replication": r, "seed": seed, "trace": path.name}
        try:
            rows, final, reason = _fit_once(X, truth, cfg, seed)
        except MixtureError as exc:
            log.warning("replication %d failed: %s", r, exc)
            entry.update(status="error", error=f"{type(exc).__name__}: {exc}")
            runs.append(entry)
            _write_csv(path, DPMM_COLUMNS if is_dp else CSV_COLUMNS, [])
            continue
        _write_csv(path, DPMM_COLUMNS if is_dp else CSV_COLUMNS, rows)
        entry.update(status="ok", reason=reason, iterations=rows[-1][0])
        if is_dp:
            entry.update(final_elbo=rows[-1][2], effective_components=rows[-1][3],
                         masses=final.masses.tolist(),
                         expected_weights=final.expected_weights().tolist())
        else:
            entry.update(final_loglik=rows[-1][2], final_params=final.to_dict())
            if truth is not None:
                entry.update(final_err=rows[-1][3], final_weight_err=rows[-1][4],
                             err_trajectory=[row[3] for row in rows])
        runs.append(entry)

    summary = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "n_points": int(X.shape[0]),
        "dim": int(X.shape[1]),
        "runs": [{k: v for k, v in e.items() if k != "err_trajectory"} for e in runs],
    }
    ok = [e for e in runs if e["status"] == "ok"]
    summary["failures"] = len(runs) - len(ok)
    if is_dp and ok:
        counts = [e["effective_components"] for e in ok]
        summary["effective_components"] = {"per_run": counts, "median": float(np.median(counts))}
    elif truth is not None and ok:
        finals = np.array([e["final_err"] for e in ok])
        trajs = _pad([e["err_trajectory"] for e in ok])
        best = int(np.argmin(finals))
        summary["error"] = {
            "mean_final": float(finals.mean()),
            "best_final": float(finals[best]),
            "best_run": ok[best]["replication"],
            "best_run_trajectory": [float(v) for v in trajs[best]],
            "pointwise_min_trajectory": [float(v) for v in trajs.min(axis=0)],
            "mean_trajectory": [float(v) for v in trajs.mean(axis=0)],
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
