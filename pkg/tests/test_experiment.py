import copy
import csv
import json

import numpy as np
import pytest

from antianneal.harness.config import parse_config
from antianneal.harness.experiment import (CSV_COLUMNS, build_dataset, replication_seeds,
                                           run_experiment)

TINY = """
[dataset]
generator = balanced2
n = 300
seed = 1

[algorithm]
name = {algo}
k = 2
max_iters = 80

[run]
replications = {reps}
master_seed = 5
output = unused
"""


def read_trace(path):
    with open(path) as fh:
        assert fh.readline() == "# schema_version=1\n"
        return list(csv.DictReader(fh))


def run(tmp_path, algo="em", reps=1, name="out"):
    cfg = parse_config(TINY.format(algo=algo, reps=reps))
    return cfg, run_experiment(cfg, str(tmp_path / name))


class TestRunExperiment:
    def test_em_trace_ascends(self, tmp_path):
        _, summary = run(tmp_path)
        rows = read_trace(tmp_path / "out" / "run_000.csv")
        assert tuple(rows[0].keys()) == CSV_COLUMNS
        L = np.array([float(r["loglik"]) for r in rows])
        assert np.all(np.diff(L) >= -1e-9 * np.abs(L[1:]))
        assert all(r["elapsed_ms"] == "" for r in rows)
        assert summary["schema_version"] == 1 and summary["failures"] == 0

    @pytest.mark.parametrize("algo", ["em", "anneal", "ecg", "bfgs", "dpmm"])
    def test_byte_identical(self, tmp_path, algo):
        run(tmp_path, algo, reps=2, name="a")
        run(tmp_path, algo, reps=2, name="b")
        for f in ("run_000.csv", "run_001.csv", "summary.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_summary_contents(self, tmp_path):
        _, s = run(tmp_path, "anneal", reps=3)
        err = s["error"]
        n = len(err["mean_trajectory"])
        assert len(err["best_run_trajectory"]) == n == len(err["pointwise_min_trajectory"])
        assert np.all(np.array(err["pointwise_min_trajectory"]) <= np.array(err["mean_trajectory"]) + 1e-12)
        assert err["best_final"] == min(r["final_err"] for r in s["runs"])
        for r in s["runs"]:
            assert set(r["final_params"]) == {"weights", "means", "covs"}
            assert "final_weight_err" in r

    def test_dpmm_reports_components(self, tmp_path):
        _, s = run(tmp_path, "dpmm", reps=2)
        assert len(s["effective_components"]["per_run"]) == 2
        rows = read_trace(tmp_path / "out" / "run_000.csv")
        assert "effective_components" in rows[0]

    def test_failures_recorded(self, tmp_path):
        # a lone outlier makes any component seeded on it collapse when reg = 0
        from antianneal.harness.data import write_dataset
        X = np.concatenate([np.linspace(-1, 1, 299), [40.0]])[:, None]
        write_dataset(tmp_path / "d.txt", X)
        cfg = parse_config(f"[dataset]\nfile={tmp_path / 'd.txt'}\ntruth=balanced2\n"
                           "[algorithm]\nk=3\nreg=0\n[run]\nreplications=8\n")
        s = run_experiment(cfg, str(tmp_path / "f"))
        assert len(s["runs"]) == 8
        assert s["failures"] == 8
        for r in s["runs"]:
            assert r["status"] == "error" and "FactorizationError" in r["error"]
            assert (tmp_path / "f" / r["trace"]).exists()

    def test_timing_optional(self, tmp_path):
        cfg = parse_config(TINY.format(algo="em", reps=1))
        cfg.record_timing = True
        run_experiment(cfg, str(tmp_path / "t"))
        rows = read_trace(tmp_path / "t" / "run_000.csv")
        assert all(float(r["elapsed_ms"]) >= 0 for r in rows)

    def test_distinct_seeds(self):
        seeds = replication_seeds(0, 10)
        assert len(set(seeds)) == 10
        assert seeds == replication_seeds(0, 10)

    def test_file_dataset(self, tmp_path):
        from antianneal.harness.data import sample_mixture, write_dataset
        from antianneal.harness.config import load_model_spec
        truth, _ = load_model_spec("balanced2")
        write_dataset(tmp_path / "d.bin", sample_mixture(truth, 200, 0), binary=True)
        cfg = parse_config(f"[dataset]\nfile={tmp_path / 'd.bin'}\ntruth=balanced2\n")
        X, t = build_dataset(cfg)
        assert X.shape == (200, 1) and t.K == 2


BENCH = """
[dataset]
generator = dataset1
seed = 0

[algorithm]
k = 2

[run]
replications = 10
master_seed = 0
"""


@pytest.fixture(scope="module")
def dataset1_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    base = parse_config(BENCH)
    out = {}
    for algo in ("em", "anneal", "ecg", "bfgs"):
        cfg = copy.deepcopy(base)
        cfg.algorithm.name = algo
        summary = run_experiment(cfg.validate(), str(root / algo))
        out[algo] = (summary, root / algo)
    return out


def finals(summary):
    return np.array([r["final_err"] for r in summary["runs"]])


class TestDataset1Bench:
    def test_anneal_median_and_best(self, dataset1_bench):
        med = {a: np.median(finals(s)) for a, (s, _) in dataset1_bench.items()}
        best = {a: finals(s).min() for a, (s, _) in dataset1_bench.items()}
        for other in ("em", "ecg", "bfgs"):
            assert med["anneal"] < med[other]
            assert best["anneal"] < best[other]

    @pytest.mark.xfail(strict=True, reason="one of ten anneal runs collapses its small component "
                                           "(err ~130), which dominates the mean")
    def test_anneal_mean(self, dataset1_bench):
        mean = {a: finals(s).mean() for a, (s, _) in dataset1_bench.items()}
        for other in ("em", "ecg", "bfgs"):
            assert mean["anneal"] <= mean[other]

    def test_bfgs_best_beats_em_equal_budget(self, dataset1_bench):
        bfgs, bdir = dataset1_bench["bfgs"]
        _, edir = dataset1_bench["em"]
        r = int(np.argmin(finals(bfgs)))
        used = 5 + bfgs["runs"][r]["iterations"]
        em_rows = read_trace(edir / f"run_{r:03d}.csv")
        em_err = float(em_rows[min(used, len(em_rows) - 1)]["err"])
        assert finals(bfgs)[r] < em_err

    def test_summary_json_parses(self, dataset1_bench):
        _, d = dataset1_bench["anneal"]
        s = json.loads((d / "summary.json").read_text())
        assert s["config"]["algorithm"]["name"] == "anneal"
