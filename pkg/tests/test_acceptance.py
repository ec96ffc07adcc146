"""Acceptance criteria 1-12 at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured
numbers (visible in ``pytest -v`` output) and then asserts.
"""

import copy
import itertools
import time

import numpy as np
import pytest
from scipy import integrate, stats

from antianneal.anneal import PerturbPolicy, anneal_fit, hybrid_schedule
from antianneal.diagnostics import overlap_matrix, projected_hessian_condition
from antianneal.dpmm import dpmm_fit, effective_components
from antianneal.gradopt import neg_loglik_and_grad, pack
from antianneal.harness.config import load_model_spec, parse_config
from antianneal.harness.data import init_model, sample_mixture, sample_sizes
from antianneal.harness.experiment import run_experiment
from antianneal.harness.metrics import (divergence_matrix, match_components, param_error,
                                        symmetric_kl_gaussian)
from antianneal.mixture import (EmptyComponentError, GaussianComponent, e_step, em_fit,
                                tempered_e_step)

from conftest import random_model, two_component

SEEDS = range(10)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} | {detail}", flush=True)
        return ok
    return emit


def iterations_to(truth, X, init, threshold, max_iters=300):
    errs = []
    em_fit(X, init, tol=1e-300, max_iters=max_iters,
           callback=lambda k, m: errs.append(param_error(m, truth)))
    hit = np.flatnonzero(np.array(errs) < threshold)
    return int(hit[0]) if hit.size else max_iters + 1


def test_criterion_01_tempering_reduction(report):
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(50):
        r = np.random.default_rng(s)
        m = random_model(r, int(r.integers(1, 6)), int(r.integers(1, 5)))
        X = sample_mixture(m, int(r.integers(20, 300)), s) * r.uniform(0.2, 5)
        worst = max(worst, float(np.max(np.abs(tempered_e_step(X, m, 1.0) - e_step(X, m)[0]))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 10
    assert report(1, ok, f"max |tempered(1) - e_step| = {worst:.2e} over 50 instances, {dt:.1f}s")


def test_criterion_02_em_ascent(report):
    runs, worst = 0, 0.0
    cases = [(random_model(np.random.default_rng(s), 1 + s % 4, 1 + s % 3), s) for s in range(30)]
    for name in ("unbalanced2", "balanced2", "separated2"):
        cases.append((load_model_spec(name)[0], 0))
    for truth, s in cases:
        X = sample_mixture(truth, 2000, s)
        try:
            _, trace = em_fit(X, init_model(X, truth.K, s + 1), max_iters=300)
        except EmptyComponentError:
            continue
        L = np.array(trace.loglik)
        drop = np.max((L[:-1] - L[1:]) / np.abs(L[1:])) if L.size > 1 else 0.0
        worst = max(worst, float(drop))
        runs += 1
    ok = worst <= 1e-9 and runs >= 30
    assert report(2, ok, f"{runs} runs, worst relative decrease {worst:.2e}")


def _unbalanced_runs():
    truth, _ = load_model_spec("unbalanced2")
    for s in SEEDS:
        X = sample_mixture(truth, 10000, s)
        yield truth, X, init_model(X, 2, s + 1000)


def test_criterion_03_slow_convergence(report):
    t0 = time.perf_counter()
    mu_dev, errs, both = [], [], 0
    for truth, X, init in _unbalanced_runs():
        model, _ = em_fit(X, init, tol=1e-300, max_iters=100)
        j = match_components(model, truth).permutation.index(0)
        mu_dev.append(abs(model.means[j, 0] + 5))
        errs.append(param_error(model, truth))
        both += mu_dev[-1] > 1.0 and errs[-1] > 0.5
    dt = time.perf_counter() - t0
    ok = both >= 7 and np.median(mu_dev) > 1.0 and np.median(errs) > 0.5 and dt < 120
    assert report(3, ok, f"{both}/10 seeds slow; median |mu1+5| = {np.median(mu_dev):.3f}, "
                         f"median err = {np.median(errs):.3f}, {dt:.1f}s")


@pytest.mark.parametrize("n,name,limit", [(4, "balanced2", 30), (5, "separated2", 60)])
def test_criterion_04_05_fast_convergence(report, n, name, limit):
    t0 = time.perf_counter()
    truth, _ = load_model_spec(name)
    its = []
    for s in SEEDS:
        X = sample_mixture(truth, 10000, s)
        its.append(iterations_to(truth, X, init_model(X, 2, s + 1000), 0.1))
    dt = time.perf_counter() - t0
    ok = np.median(its) <= limit and dt < 60
    assert report(n, ok, f"{name}: iterations to err<0.1 = {its}, median {np.median(its)} "
                         f"(limit {limit}), {dt:.1f}s")


def test_criterion_06_anneal_speedup(report):
    t0 = time.perf_counter()
    ea, ee, reached = [], [], 0
    for s, (truth, X, init) in zip(SEEDS, _unbalanced_runs()):
        model, trace = anneal_fit(X, 2, hybrid_schedule(0.8, 1.2), PerturbPolicy(), init, seed=s)
        budget = trace.iterations[-1]
        em_model, _ = em_fit(X, init, tol=1e-300, max_iters=budget)
        ea.append(param_error(model, truth))
        ee.append(param_error(em_model, truth))
        reached += ea[-1] < 0.1
    dt = time.perf_counter() - t0
    ok = np.mean(ea) < np.mean(ee) and reached >= 8 and dt < 180
    assert report(6, ok, f"mean err anneal {np.mean(ea):.5f} vs EM {np.mean(ee):.5f} at equal "
                         f"budget; anneal err<0.1 in {reached}/10, {dt:.1f}s")


def test_criterion_07_condition_shape(report):
    t0 = time.perf_counter()
    kap = {}
    for mu1 in (10.0, 30.0):
        for a in (0.025, 0.1, 0.5, 0.9, 0.975):
            truth = two_component(a, mu1, 0.0, 9.0)
            kap[mu1, a] = projected_hessian_condition(sample_mixture(truth, 20000, 0),
                                                      truth).condition_number
    dt = time.perf_counter() - t0
    r10 = kap[10.0, 0.025] / kap[10.0, 0.5]
    r30 = kap[30.0, 0.025] / kap[30.0, 0.5]
    ok = r10 >= 10 and r30 <= 5 and dt < 180
    sweep = ", ".join(f"{a}:{kap[10.0, a]:.3g}" for a in (0.025, 0.1, 0.5, 0.9, 0.975))
    assert report(7, ok, f"mu1=10 ratio {r10:.1f} (>=10), mu1=30 ratio {r30:.2f} (<=5); "
                         f"mu1=10 sweep {sweep}; {dt:.1f}s")


def test_criterion_08_gradient_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(25):
        r = np.random.default_rng(100 + s)
        K, d, N = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(10, 101))
        X = sample_mixture(random_model(r, K, d), N, s)
        theta = pack(random_model(r, K, d))
        _, g = neg_loglik_and_grad(theta, X, K, d)
        num = np.empty_like(theta)
        for i in range(theta.size):
            h = 1e-5 * max(1.0, abs(theta[i]))
            e = np.zeros_like(theta)
            e[i] = h
            num[i] = (neg_loglik_and_grad(theta + e, X, K, d)[0]
                      - neg_loglik_and_grad(theta - e, X, K, d)[0]) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g - num) / np.maximum(np.abs(num), 1.0))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 30
    assert report(8, ok, f"25 instances, worst relative error {worst:.2e}, {dt:.1f}s")


def test_criterion_09_kl_and_matching(report):
    t0 = time.perf_counter()
    r = np.random.default_rng(9)
    worst_kl = 0.0
    for _ in range(20):
        (m1, m2), (v1, v2) = r.normal(scale=3, size=2), r.uniform(0.3, 5, size=2)
        p, q = stats.norm(m1, np.sqrt(v1)), stats.norm(m2, np.sqrt(v2))
        lo, hi = min(m1, m2) - 40, max(m1, m2) + 40
        ref = integrate.quad(lambda x: (p.pdf(x) - q.pdf(x)) * (p.logpdf(x) - q.logpdf(x)),
                             lo, hi, limit=400, epsabs=1e-12)[0]
        val = symmetric_kl_gaussian(GaussianComponent([m1], [[v1]]), GaussianComponent([m2], [[v2]]))
        worst_kl = max(worst_kl, abs(val - ref))
    agree = 0
    for s in range(50):
        rs = np.random.default_rng(1000 + s)
        K = int(rs.integers(1, 7))
        est, truth = random_model(rs, K, 2, 1.5), random_model(rs, K, 2, 1.5)
        C = divergence_matrix(est, truth)
        brute = min(itertools.permutations(range(K)),
                    key=lambda p: sum(C[j, p[j]] for j in range(K)))
        best = sum(C[j, brute[j]] for j in range(K))
        agree += abs(match_components(est, truth).total_cost - best) <= 1e-12 * max(1.0, best)
    dt = time.perf_counter() - t0
    ok = worst_kl <= 1e-4 and agree == 50 and dt < 30
    assert report(9, ok, f"max |closed form - quadrature| = {worst_kl:.2e}; matching agrees "
                         f"with brute force on {agree}/50; {dt:.1f}s")


def _offdiag_max(E):
    E = E.copy()
    np.fill_diagonal(E, -np.inf)
    return float(E.max())


@pytest.mark.xfail(strict=True, reason="not monotone for K >= 3; see "
                   "test_diagnostics::TestOverlapBeta for a constructive counterexample")
def test_criterion_10_overlap_monotone(report):
    t0 = time.perf_counter()
    betas = (0.5, 1.0, 1.5, 2.0, 4.0)
    bad = []
    for s in range(20):
        r = np.random.default_rng(200 + s)
        m = random_model(r, int(r.integers(2, 5)), int(r.integers(1, 3)), spread=1.0)
        X = sample_mixture(m, 500, s)
        e = [_offdiag_max(overlap_matrix(X, m, b).entries) for b in betas]
        if any(b > a for a, b in zip(e, e[1:])):
            bad.append(f"seed {s} K={m.K}: " + ", ".join(f"{v:.4f}" for v in e))
    dt = time.perf_counter() - t0
    ok = not bad and dt < 30
    assert report(10, ok, f"non-monotone in {len(bad)}/20 overlapping models "
                          f"({'; '.join(bad) or 'none'}), {dt:.1f}s")


def test_criterion_11_dpmm(report):
    t0 = time.perf_counter()
    truth, sizes = load_model_spec("dpmm_unbalanced")
    X = sample_sizes(truth, sizes, 0)
    plain, anneal = [], []
    for s in SEEDS:
        st, _ = dpmm_fit(X, T=10, seed=s)
        plain.append(effective_components(st, 1e-3))
        st, _ = dpmm_fit(X, T=10, schedule=hybrid_schedule(0.8, 1.2), seed=s, policy=PerturbPolicy())
        anneal.append(effective_components(st, 1e-3))
    dt = time.perf_counter() - t0
    two = anneal.count(2)
    over = sum(c > 2 for c in plain)
    ok = two >= 6 and np.median(anneal) <= np.median(plain) and over >= 5 and dt < 300
    assert report(11, ok, f"sizes {sizes}: anneal counts {anneal} ({two}/10 equal 2), "
                          f"plain VB counts {plain} ({over}/10 above 2), {dt:.1f}s")


def test_criterion_12_determinism(report, tmp_path):
    text = ("[dataset]\ngenerator = unbalanced2\nn = 400\nseed = 2\n"
            "[algorithm]\nk = 2\nmax_iters = 60\n[run]\nreplications = 2\nmaster_seed = 3\n")
    identical = []
    for algo in ("em", "anneal", "ecg", "bfgs", "dpmm"):
        cfg = parse_config(text)
        cfg.algorithm.name = algo
        for tag in ("a", "b"):
            run_experiment(copy.deepcopy(cfg), str(tmp_path / algo / tag))
        files = sorted(p.name for p in (tmp_path / algo / "a").iterdir())
        identical.append(all((tmp_path / algo / "a" / f).read_bytes()
                             == (tmp_path / algo / "b" / f).read_bytes() for f in files))
    ok = all(identical)
    assert report(12, ok, f"byte-identical outputs per algorithm: "
                          f"{dict(zip(('em', 'anneal', 'ecg', 'bfgs', 'dpmm'), identical))}")
