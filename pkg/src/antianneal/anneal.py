"""Deterministic (anti-)annealing EM over arbitrary inverse-temperature schedules."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .mixture import (
    FitTrace,
    MixtureError,
    MixtureModel,
    as_data,
    default_reg,
    log_component_densities,
    m_step,
    relative_change,
    tempered_responsibilities,
)

PERTURB_WHEN = ("after-each-beta-change", "never")


@dataclass(frozen=True)
class AnnealSchedule:
    """Ordered inverse temperatures plus the per-stage convergence policy."""

    betas: tuple
    inner_tol: float = 1e-6
    inner_max_iters: int = 1000
    final_stage_exact: bool = True

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if not betas:
            raise ValueError("schedule must contain at least one beta")
        if any(not (b > 0 and np.isfinite(b)) for b in betas):
            raise ValueError(f"every beta must be positive and finite; got {betas}")
        if self.final_stage_exact and betas[-1] != 1.0:
            raise ValueError(f"final beta must be exactly 1; got {betas[-1]}")
        if not self.inner_tol > 0 or self.inner_max_iters < 1:
            raise ValueError("inner_tol must be positive and inner_max_iters >= 1")
        object.__setattr__(self, "betas", betas)

    def __len__(self):
        return len(self.betas)


@dataclass(frozen=True)
class PerturbPolicy:
    epsilon: float = 0.05
    when: str = "after-each-beta-change"

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be finite and non-negative; got {self.epsilon}")
        if self.when not in PERTURB_WHEN:
            raise ValueError(f"when must be one of {PERTURB_WHEN}; got {self.when!r}")

    @property
    def active(self) -> bool:
        return self.when != "never" and self.epsilon > 0


NO_PERTURBATION = PerturbPolicy(0.0, "never")


def hybrid_schedule(beta_min: float, beta_max: float, steps_up: int = 2,
                    steps_down: int = 1, **kwargs) -> AnnealSchedule:
    """Rise linearly from ``beta_min`` to ``beta_max`` then fall back to 1.

    ``hybrid_schedule(0.8, 1.2, 2, 1)`` gives ``[0.8, 1.0, 1.2, 1.0]`` and
    ``hybrid_schedule(0.2, 1.2, 5, 1)`` gives ``[0.2, 0.4, ..., 1.2, 1.0]``.
    Extra keyword arguments are forwarded to :class:`AnnealSchedule`.
    """
    if not (0 < beta_min <= 1 <= beta_max):
        raise ValueError(f"need 0 < beta_min <= 1 <= beta_max; got {beta_min}, {beta_max}")
    if steps_up < 1 or steps_down < 1:
        raise ValueError("steps_up and steps_down must be >= 1")
    if beta_max > beta_min:
        rise = list(np.linspace(beta_min, beta_max, steps_up + 1))
    else:
        rise = [beta_min]
    fall = list(np.linspace(beta_max, 1.0, steps_down + 1)[1:]) if beta_max > 1 else []
    betas = [round(float(b), 12) for b in rise + fall]
    betas[-1] = 1.0
    return AnnealSchedule(tuple(betas), **kwargs)


def principal_axis(data, weights) -> tuple[np.ndarray, float]:
    """Leading eigenpair of the weighted covariance of ``data``.

    The eigenvector has unit norm and its largest-magnitude coordinate is
    positive.
    """
    X = as_data(data)
    w = np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],):
        raise ValueError(f"weights shape {w.shape} does not match {X.shape[0]} points")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights sum to zero")
    mean = w @ X / total
    diff = X - mean
    cov = (w[:, None] * diff).T @ diff / total
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    v = vecs[:, -1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v, max(float(vals[-1]), 0.0)


def perturb_means(model: MixtureModel, resp, data, policy: PerturbPolicy,
                  rng=None) -> MixtureModel:
    """Jitter every mean along its cluster's first principal axis.

    The shift is ``epsilon * sqrt(leading variance) * u`` with ``u`` a
    standard normal draw per component.  ``rng`` may be a seed or a
    :class:`numpy.random.Generator`.
    """
    if policy.epsilon == 0:
        return model
    rng = np.random.default_rng(rng)
    X = as_data(data)
    resp = np.asarray(resp, dtype=float)
    means = np.array(model.means)
    for j in range(model.K):
        axis, var = principal_axis(X, resp[:, j])
        means[j] += policy.epsilon * np.sqrt(var) * rng.standard_normal() * axis
    return model.replace(means=means)


def tempered_objective(logp: np.ndarray, beta: float) -> float:
    """Free energy ``(1/beta) sum_t log sum_j (alpha_j p_j(x_t))^beta``.

    This is what a (tempered E, M) iteration ascends; at beta = 1 it is the
    log-likelihood.
    """
    if beta == 1:
        return float(np.sum(logsumexp(logp, axis=1)))
    return float(np.sum(logsumexp(beta * logp, axis=1)) / beta)


def _annotate(exc: Exception, stage: int, beta: float, inner: int) -> Exception:
    exc.stage, exc.beta, exc.inner_iteration = stage, beta, inner
    msg = exc.args[0] if exc.args else ""
    exc.args = (f"{msg} (beta stage {stage} = {beta}, inner iteration {inner})",) + exc.args[1:]
    return exc


def anneal_fit(data, K: int, schedule: AnnealSchedule,
               policy: PerturbPolicy = PerturbPolicy(),
               init: Optional[MixtureModel] = None, seed=None,
               reg: Optional[float] = None,
               callback: Optional[Callable[[int, MixtureModel], None]] = None,
               ) -> tuple[MixtureModel, FitTrace]:
    """Run tempered EM stage by stage over ``schedule.betas``.

    Each stage alternates a tempered E-step with the ordinary M-step until
    the relative change of the tempered objective drops below
    ``schedule.inner_tol``.  Means are perturbed after every stage but the
    last.  The trace's log-likelihood column is always the untempered one.

    When ``init`` is None it is drawn with the harness initializer from
    ``seed``; the same seed then also drives the perturbation noise.
    """
    X = as_data(data)
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    if init is None:
        from .harness.data import init_model
        init = init_model(X, K, rng)
    if init.K != K:
        raise ValueError(f"init has {init.K} components, expected {K}")
    reg = default_reg(X) if reg is None else reg

    model = init
    trace = FitTrace()
    t0 = time.perf_counter()
    it = 0
    logp = log_component_densities(X, model)
    trace.record(0, schedule.betas[0], tempered_objective(logp, 1.0), 0.0)
    if callback:
        callback(0, model)
    trace.reason = "max_iters"
    last = len(schedule.betas) - 1
    for s, beta in enumerate(schedule.betas):
        resp = tempered_responsibilities(logp, beta)
        obj = tempered_objective(logp, beta)
        converged = False
        for inner in range(1, schedule.inner_max_iters + 1):
            try:
                model = m_step(X, resp, reg)
                logp = log_component_densities(X, model)
            except MixtureError as exc:
                raise _annotate(exc, s, beta, inner)
            resp = tempered_responsibilities(logp, beta)
            obj_new = tempered_objective(logp, beta)
            it += 1
            trace.record(it, beta, tempered_objective(logp, 1.0), time.perf_counter() - t0)
            if callback:
                callback(it, model)
            converged = relative_change(obj_new, obj) < schedule.inner_tol
            obj = obj_new
            if converged:
                break
        if s < last and policy.active:
            model = perturb_means(model, resp, X, policy, rng)
            logp = log_component_densities(X, model)
        if s == last:
            trace.reason = "converged" if converged else "max_iters"
    return model, trace
