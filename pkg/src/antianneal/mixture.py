"""Gaussian mixture types, log-space E/M steps and the plain EM driver."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


class MixtureError(Exception):
    """Base class for fitting failures."""


class FactorizationError(MixtureError):
    """A covariance matrix could not be Cholesky-factorized."""


class EmptyComponentError(MixtureError):
    """A component lost (almost) all of its responsibility mass."""

    def __init__(self, component, mass, iteration=None):
        self.component = component
        self.mass = mass
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(
            f"component {component} is empty (mass {mass:.3e}){where}")


def as_data(x) -> np.ndarray:
    """Coerce ``x`` to an ``(N, d)`` float array; 1-D input is one column."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"data must be (N, d) with N, d >= 1; got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite entries")
    return x


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising :class:`FactorizationError`."""
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError(f"covariance is not positive definite: {exc}") from exc


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        scale = max(np.max(np.abs(cov)), 1e-300)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        cholesky(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class MixtureModel:
    """K Gaussian components with mixing weights.

    Stored as stacked arrays: ``weights`` (K,), ``means`` (K, d) and
    ``covs`` (K, d, d).  Instances are treated as immutable values.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.array(self.weights, dtype=float))
        mu = np.array(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.array(self.covs, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None, None]
        K, d = mu.shape
        if K < 1 or w.shape != (K,) or cov.shape != (K, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1; got {w}")
        for a in (w, mu, cov):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @classmethod
    def from_components(cls, weights, components) -> "MixtureModel":
        return cls(weights,
                   np.array([c.mean for c in components]),
                   np.array([c.cov for c in components]))

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(m, c) for m, c in zip(self.means, self.covs)]

    def replace(self, weights=None, means=None, covs=None) -> "MixtureModel":
        return MixtureModel(self.weights if weights is None else weights,
                            self.means if means is None else means,
                            self.covs if covs is None else covs)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        return cls(d["weights"], d["means"], d["covs"])


@dataclass
class FitTrace:
    """Per-iteration record of a fit.

    ``loglik`` always holds the untempered (beta = 1) log-likelihood so
    traces from different algorithms are comparable.
    """

    iterations: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    reason: str = ""

    def record(self, iteration, beta, loglik, seconds):
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("trace iteration indices must increase")
        self.iterations.append(int(iteration))
        self.betas.append(float(beta))
        self.loglik.append(float(loglik))
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.iterations)


def relative_change(new: float, old: float) -> float:
    """Relative log-likelihood change used as the stopping rule."""
    return abs(new - old) / max(abs(new), np.finfo(float).tiny)


def log_gaussian_pdf(x, comp: GaussianComponent) -> float:
    """log N(x | mean, cov) via the Cholesky factor of the covariance."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != comp.mean.shape:
        raise ValueError(f"point has dimension {x.size}, component {comp.dim}")
    return float(_log_pdf_rows(x[None, :], comp.mean, comp.cov)[0])


def _log_pdf_rows(X, mean, cov):
    L = cholesky(cov)
    z = linalg.solve_triangular(L, (X - mean).T, lower=True)
    d = X.shape[1]
    return -0.5 * (d * LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(L)))


def log_component_densities(data, model: MixtureModel) -> np.ndarray:
    """N x K matrix of ``log alpha_j + log N(x_t | mu_j, Sigma_j)``."""
    X = as_data(data)
    if X.shape[1] != model.dim:
        raise ValueError(f"data dimension {X.shape[1]} != model dimension {model.dim}")
    out = np.empty((X.shape[0], model.K))
    for j in range(model.K):
        out[:, j] = np.log(model.weights[j]) + _log_pdf_rows(X, model.means[j], model.covs[j])
    return out


def log_likelihood(data, model: MixtureModel) -> float:
    return float(np.sum(logsumexp(log_component_densities(data, model), axis=1)))


def e_step(data, model: MixtureModel) -> tuple[np.ndarray, float]:
    """Posterior responsibilities and the total log-likelihood."""
    logp = log_component_densities(data, model)
    lse = logsumexp(logp, axis=1, keepdims=True)
    return np.exp(logp - lse), float(np.sum(lse))


def tempered_responsibilities(logp: np.ndarray, beta: float) -> np.ndarray:
    """Row softmax of ``beta * logp``.

    ``beta == 1`` goes through exactly the same arithmetic as the plain
    E-step.  Ties in the winner-take-all limit go to the lowest index,
    which is what the max-shift produces once the other entries underflow.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive; got {beta}")
    z = logp if beta == 1 else beta * logp
    return np.exp(z - logsumexp(z, axis=1, keepdims=True))


def tempered_e_step(data, model: MixtureModel, beta: float) -> np.ndarray:
    if not beta > 0:
        raise ValueError(f"beta must be positive; got {beta}")
    return tempered_responsibilities(log_component_densities(data, model), beta)


def default_reg(data) -> float:
    """Default covariance ridge: 1e-6 times the mean per-dimension variance."""
    X = as_data(data)
    return 1e-6 * float(np.mean(np.var(X, axis=0)))


def m_step(data, resp: np.ndarray, reg: float = 0.0) -> MixtureModel:
    """Weighted maximum-likelihood update from responsibilities."""
    X = as_data(data)
    resp = np.asarray(resp, dtype=float)
    N, d = X.shape
    if resp.ndim != 2 or resp.shape[0] != N:
        raise ValueError(f"responsibilities shape {resp.shape} does not match {N} points")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    mass = resp.sum(axis=0)
    for j in np.flatnonzero(mass < N * 1e-12):
        raise EmptyComponentError(int(j), float(mass[j]))
    K = resp.shape[1]
    means = (resp.T @ X) / mass[:, None]
    covs = np.empty((K, d, d))
    for j in range(K):
        diff = X - means[j]
        c = (resp[:, j, None] * diff).T @ diff / mass[j]
        covs[j] = 0.5 * (c + c.T) + reg * np.eye(d)
    weights = mass / N
    weights = weights / weights.sum()
    return MixtureModel(weights, means, covs)


def em_fit(data, init: MixtureModel, tol: float = 1e-10, max_iters: int = 1000,
           reg: Optional[float] = None,
           callback: Optional[Callable[[int, MixtureModel], None]] = None,
           ) -> tuple[MixtureModel, FitTrace]:
    """Plain EM until the relative log-likelihood change drops below ``tol``.

    Iteration ``k`` of the trace holds L(Theta^k); iteration 0 is the
    initial model.  ``callback(k, model)`` is invoked for every recorded
    model, including the initial one.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    X = as_data(data)
    reg = default_reg(X) if reg is None else reg
    trace = FitTrace()
    model = init
    t0 = time.perf_counter()
    resp, ll = e_step(X, model)
    trace.record(0, 1.0, ll, 0.0)
    if callback:
        callback(0, model)
    trace.reason = "max_iters"
    for k in range(1, max_iters + 1):
        try:
            model = m_step(X, resp, reg)
            resp, ll_new = e_step(X, model)
        except EmptyComponentError as exc:
            raise EmptyComponentError(exc.component, exc.mass, k) from exc
        except FactorizationError as exc:
            raise FactorizationError(f"iteration {k}: {exc}") from exc
        trace.record(k, 1.0, ll_new, time.perf_counter() - t0)
        if callback:
            callback(k, model)
        done = relative_change(ll_new, ll) < tol
        ll = ll_new
        if done:
            trace.reason = "converged"
            break
    return model, trace
