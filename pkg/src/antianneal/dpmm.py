"""Truncated stick-breaking variational DP Gaussian mixture with tempered updates.

Component posteriors are Normal-Wishart: ``Lambda_j ~ W(nu_j, W_j)`` and
``mu_j | Lambda_j ~ N(m_j, (kappa_j Lambda_j)^-1)``.  We store ``W_j^{-1}``
(``scale_inv``), which is the inverse-Wishart scale of the covariance.  The
last stick is fixed at one, so the truncated weights sum to one exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .anneal import AnnealSchedule, PerturbPolicy, principal_axis
from .mixture import FitTrace, as_data, relative_change

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class NormalWishartPrior:
    mean: np.ndarray
    kappa: float
    nu: float
    scale_inv: np.ndarray

    @classmethod
    def empirical(cls, data) -> "NormalWishartPrior":
        """Data mean, one pseudo-observation, ``d + 2`` dof, data covariance."""
        X = as_data(data)
        d = X.shape[1]
        cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
        return cls(X.mean(axis=0), 1.0, d + 2.0, cov)


@dataclass(frozen=True)
class VariationalState:
    gamma: np.ndarray          # (T, 2) Beta parameters of the sticks
    means: np.ndarray          # (T, d)
    kappa: np.ndarray          # (T,)
    nu: np.ndarray             # (T,)
    scale_inv: np.ndarray      # (T, d, d)
    resp: np.ndarray           # (N, T)
    concentration: float
    prior: NormalWishartPrior

    @property
    def T(self) -> int:
        return self.gamma.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self):
        d = self.dim
        if np.any(self.gamma <= 0) or np.any(self.kappa <= 0) or np.any(self.nu <= d - 1):
            raise ValueError("variational parameters outside their domain")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        np.linalg.cholesky(self.scale_inv)
        rows = self.resp.sum(axis=1)
        if np.any(np.abs(rows - 1) > 1e-10) or np.any(self.resp < 0):
            raise ValueError("responsibilities are not row-stochastic")

    @property
    def masses(self) -> np.ndarray:
        return self.resp.sum(axis=0)

    def expected_weights(self) -> np.ndarray:
        """``E[pi_j] = E[V_j] prod_{l<j} E[1 - V_l]`` with ``V_T = 1``."""
        g1, g2 = self.gamma[:, 0], self.gamma[:, 1]
        ev = g1 / (g1 + g2)
        ev[-1] = 1.0
        rest = np.concatenate([[1.0], np.cumprod(1.0 - ev[:-1])])
        return ev * rest

    def mean_covariances(self) -> np.ndarray:
        """Posterior mean of each covariance, ``W_j^{-1} / (nu_j - d - 1)`` when defined."""
        d = self.dim
        denom = np.where(self.nu > d + 1, self.nu - d - 1, self.nu)
        return self.scale_inv / denom[:, None, None]


def expected_log_sticks(gamma: np.ndarray):
    """``E[log V_j]`` and ``E[log(1 - V_j)]`` with the last stick pinned at one."""
    tot = digamma(gamma.sum(axis=1))
    elv = digamma(gamma[:, 0]) - tot
    el1v = digamma(gamma[:, 1]) - tot
    elv[-1] = 0.0
    el1v[-1] = -np.inf
    return elv, el1v


def expected_log_det(nu, scale_inv):
    d = scale_inv.shape[-1]
    i = np.arange(1, d + 1)
    _, logdet_inv = np.linalg.slogdet(scale_inv)
    return np.sum(digamma((nu[:, None] + 1 - i) / 2), axis=1) + d * np.log(2) - logdet_inv


def expected_loglik(state: VariationalState, X) -> np.ndarray:
    """N x T matrix of ``E_q[log N(x_i | mu_j, Lambda_j^-1)]``."""
    N, d = X.shape
    eld = expected_log_det(state.nu, state.scale_inv)
    out = np.empty((N, state.T))
    for j in range(state.T):
        diff = X - state.means[j]
        W = np.linalg.inv(state.scale_inv[j])
        quad = np.einsum("ni,ij,nj->n", diff, W, diff)
        out[:, j] = 0.5 * (eld[j] - d * LOG_2PI - d / state.kappa[j] - state.nu[j] * quad)
    return out


def vb_scores(state: VariationalState, data) -> np.ndarray:
    """``S_ij = E[log V_j] + sum_{l<j} E[log(1 - V_l)] + E[log p(x_i | eta_j)]``."""
    X = as_data(data)
    elv, el1v = expected_log_sticks(state.gamma)
    prior = elv + np.concatenate([[0.0], np.cumsum(el1v[:-1])])
    return expected_loglik(state, X) + prior


def tempered_vb_e_step(state: VariationalState, data, beta: float = 1.0) -> np.ndarray:
    """Row softmax of ``beta * S``."""
    if not beta > 0:
        raise ValueError(f"beta must be positive; got {beta}")
    S = vb_scores(state, data)
    z = S if beta == 1 else beta * S
    return np.exp(z - logsumexp(z, axis=1, keepdims=True))


def vb_m_step(state: VariationalState, data) -> VariationalState:
    """Update sticks and Normal-Wishart posteriors from the responsibilities."""
    X = as_data(data)
    phi = state.resp
    p = state.prior
    n = phi.sum(axis=0)
    tail = np.concatenate([np.cumsum(n[::-1])[::-1][1:], [0.0]])
    gamma = np.column_stack([1.0 + n, state.concentration + tail])
    T, d = phi.shape[1], X.shape[1]
    kappa = p.kappa + n
    nu = p.nu + n
    means = np.empty((T, d))
    scale_inv = np.empty((T, d, d))
    sx = phi.T @ X
    for j in range(T):
        if n[j] > 1e-300:
            xbar = sx[j] / n[j]
            diff = X - xbar
            S = (phi[:, j, None] * diff).T @ diff
            dm = xbar - p.mean
            extra = (p.kappa * n[j] / kappa[j]) * np.outer(dm, dm)
        else:
            xbar = p.mean
            S = extra = 0.0
        means[j] = (p.kappa * p.mean + n[j] * xbar) / kappa[j]
        W = p.scale_inv + S + extra
        scale_inv[j] = 0.5 * (W + W.T)
    return replace(state, gamma=gamma, means=means, kappa=kappa, nu=nu, scale_inv=scale_inv)


def _log_wishart_norm(nu, scale_inv):
    """``log B(W, nu)`` of the Wishart normalizer, with ``W = scale_inv^-1``."""
    d = scale_inv.shape[-1]
    _, logdet_inv = np.linalg.slogdet(scale_inv)
    i = np.arange(1, d + 1)
    return (0.5 * nu * logdet_inv
            - (0.5 * nu * d * np.log(2) + 0.25 * d * (d - 1) * np.log(np.pi)
               + np.sum(gammaln((nu[:, None] + 1 - i) / 2), axis=1)))


def elbo(state: VariationalState, data) -> float:
    """Evidence lower bound (untempered)."""
    X = as_data(data)
    phi = state.resp
    p = state.prior
    T, d = state.T, X.shape[1]
    alpha = state.concentration
    eld = expected_log_det(state.nu, state.scale_inv)
    elv, el1v = expected_log_sticks(state.gamma)

    ell = np.sum(phi * expected_loglik(state, X))
    prior_terms = elv + np.concatenate([[0.0], np.cumsum(el1v[:-1])])
    ez = np.sum(phi * prior_terms)

    g = state.gamma[:-1]
    e1, e2 = elv[:-1], el1v[:-1]
    ev = (T - 1) * np.log(alpha) + (alpha - 1) * np.sum(e2)
    eqv = np.sum(gammaln(g.sum(axis=1)) - gammaln(g[:, 0]) - gammaln(g[:, 1])
                 + (g[:, 0] - 1) * e1 + (g[:, 1] - 1) * e2)

    W = np.linalg.inv(state.scale_inv)
    dm = state.means - p.mean
    quad = np.einsum("ki,kij,kj->k", dm, W, dm)
    tr = np.einsum("ij,kji->k", p.scale_inv, W)
    p_nu = np.full(T, p.nu)
    p_si = np.repeat(p.scale_inv[None], T, axis=0)
    eeta = (0.5 * np.sum(d * np.log(p.kappa / (2 * np.pi)) + eld - d * p.kappa / state.kappa
                         - p.kappa * state.nu * quad)
            + np.sum(_log_wishart_norm(p_nu, p_si))
            + 0.5 * (p.nu - d - 1) * np.sum(eld) - 0.5 * np.sum(state.nu * tr))
    ent_wish = -_log_wishart_norm(state.nu, state.scale_inv) - 0.5 * (state.nu - d - 1) * eld \
        + 0.5 * state.nu * d
    eqeta = np.sum(0.5 * eld + 0.5 * d * np.log(state.kappa / (2 * np.pi)) - 0.5 * d - ent_wish)

    with np.errstate(divide="ignore", invalid="ignore"):
        eqz = np.sum(np.where(phi > 0, phi * np.log(phi), 0.0))
    return float(ell + ez + ev + eeta - eqv - eqeta - eqz)


def effective_components(state: VariationalState, mass_threshold: float = 1e-3) -> int:
    """Components whose responsibility mass exceeds ``mass_threshold * N``."""
    if not 0 < mass_threshold < 1:
        raise ValueError("mass_threshold must lie in (0, 1)")
    N = state.resp.shape[0]
    return int(np.sum(state.masses > mass_threshold * N))


def init_state(data, T: int, concentration: float = 1.0, seed=None,
               prior: Optional[NormalWishartPrior] = None) -> VariationalState:
    """Hard-assign points to ``T`` random data points, then one posterior update."""
    X = as_data(data)
    N, d = X.shape
    if T < 1 or T > N:
        raise ValueError(f"T must be in [1, {N}]")
    rng = np.random.default_rng(seed)
    prior = NormalWishartPrior.empirical(X) if prior is None else prior
    centers = X[rng.choice(N, size=T, replace=False)]
    d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
    resp = np.zeros((N, T))
    resp[np.arange(N), np.argmin(d2, axis=1)] = 1.0
    state = VariationalState(
        gamma=np.ones((T, 2)), means=centers, kappa=np.ones(T), nu=np.full(T, d + 2.0),
        scale_inv=np.repeat(prior.scale_inv[None], T, axis=0), resp=resp,
        concentration=float(concentration), prior=prior)
    return vb_m_step(state, X)


def _perturb(state, X, policy, rng):
    means = np.array(state.means)
    for j in range(state.T):
        w = state.resp[:, j]
        if w.sum() <= 0:
            continue
        axis, var = principal_axis(X, w)
        means[j] += policy.epsilon * np.sqrt(var) * rng.standard_normal() * axis
    return replace(state, means=means)


def dpmm_fit(data, T: int = 10, schedule: Optional[AnnealSchedule] = None,
             concentration: float = 1.0, seed=None,
             policy: PerturbPolicy = PerturbPolicy(0.0, "never"),
             resp_tol: float = 1e-4, init: Optional[VariationalState] = None,
             callback: Optional[Callable] = None,
             ) -> tuple[VariationalState, FitTrace]:
    """Coordinate-ascent VB with tempered responsibilities, stage by stage.

    ``schedule=None`` (or ``[1]``) is plain variational Bayes.  At beta = 1
    a stage stops on the relative ELBO change ``schedule.inner_tol``;
    tempered stages stop once no responsibility moves by more than
    ``resp_tol``.  The trace's log-likelihood column holds the ELBO.
    ``callback(k, beta, state, elbo)`` sees every recorded iterate.
    """
    X = as_data(data)
    schedule = AnnealSchedule((1.0,)) if schedule is None else schedule
    rng = np.random.default_rng(seed)
    state = init_state(X, T, concentration, rng) if init is None else init
    trace = FitTrace()
    t0 = time.perf_counter()
    bound = elbo(state, X)
    trace.record(0, schedule.betas[0], bound, 0.0)
    if callback:
        callback(0, schedule.betas[0], state, bound)
    it = 0
    last = len(schedule.betas) - 1
    converged = False
    for s, beta in enumerate(schedule.betas):
        converged = False
        for _ in range(schedule.inner_max_iters):
            resp = tempered_vb_e_step(state, X, beta)
            moved = float(np.max(np.abs(resp - state.resp)))
            state = vb_m_step(replace(state, resp=resp), X)
            new = elbo(state, X)
            it += 1
            trace.record(it, beta, new, time.perf_counter() - t0)
            if callback:
                callback(it, beta, state, new)
            if beta == 1:
                converged = relative_change(new, bound) < schedule.inner_tol
            else:
                converged = moved < resp_tol
            bound = new
            if converged:
                break
        if s < last and policy.active:
            state = _perturb(state, X, policy, rng)
    trace.reason = "converged" if converged else "max_iters"
    return state, trace
