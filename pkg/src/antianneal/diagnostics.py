"""Convergence diagnostics: component overlap, projected-Hessian conditioning,
measured EM contraction rate and log-likelihood surface slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.special import logsumexp

from .mixture import (
    MixtureError,
    MixtureModel,
    _log_pdf_rows,
    as_data,
    log_component_densities,
    m_step,
    tempered_e_step,
)


class BasinEscapeError(MixtureError):
    """Perturbed EM iterates left the neighbourhood of the fixed point."""


@dataclass(frozen=True)
class OverlapMatrix:
    entries: np.ndarray
    max_overlap: float


def overlap_from_responsibilities(resp) -> OverlapMatrix:
    h = np.asarray(resp, dtype=float)
    N = h.shape[0]
    E = h.T @ h / N
    np.fill_diagonal(E, np.mean((1.0 - h) * h, axis=0))
    E = 0.5 * (E + E.T)
    return OverlapMatrix(E, float(E.max()))


def overlap_matrix(data, model: MixtureModel, beta: float = 1.0) -> OverlapMatrix:
    """Finite-sample pairwise overlap from tempered responsibilities.

    Off-diagonal ``e_ij = mean_t h_i h_j``; diagonal ``e_ii = mean_t h_i (1 - h_i)``.
    """
    return overlap_from_responsibilities(tempered_e_step(data, model, beta))


# --- Hessian conditioning ----------------------------------------------------

@dataclass(frozen=True)
class HessianDiagnostics:
    """Conditioning of the EM-projected Hessian.

    ``condition_number`` is the 2-norm condition number (extreme singular
    values) of ``E^T P H E``.  ``spectral_condition`` uses the moduli of its
    eigenvalues instead, ``symmetric_condition`` the eigenvalues of its
    symmetric part, and ``hessian_condition`` drops ``P`` altogether.
    """

    projected_hessian: np.ndarray
    condition_number: float
    basis_dim: int
    singular: bool
    spectral_condition: float
    symmetric_condition: float
    hessian_condition: float
    eigenvalues: np.ndarray


def _vech_index(d):
    return [(a, b) for a in range(d) for b in range(a, d)]


class _Coordinates:
    """Natural parameter vector: weights, means, then (optionally) covariances.

    Covariances are half-vectorized; an off-diagonal coordinate moves both
    symmetric entries.  In one dimension that coordinate is the variance.
    """

    def __init__(self, model: MixtureModel, include_cov: bool):
        self.model = model
        self.K, self.d = model.K, model.dim
        self.include_cov = include_cov
        self.vech = _vech_index(self.d)

    @property
    def size(self):
        return self.K + self.K * self.d + (self.K * len(self.vech) if self.include_cov else 0)

    def vector(self):
        m = self.model
        parts = [m.weights, m.means.ravel()]
        if self.include_cov:
            parts.append(np.array([m.covs[j][a, b] for j in range(self.K) for a, b in self.vech]))
        return np.concatenate(parts)

    def arrays(self, theta):
        K, d = self.K, self.d
        w = theta[:K]
        mu = theta[K:K + K * d].reshape(K, d)
        covs = np.array(self.model.covs)
        if self.include_cov:
            v = theta[K + K * d:].reshape(K, len(self.vech))
            for j in range(K):
                for i, (a, b) in enumerate(self.vech):
                    covs[j][a, b] = covs[j][b, a] = v[j, i]
        return w, mu, covs

    def gradient(self, X, theta):
        """Gradient of the log-likelihood, treating weights as free variables."""
        w, mu, covs = self.arrays(theta)
        logp = np.column_stack([np.log(w[j]) + _log_pdf_rows(X, mu[j], covs[j])
                                for j in range(self.K)])
        h = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        n = h.sum(axis=0)
        g = [n / w]
        g_mu, g_cov = [], []
        for j in range(self.K):
            P = np.linalg.inv(covs[j])
            diff = X - mu[j]
            g_mu.append(P @ (h[:, j] @ diff))
            if self.include_cov:
                S = (h[:, j, None] * diff).T @ diff
                G = 0.5 * P @ (S - n[j] * covs[j]) @ P
                g_cov.append([G[a, a] if a == b else G[a, b] + G[b, a] for a, b in self.vech])
        g.append(np.ravel(g_mu))
        if self.include_cov:
            g.append(np.ravel(g_cov))
        return np.concatenate(g)

    def em_preconditioner(self, N):
        """Block-diagonal EM matrix P with ``Theta_EM - Theta = P grad L``."""
        m = self.model
        K, d = self.K, self.d
        blocks = [(np.diag(m.weights) - np.outer(m.weights, m.weights)) / N]
        for j in range(K):
            blocks.append(m.covs[j] / (N * m.weights[j]))
        if self.include_cov:
            for j in range(K):
                S = m.covs[j]
                n = N * m.weights[j]
                B = np.empty((len(self.vech), len(self.vech)))
                for r, (a, b) in enumerate(self.vech):
                    for c, (e, f) in enumerate(self.vech):
                        if e == f:
                            B[r, c] = 2.0 / n * S[a, e] * S[e, b]
                        else:
                            B[r, c] = 1.0 / n * (S[a, e] * S[f, b] + S[a, f] * S[e, b])
                blocks.append(B)
        size = sum(b.shape[0] for b in blocks)
        P = np.zeros((size, size))
        i = 0
        for b in blocks:
            k = b.shape[0]
            P[i:i + k, i:i + k] = b
            i += k
        return P

    def constraint_basis(self):
        """Orthonormal basis of directions keeping the weights summing to one."""
        EA = null_space(np.ones((1, self.K)))
        rest = self.size - self.K
        E = np.zeros((self.size, EA.shape[1] + rest))
        E[:self.K, :EA.shape[1]] = EA
        E[self.K:, EA.shape[1]:] = np.eye(rest)
        return E


def fd_hessian(grad, theta, rel_step=1e-5):
    """Central differences of an analytic gradient, symmetrized."""
    n = theta.size
    H = np.empty((n, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(theta[i]))
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad(theta + e) - grad(theta - e)) / (2 * h)
    return H, 0.5 * (H + H.T)


def _kappa(eig):
    a = np.abs(eig)
    if a.min() <= a.max() * 1e-14:
        return np.inf
    return float(a.max() / a.min())


def projected_hessian_condition(data, model: MixtureModel,
                                include_cov: bool | None = None) -> HessianDiagnostics:
    """Condition number of ``E^T P H E`` at ``model`` (see :class:`HessianDiagnostics`).

    ``H`` is the finite-difference Hessian of the log-likelihood in natural
    coordinates, ``P`` the EM preconditioner and ``E`` a basis of the
    weight-sum constraint.  Covariance coordinates are included by default
    only in one dimension.  ``hessian_condition`` is the condition number of
    ``E^T H E`` alone, which does not depend on ``P``.
    """
    X = as_data(data)
    if include_cov is None:
        include_cov = model.dim == 1
    coords = _Coordinates(model, include_cov)
    theta = coords.vector()
    _, H = fd_hessian(lambda t: coords.gradient(X, t), theta)
    P = coords.em_preconditioner(X.shape[0])
    E = coords.constraint_basis()
    M = E.T @ P @ H @ E
    sv = np.linalg.svd(M, compute_uv=False)
    kappa = _kappa(sv)
    # P H is similar to a symmetric matrix, so the spectrum is real up to FD noise
    eig = np.sort(np.real(np.linalg.eigvals(M)))
    return HessianDiagnostics(
        projected_hessian=M,
        condition_number=kappa,
        basis_dim=E.shape[1],
        singular=not np.isfinite(kappa),
        spectral_condition=_kappa(eig),
        symmetric_condition=_kappa(np.linalg.eigvalsh(0.5 * (M + M.T))),
        hessian_condition=_kappa(np.linalg.eigvalsh(E.T @ H @ E)),
        eigenvalues=eig,
    )


# --- measured EM rate --------------------------------------------------------

def _flatten(model: MixtureModel, scale: float):
    return np.concatenate([model.weights, model.means.ravel() / scale,
                           model.covs.ravel() / scale ** 2])


def _tempered_em_step(X, model, beta, reg):
    return m_step(X, tempered_e_step(X, model, beta), reg)


def refine_fixed_point(data, model: MixtureModel, beta: float = 1.0, reg: float = 0.0,
                       tol: float = 1e-13, max_iters: int = 20000) -> MixtureModel:
    """Iterate the (tempered) EM map until parameters stop moving."""
    X = as_data(data)
    scale = float(np.sqrt(np.mean(np.var(X, axis=0))))
    cur = _flatten(model, scale)
    for _ in range(max_iters):
        model = _tempered_em_step(X, model, beta, reg)
        nxt = _flatten(model, scale)
        if np.linalg.norm(nxt - cur) <= tol * max(1.0, np.linalg.norm(nxt)):
            break
        cur = nxt
    return model


def empirical_em_rate(data, fixed_point: MixtureModel, beta: float = 1.0,
                      rel_scale: float = 1e-3, restarts: int = 5, iters: int = 60,
                      tail: int = 10, seed=0, reg: float = 0.0,
                      refine: bool = True) -> float:
    """Median contraction ratio of (tempered) EM near a fixed point.

    Each restart perturbs the fixed point by ``rel_scale`` of the parameter
    magnitudes, runs ``iters`` EM steps and takes the median of the last
    ``tail`` ratios ``|Theta_{k+1} - Theta*| / |Theta_k - Theta*|`` that are
    above the round-off floor.  The median over restarts is returned.
    """
    X = as_data(data)
    rng = np.random.default_rng(seed)
    scale = float(np.sqrt(np.mean(np.var(X, axis=0))))
    star = refine_fixed_point(X, fixed_point, beta, reg) if refine else fixed_point
    ref = _flatten(star, scale)
    floor = 1e-10 * max(1.0, np.linalg.norm(ref))
    rates = []
    for _ in range(restarts):
        w = star.weights * np.exp(rel_scale * rng.standard_normal(star.K))
        mu = star.means + rel_scale * (np.abs(star.means) + scale) * rng.standard_normal(star.means.shape)
        covs = star.covs * np.exp(rel_scale * rng.standard_normal(star.K))[:, None, None]
        model = MixtureModel(w / w.sum(), mu, covs)
        dist = [np.linalg.norm(_flatten(model, scale) - ref)]
        for _ in range(iters):
            model = _tempered_em_step(X, model, beta, reg)
            dist.append(np.linalg.norm(_flatten(model, scale) - ref))
            if dist[-1] > 100 * dist[0]:
                raise BasinEscapeError(
                    f"EM moved {dist[-1]:.3e} away from the fixed point (started at {dist[0]:.3e})")
            if dist[-1] < floor:
                break
        dist = np.array(dist)
        valid = np.flatnonzero(dist[:-1] > floor)
        ratios = dist[valid + 1] / dist[valid]
        rates.append(float(np.median(ratios[-tail:])))
    rate = float(np.median(rates))
    if rate >= 1.0:
        raise BasinEscapeError(f"measured contraction ratio {rate:.4f} is not below 1")
    return rate


# --- surface slices ----------------------------------------------------------

def loglik_surface_slice(data, template: MixtureModel, grid1, grid2,
                         components=(0, 1), axis=None) -> np.ndarray:
    """Log-likelihood over a grid of two component means, all else fixed.

    Entry ``[a, b]`` sets the mean of ``components[0]`` to ``grid1[a]`` and of
    ``components[1]`` to ``grid2[b]``.  In more than one dimension the grid
    values are positions along ``axis`` (default: first coordinate) while
    the orthogonal part of each template mean is kept.
    """
    X = as_data(data)
    d = template.dim
    axis = np.eye(d)[0] if axis is None else np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    i, j = components
    base = np.array(template.means)
    ortho = base - np.outer(base @ axis, axis)
    # per-component log densities only depend on that component's mean
    cache_i = {}
    cache_j = {}
    rest = [k for k in range(template.K) if k not in (i, j)]
    logp_rest = log_component_densities(X, template)[:, rest] if rest else np.empty((X.shape[0], 0))

    def col(k, value, cache):
        if value not in cache:
            cache[value] = np.log(template.weights[k]) + _log_pdf_rows(
                X, ortho[k] + value * axis, template.covs[k])
        return cache[value]

    out = np.empty((len(grid1), len(grid2)))
    for a, v1 in enumerate(np.asarray(grid1, dtype=float)):
        ci = col(i, float(v1), cache_i)
        for b, v2 in enumerate(np.asarray(grid2, dtype=float)):
            cj = col(j, float(v2), cache_j)
            out[a, b] = np.sum(logsumexp(np.column_stack([ci, cj, logp_rest]), axis=1))
    return out


__all__ = [
    "OverlapMatrix", "HessianDiagnostics", "BasinEscapeError", "overlap_matrix",
    "overlap_from_responsibilities", "projected_hessian_condition", "fd_hessian",
    "empirical_em_rate", "refine_fixed_point", "loglik_surface_slice",
]
