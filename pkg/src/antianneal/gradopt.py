"""Gradient-based baselines: expectation conjugate gradient and dense BFGS.

Both optimize the negative log-likelihood over an unconstrained packing of
the mixture: softmax logits for the weights (last logit pinned at 0),
the means, and the upper-triangular factors ``U_j`` with
``Sigma_j = U_j^T U_j``.
"""

from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

from .mixture import (
    FitTrace,
    MixtureModel,
    as_data,
    em_fit,
    log_component_densities,
    relative_change,
)


class InvalidTrialPoint(ValueError):
    """Packed vector does not map to a usable mixture (collapsed factor, zero weight)."""


# --- packing -----------------------------------------------------------------

def packed_size(K: int, d: int) -> int:
    return K + K * d + K * d * (d + 1) // 2


def pack(model: MixtureModel) -> np.ndarray:
    K, d = model.K, model.dim
    lam = np.log(model.weights) - np.log(model.weights[-1])
    lam[-1] = 0.0
    iu = np.triu_indices(d)
    tri = []
    for j in range(K):
        U = _upper_cholesky(model.covs[j])
        tri.append(U[iu])
    return np.concatenate([lam, model.means.ravel(), np.concatenate(tri)])


def _upper_cholesky(cov):
    from .mixture import FactorizationError
    try:
        return linalg.cholesky(cov, lower=False)
    except linalg.LinAlgError as exc:
        raise FactorizationError(f"covariance is not positive definite: {exc}") from exc


def _split(theta, K, d):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (packed_size(K, d),):
        raise ValueError(f"packed vector has length {theta.size}, expected {packed_size(K, d)}")
    lam = theta[:K]
    means = theta[K:K + K * d].reshape(K, d)
    U = np.zeros((K, d, d))
    iu = np.triu_indices(d)
    m = d * (d + 1) // 2
    for j in range(K):
        U[j][iu] = theta[K + K * d + j * m: K + K * d + (j + 1) * m]
    return lam, means, U


def unpack(theta, K: int, d: int, floor: float = 0.0) -> MixtureModel:
    """Inverse of :func:`pack`.

    ``floor`` rejects factors with a diagonal entry of magnitude below it,
    raising :class:`InvalidTrialPoint`.
    """
    lam, means, U = _split(theta, K, d)
    diag = np.abs(np.diagonal(U, axis1=1, axis2=2))
    if not np.all(np.isfinite(theta)):
        raise InvalidTrialPoint("non-finite packed parameters")
    if np.any(diag <= floor):
        raise InvalidTrialPoint(f"Cholesky diagonal {diag.min():.3e} below floor {floor:.3e}")
    w = softmax(lam)
    if np.any(w <= 0):
        raise InvalidTrialPoint("a mixing weight underflowed to zero")
    covs = np.einsum("kji,kjl->kil", U, U)
    try:
        return MixtureModel(w, means, covs)
    except Exception as exc:  # noqa: BLE001 - any failure makes the trial unusable
        raise InvalidTrialPoint(str(exc)) from exc


# --- gradients ---------------------------------------------------------------

def natural_gradient(data, model: MixtureModel):
    """Log-likelihood and its gradient in natural coordinates.

    Returns ``(L, dL/dalpha, dL/dmu, dL/dSigma)`` where the weights are
    treated as free (unnormalized) variables and ``dL/dSigma`` is the
    symmetric matrix ``G`` with ``dL = tr(G dSigma)``.
    """
    X = as_data(data)
    logp = log_component_densities(X, model)
    lse = logsumexp(logp, axis=1, keepdims=True)
    h = np.exp(logp - lse)
    n = h.sum(axis=0)
    K, d = model.K, model.dim
    g_alpha = n / model.weights
    g_mu = np.empty((K, d))
    g_cov = np.empty((K, d, d))
    for j in range(K):
        P = np.linalg.inv(model.covs[j])
        diff = X - model.means[j]
        g_mu[j] = P @ (h[:, j] @ diff)
        S = (h[:, j, None] * diff).T @ diff
        G = 0.5 * P @ (S - n[j] * model.covs[j]) @ P
        g_cov[j] = 0.5 * (G + G.T)
    return float(lse.sum()), g_alpha, g_mu, g_cov, h


def neg_loglik_and_grad(theta, data, K: int, d: int, floor: float = 0.0):
    """``-L`` and its gradient with respect to the packed vector."""
    model = unpack(theta, K, d, floor)
    L, _, g_mu, g_cov, h = natural_gradient(data, model)
    g_lam = h.sum(axis=0) - h.shape[0] * model.weights
    _, _, U = _split(theta, K, d)
    iu = np.triu_indices(d)
    g_U = np.concatenate([(2.0 * U[j] @ g_cov[j])[iu] for j in range(K)])
    grad = np.concatenate([g_lam, g_mu.ravel(), g_U])
    return -L, -grad


# --- line search -------------------------------------------------------------

def cubic_line_search(fun, x, f0, g0, s, step, sig=0.1, rho=0.05,
                      max_evals=20, ext=3.0, interp=0.1):
    """Polynomial line search satisfying the strong Wolfe conditions.

    Extrapolates with cubic fits until the slope condition brackets a
    minimum, then interpolates (quadratic or cubic) inside the bracket.
    ``fun`` returns ``(f, g)`` and may raise :class:`InvalidTrialPoint`;
    such trials are treated as infinitely bad.

    Returns ``(ok, step, f, g, best)`` where ``best`` is the lowest
    ``(x, f, g)`` seen, which callers may fall back to on failure.
    """
    d0 = float(g0 @ s)
    best = (x, f0, g0)
    evals = max_evals

    def evaluate(t):
        try:
            f, g = fun(x + t * s)
            if not (np.isfinite(f) and np.all(np.isfinite(g))):
                raise InvalidTrialPoint("non-finite objective")
            return f, g, True
        except InvalidTrialPoint:
            return np.inf, np.zeros_like(g0), False

    x2, f2, d2 = 0.0, f0, d0
    f3, g3 = f0, g0
    x3 = step
    while True:
        ok = False
        while not ok and evals > 0:
            evals -= 1
            f3, g3, ok = evaluate(x3)
            if not ok:
                x3 = 0.5 * (x2 + x3)
        if not ok:
            return False, 0.0, f0, g0, best
        if f3 < best[1]:
            best = (x + x3 * s, f3, g3)
        d3 = float(g3 @ s)
        if d3 > sig * d0 or f3 > f0 + x3 * rho * d0 or evals == 0:
            break
        x1, f1, d1 = x2, f2, d2
        x2, f2, d2 = x3, f3, d3
        A = 6 * (f1 - f2) + 3 * (d2 + d1) * (x2 - x1)
        B = 3 * (f2 - f1) - (2 * d1 + d2) * (x2 - x1)
        disc = B * B - A * d1 * (x2 - x1)
        with np.errstate(all="ignore"):
            x3 = x1 - d1 * (x2 - x1) ** 2 / (B + np.sqrt(disc)) if disc >= 0 else np.nan
        if not np.isfinite(x3) or x3 < 0 or x3 > x2 * ext:
            x3 = x2 * ext
        elif x3 < x2 + interp * (x2 - x1):
            x3 = x2 + interp * (x2 - x1)

    x4 = f4 = d4 = None
    while (abs(d3) > -sig * d0 or f3 > f0 + x3 * rho * d0) and evals > 0:
        if d3 > 0 or f3 > f0 + x3 * rho * d0:
            x4, f4, d4 = x3, f3, d3
        else:
            x2, f2, d2 = x3, f3, d3
        with np.errstate(all="ignore"):
            if f4 > f0:
                x3 = x2 - (0.5 * d2 * (x4 - x2) ** 2) / (f4 - f2 - d2 * (x4 - x2))
            else:
                A = 6 * (f2 - f4) / (x4 - x2) + 3 * (d4 + d2)
                B = 3 * (f4 - f2) - (2 * d2 + d4) * (x4 - x2)
                x3 = x2 + (np.sqrt(B * B - A * d2 * (x4 - x2) ** 2) - B) / A
        if not np.isfinite(x3):
            x3 = 0.5 * (x2 + x4)
        x3 = max(min(x3, x4 - interp * (x4 - x2)), x2 + interp * (x4 - x2))
        evals -= 1
        f3, g3, ok = evaluate(x3)
        d3 = float(g3 @ s) if ok else 0.0
        if f3 < best[1]:
            best = (x + x3 * s, f3, g3)
    if abs(d3) < -sig * d0 and f3 < f0 + x3 * rho * d0:
        return True, x3, f3, g3, best
    return False, x3, f3, g3, best


# --- optimizers --------------------------------------------------------------

def _stop(f_new, f_old, tol):
    return relative_change(f_new, f_old) < tol


def cg_minimize(fun, x0, tol=1e-10, max_iters=1000, callback=None, gtol=0.0):
    """Polak-Ribiere conjugate gradients with the cubic line search.

    Stops when the relative change of ``f`` between accepted steps drops
    below ``tol``.  Returns ``(x, fvals, status)``; ``fvals[0]`` is the
    starting value and ``fvals[k]`` follows accepted step ``k``.
    ``callback(k, x, f)`` sees every accepted iterate.
    """
    x = np.asarray(x0, dtype=float)
    f0, g0 = fun(x)
    fvals = [f0]
    if callback:
        callback(0, x, f0)
    if np.linalg.norm(g0) <= gtol:
        return x, fvals, "converged"
    s = -g0
    d0 = float(-s @ s)
    step = 1.0 / (1.0 - d0)
    failed_last = False
    status = "max_iters"
    k = 0
    while k < max_iters:
        ok, t, f3, g3, best = cubic_line_search(fun, x, f0, g0, s, step)
        if ok:
            x = x + t * s
            gg = float(g0 @ g0)
            beta_pr = max(float(g3 @ g3 - g0 @ g3), 0.0) / max(gg, np.finfo(float).tiny)
            s = beta_pr * s - g3
            f_old = f0
            f0, g0 = f3, g3
            d_prev = d0
            d0 = float(g0 @ s)
            if d0 >= 0:
                s = -g0
                d0 = float(-s @ s)
            step = t * min(10.0, d_prev / min(d0, -np.finfo(float).tiny))
            failed_last = False
        else:
            bx, bf, bg = best
            moved = bf < f0
            f_old = f0
            if moved:
                x, f0, g0 = bx, bf, bg
            if failed_last and not moved:
                status = "line-search-failed"
                break
            s = -g0
            d0 = float(-s @ s)
            step = 1.0 / (1.0 - d0)
            failed_last = True
            if not moved:
                continue
        k += 1
        fvals.append(f0)
        if callback:
            callback(k, x, f0)
        if _stop(f0, f_old, tol) or np.linalg.norm(g0) <= gtol:
            status = "converged"
            break
    return x, fvals, status


def bfgs_minimize(fun, x0, tol=1e-10, max_iters=1000, callback=None, gtol=0.0):
    """Dense BFGS with a strong-Wolfe line search.

    The inverse-Hessian update is skipped when ``y.s`` is not safely
    positive.  A failed line search resets to steepest descent once before
    giving up with status ``"line-search-failed"``.
    """
    x = np.asarray(x0, dtype=float)
    n = x.size
    f0, g0 = fun(x)
    fvals = [f0]
    if callback:
        callback(0, x, f0)
    if np.linalg.norm(g0) <= gtol:
        return x, fvals, "converged"
    H = np.eye(n)
    scaled = False
    status = "max_iters"
    retried = False
    k = 0
    while k < max_iters:
        p = -H @ g0
        if float(p @ g0) >= 0:
            H = np.eye(n)
            scaled = False
            p = -g0
        step = 1.0 if scaled else 1.0 / max(1.0, np.linalg.norm(g0))
        ok, t, f3, g3, best = cubic_line_search(fun, x, f0, g0, p, step, sig=0.9, rho=1e-4)
        if not ok:
            bx, bf, bg = best
            if bf < f0:
                x_new, f3, g3 = bx, bf, bg
            elif not retried:
                H = np.eye(n)
                scaled = False
                retried = True
                continue
            else:
                status = "line-search-failed"
                break
        else:
            x_new = x + t * p
        retried = False
        sv = x_new - x
        yv = g3 - g0
        sy = float(sv @ yv)
        if sy > 1e-12 * np.linalg.norm(sv) * np.linalg.norm(yv):
            if not scaled:
                H = np.eye(n) * (sy / float(yv @ yv))
                scaled = True
            r = 1.0 / sy
            Hy = H @ yv
            H = H - r * (np.outer(sv, Hy) + np.outer(Hy, sv)) + (r * r * float(yv @ Hy) + r) * np.outer(sv, sv)
        f_old = f0
        x, f0, g0 = x_new, f3, g3
        k += 1
        fvals.append(f0)
        if callback:
            callback(k, x, f0)
        if _stop(f0, f_old, tol) or np.linalg.norm(g0) <= gtol:
            status = "converged"
            break
    return x, fvals, status


def _fit(minimizer, data, init, tol, max_iters, callback, floor_scale):
    X = as_data(data)
    K, d = init.K, init.dim
    floor = floor_scale * float(np.sqrt(np.mean(np.var(X, axis=0))))

    # the last logit stays pinned at 0, so the optimizer never sees it
    def full(z):
        return np.insert(z, K - 1, 0.0)

    def fun(z):
        f, g = neg_loglik_and_grad(full(z), X, K, d, floor)
        return f, np.delete(g, K - 1)

    trace = FitTrace()
    t0 = time.perf_counter()

    def cb(k, theta, f):
        trace.record(k, 1.0, -f, time.perf_counter() - t0)
        if callback:
            callback(k, unpack(full(theta), K, d))

    z0 = np.delete(pack(init), K - 1)
    z, _, status = minimizer(fun, z0, tol=tol, max_iters=max_iters, callback=cb)
    trace.reason = status
    return unpack(full(z), K, d), trace


def ecg_fit(data, init: MixtureModel, tol: float = 1e-10, max_iters: int = 1000,
            callback: Optional[Callable[[int, MixtureModel], None]] = None,
            floor_scale: float = 1e-8) -> tuple[MixtureModel, FitTrace]:
    """Conjugate-gradient ascent on the log-likelihood from ``init``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    return _fit(cg_minimize, data, init, tol, max_iters, callback, floor_scale)


def bfgs_fit(data, init: MixtureModel, tol: float = 1e-10, max_iters: int = 1000,
             callback: Optional[Callable[[int, MixtureModel], None]] = None,
             floor_scale: float = 1e-8) -> tuple[MixtureModel, FitTrace]:
    """Quasi-Newton (BFGS) ascent on the log-likelihood from ``init``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    return _fit(bfgs_minimize, data, init, tol, max_iters, callback, floor_scale)


def em_warm_start(data, init: MixtureModel, iters: int = 5) -> MixtureModel:
    """A few plain EM iterations, used to initialize the gradient methods."""
    model, _ = em_fit(data, init, tol=np.finfo(float).tiny, max_iters=iters)
    return model
