"""Ground-truth error: symmetric KL between Gaussians under optimal matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..mixture import GaussianComponent, MixtureModel


def symmetric_kl_gaussian(a: GaussianComponent, b: GaussianComponent) -> float:
    """KL(a, b) + KL(b, a) for two Gaussians in closed form."""
    return _symkl(a.mean, a.cov, b.mean, b.cov)


def _symkl(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError(f"dimension mismatch: {mu_a.size} vs {mu_b.size}")
    d = mu_a.size
    inv_a = np.linalg.inv(cov_a)
    inv_b = np.linalg.inv(cov_b)
    diff = mu_a - mu_b
    val = (0.5 * np.trace(inv_a @ cov_b + inv_b @ cov_a)
           + 0.5 * diff @ (inv_a + inv_b) @ diff - d)
    return max(float(val), 0.0)


@dataclass(frozen=True)
class ComponentMatching:
    """``permutation[j]`` is the true component matched to estimate ``j``."""

    permutation: tuple
    total_cost: float


def divergence_matrix(estimated: MixtureModel, truth: MixtureModel) -> np.ndarray:
    if estimated.dim != truth.dim:
        raise ValueError("models have different dimensions")
    C = np.empty((estimated.K, truth.K))
    for j in range(estimated.K):
        for l in range(truth.K):
            C[j, l] = _symkl(estimated.means[j], estimated.covs[j],
                             truth.means[l], truth.covs[l])
    return C


def match_components(estimated: MixtureModel, truth: MixtureModel) -> ComponentMatching:
    """Minimum-cost one-to-one matching of estimated to true components.

    With unequal K the smaller side is matched completely and the surplus
    components on the larger side stay unmatched (``-1`` in the
    permutation for unmatched estimates).
    """
    C = divergence_matrix(estimated, truth)
    rows, cols = linear_sum_assignment(C)
    perm = [-1] * estimated.K
    for r, c in zip(rows, cols):
        perm[r] = int(c)
    return ComponentMatching(tuple(perm), float(C[rows, cols].sum()))


def param_error(estimated: MixtureModel, truth: MixtureModel) -> float:
    """Sum of matched symmetric KL divergences; mixing weights do not enter."""
    return match_components(estimated, truth).total_cost


def weight_error(estimated: MixtureModel, truth: MixtureModel) -> float:
    """L1 distance between matched mixing weights (logged beside ``param_error``)."""
    m = match_components(estimated, truth)
    return float(sum(abs(estimated.weights[j] - truth.weights[l])
                     for j, l in enumerate(m.permutation) if l >= 0))
