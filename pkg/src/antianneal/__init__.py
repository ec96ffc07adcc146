"""Gaussian mixture fitting with deterministic anti-annealing EM."""

from .mixture import (
    EmptyComponentError,
    FactorizationError,
    FitTrace,
    GaussianComponent,
    MixtureError,
    MixtureModel,
    e_step,
    em_fit,
    log_gaussian_pdf,
    log_likelihood,
    m_step,
    tempered_e_step,
)
from .anneal import (
    AnnealSchedule,
    PerturbPolicy,
    anneal_fit,
    hybrid_schedule,
    perturb_means,
    principal_axis,
)

__version__ = "0.1.0"
