"""Bayesian latent-time disease progression modeling.

Realigns longitudinal multi-marker trajectories onto a per-subject latent
time-to-clinical-diagnosis axis, anchoring the latent onset to partially
observed diagnosis events, and produces severity-scale trajectory
predictions and marker-ordering summaries.
"""

from .data import (
    CohortData,
    ColumnSchema,
    DiagnosisStatus,
    Observation,
    Subject,
    dataset_sha256,
    load_cohort,
    summarize_cohort,
    write_cohort,
)
from .diagnostics import compute_ess, compute_rhat, gate_fit, summarize_draws
from .model import (
    ModelSpec,
    ParameterValues,
    ProgressionModel,
    build_model,
    gradient_check,
    latent_time,
    make_model_spec,
)
from .prediction import (
    crossing_times,
    default_grid,
    mean_severity,
    rmse,
    trajectory,
)
from .sampler import PosteriorDraws, SamplerConfig, initialize_chains, run_nuts
from .simulate import (
    SimConfig,
    default_scenario,
    ordering_scenario,
    simulate,
)
from .transform import (
    NormalizedObservation,
    TransformSpec,
    assume_normalized,
    fit_transform,
    fit_weighted_ecdf,
    normalize_cohort,
    severity_of,
)

__version__ = "0.1.0"

__all__ = [
    "CohortData",
    "ColumnSchema",
    "DiagnosisStatus",
    "ModelSpec",
    "NormalizedObservation",
    "Observation",
    "ParameterValues",
    "PosteriorDraws",
    "ProgressionModel",
    "SamplerConfig",
    "SimConfig",
    "Subject",
    "TransformSpec",
    "assume_normalized",
    "build_model",
    "compute_ess",
    "compute_rhat",
    "crossing_times",
    "dataset_sha256",
    "default_grid",
    "default_scenario",
    "fit_transform",
    "fit_weighted_ecdf",
    "gate_fit",
    "gradient_check",
    "initialize_chains",
    "latent_time",
    "load_cohort",
    "make_model_spec",
    "mean_severity",
    "normalize_cohort",
    "ordering_scenario",
    "rmse",
    "run_nuts",
    "severity_of",
    "simulate",
    "summarize_cohort",
    "summarize_draws",
    "trajectory",
    "write_cohort",
]
