"""Surrogate-assisted CMA-ES with a KL-controlled relearning schedule."""

from .benchmarks import BenchmarkInstance, BenchmarkSpec, make_instance
from .bfgs import BFGS
from .cma import CMAES
from .distribution import GaussianParams, kl_divergence, kl_error_bound, whiten
from .harness import ExperimentConfig, ecdf, emit_reports, run_experiment
from .records import EpochReport, RunRecord
from .schedule import KLACMES, ControllerConfig
from .surrogate import RankSVMSurrogate

__all__ = [
    "BFGS",
    "CMAES",
    "KLACMES",
    "BenchmarkInstance",
    "BenchmarkSpec",
    "ControllerConfig",
    "EpochReport",
    "ExperimentConfig",
    "GaussianParams",
    "RankSVMSurrogate",
    "RunRecord",
    "ecdf",
    "emit_reports",
    "kl_divergence",
    "kl_error_bound",
    "make_instance",
    "run_experiment",
    "whiten",
]

__version__ = "0.1.0"
