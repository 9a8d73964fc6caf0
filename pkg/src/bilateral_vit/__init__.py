"""Fovea localisation with a two-branch (fundus + vessel) vision transformer."""

__version__ = "0.1.0"

from .types import (
    ConfigError,
    DiseaseStatus,
    EvalReport,
    EvalThresholds,
    FundusSample,
    NetworkConfig,
    PreprocessTransform,
    ProbabilityMap,
    Variant,
    VesselMap,
    validate_sample,
)

__all__ = [
    "ConfigError",
    "DiseaseStatus",
    "EvalReport",
    "EvalThresholds",
    "FundusSample",
    "NetworkConfig",
    "PreprocessTransform",
    "ProbabilityMap",
    "Variant",
    "VesselMap",
    "validate_sample",
]
