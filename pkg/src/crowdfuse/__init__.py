"""Paired RGB-thermal crowd counting toolkit.

Provides a hierarchical-transformer counting model in monomodal and three
fusion flavors (early, late, deep exchange), a point-supervised training
loop, MAE/RMSE evaluation, a deterministic synthetic paired-scene generator,
and dataset bias audit procedures.
"""

from .audit import AuditConfig, AuditReport, brightness, correlation_report, run_audit, sample_subset
from .data import CrowdSample, DatasetManifest, PointAnnotation, load_all, load_manifest, load_sample
from .errors import (
    CapacityError,
    ConfigError,
    CrowdfuseError,
    ManifestError,
    NumericError,
    ValidationError,
)
from .head import DensityMap, HeadConfig, predict_count
from .loss import LossConfig, bayesian_loss, posterior_weights
from .metrics import EvalResult, evaluate, mae_rmse
from .models import (
    ModelVariant,
    build_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .synth import SynthSpec, generate_dataset, generate_sample
from .train import Hyperparams, TrainResult, augment, train

__version__ = "0.1.0"

__all__ = [
    "AuditConfig",
    "AuditReport",
    "CapacityError",
    "ConfigError",
    "CrowdSample",
    "CrowdfuseError",
    "DatasetManifest",
    "DensityMap",
    "EvalResult",
    "HeadConfig",
    "Hyperparams",
    "LossConfig",
    "ManifestError",
    "ModelVariant",
    "NumericError",
    "PointAnnotation",
    "SynthSpec",
    "TrainResult",
    "ValidationError",
    "augment",
    "bayesian_loss",
    "brightness",
    "build_model",
    "correlation_report",
    "count_parameters",
    "evaluate",
    "generate_dataset",
    "generate_sample",
    "load_all",
    "load_checkpoint",
    "load_manifest",
    "load_sample",
    "mae_rmse",
    "posterior_weights",
    "predict_count",
    "run_audit",
    "sample_subset",
    "save_checkpoint",
    "train",
]
