"""Consensus multi-model Kalman filtering toolkit.

Fuses heterogeneous one-step predictors (a physics-based single-track model
and data-driven regressors) through iterative consensus fusion, with two
interchangeable covariance-propagation routes: analytic propagation through a
lifted bilinear (Koopman-style) model, and ensemble spread.
"""

from .core import DEFAULT_EIG_FLOOR, ModelBelief, khatri_rao, kron, psd_project
from .ensemble import (
    EnsembleSet,
    adapt_sampling_cov,
    ensemble_statistics,
    generate_ensemble,
    propagate_ensemble,
)
from .exceptions import ConfigError, DataFormatError, NumericError
from .fusion import (
    ChannelConfig,
    InnovationWindow,
    MeasurementFrame,
    MultiModelFilter,
    Transform,
    feedback,
    fuse_all,
    fuse_pair,
    measurement_update,
)
from .koopman import KoopmanEstimator, LiftedBelief, RffLifting
from .pipeline import EvaluationReport, compare_models, evaluate, run_pipeline
from .predictors import PhysicsPredictor, RffRegressor, fit_rff_predictor
from .simulator import (
    Scenario,
    SensorConfig,
    Trajectory,
    export_csv,
    import_csv,
    sense,
    simulate_truth,
)
from .vehicle import VehicleParams, bicycle_jacobian, bicycle_step

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_EIG_FLOOR",
    "ChannelConfig",
    "ConfigError",
    "DataFormatError",
    "EnsembleSet",
    "EvaluationReport",
    "InnovationWindow",
    "KoopmanEstimator",
    "LiftedBelief",
    "MeasurementFrame",
    "ModelBelief",
    "MultiModelFilter",
    "NumericError",
    "PhysicsPredictor",
    "RffLifting",
    "RffRegressor",
    "Scenario",
    "SensorConfig",
    "Trajectory",
    "Transform",
    "VehicleParams",
    "adapt_sampling_cov",
    "bicycle_jacobian",
    "bicycle_step",
    "compare_models",
    "ensemble_statistics",
    "evaluate",
    "export_csv",
    "feedback",
    "fit_rff_predictor",
    "fuse_all",
    "fuse_pair",
    "generate_ensemble",
    "import_csv",
    "khatri_rao",
    "kron",
    "measurement_update",
    "propagate_ensemble",
    "psd_project",
    "run_pipeline",
    "sense",
    "simulate_truth",
]
