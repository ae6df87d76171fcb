"""Non-stationary direct preference optimization over log-linear policies."""

from nsdpo.core import (
    DriftSchedule,
    Environment,
    OfflineDataset,
    TestSet,
    changepoint_schedule,
    default_schedule,
    feature_map,
    sample_dataset,
    sample_test_set,
    stationary_schedule,
)
from nsdpo.objectives import EmptyWindowError, ObjectiveConfig, grad, loss
from nsdpo.optimizer import TrainConfig, project_params, train

__version__ = "0.1.0"

__all__ = [
    "DriftSchedule",
    "Environment",
    "OfflineDataset",
    "TestSet",
    "changepoint_schedule",
    "default_schedule",
    "feature_map",
    "sample_dataset",
    "sample_test_set",
    "stationary_schedule",
    "EmptyWindowError",
    "ObjectiveConfig",
    "grad",
    "loss",
    "TrainConfig",
    "project_params",
    "train",
]
