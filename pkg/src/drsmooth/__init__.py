"""Doubly robust smoothing of linear dynamical processes.

Joint estimation of the state trajectory and sparse outlier fields in both
the state dynamics and the measurements, via l1-regularized weighted least
squares solved by coordinate descent (identity noise gain) or ADMM
(generalized models), with data-driven regularization selection, classical
robust baselines, and a Monte-Carlo tracking benchmark harness.
"""

__version__ = "0.1.0"

from .model import (StateSpaceModel, ObservationBatch, OutlierField,
                    ScenarioConfig, OutlierModel, dwna_model, simulate, validate)
from .kalman import (FilterState, SmootherOutput, kalman_filter,
                     fixed_interval_ks, fixed_lag_ks)
from .batch import BatchSystem, stack_batch
from .coordinate import DrsConfig, drs_fixed_interval, objective, soft_threshold
from .admm import AdmmState, admm_drs, admm_residuals
from .lambda_select import (LambdaGrid, SelectionResult, lambda_bounds,
                            build_grid, solve_path, select_known_fraction,
                            select_avd)
from .refine import ReweightConfig, reweighted_drs, ks_rerun_on_support
from .fixed_lag import OnlineFixedLagDrs, online_step, fixed_lag_drs_batch
from .baselines import (HuberConfig, RansacConfig, huber_rho, huber_smoother,
                        ransac_smoother)
from .bench import ExperimentSpec, RmseReport, rmse, run_experiment

__all__ = [
    "StateSpaceModel", "ObservationBatch", "OutlierField", "ScenarioConfig",
    "OutlierModel", "dwna_model", "simulate", "validate",
    "FilterState", "SmootherOutput", "kalman_filter", "fixed_interval_ks",
    "fixed_lag_ks", "BatchSystem", "stack_batch",
    "DrsConfig", "drs_fixed_interval", "objective", "soft_threshold",
    "AdmmState", "admm_drs", "admm_residuals",
    "LambdaGrid", "SelectionResult", "lambda_bounds", "build_grid",
    "solve_path", "select_known_fraction", "select_avd",
    "ReweightConfig", "reweighted_drs", "ks_rerun_on_support",
    "OnlineFixedLagDrs", "online_step", "fixed_lag_drs_batch",
    "HuberConfig", "RansacConfig", "huber_rho", "huber_smoother",
    "ransac_smoother", "ExperimentSpec", "RmseReport", "rmse", "run_experiment",
]
