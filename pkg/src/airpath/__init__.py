"""Gain-scheduled rate-based MPC toolkit for diesel airpath tracking."""

__version__ = "0.1.0"

from .config import ToolkitConfig, load_config, save_config
from .cycles import CycleKind, DriveCycle, make_cycle
from .lpv import (LinearSubmodel, LpvModel, ModelVariant, ScheduledModel,
                  predict_absolute, predict_rate)
from .mpc import (ExtendedState, MpcConfig, MpcController, MpcSolution,
                  StepDiagnostics, build_extended, build_qp, mpc_step,
                  solve_tracking_qp, terminal_penalty, tracking_dynamics)
from .plant import (ActuatorInput, AirpathPlant, OperatingPoint, PlantOutput,
                    PlantState, ThermalMode, egr_rate)
from .qp import QpResult, QpStatus, solve_qp
from .riccati import dare_residual, dlqr, solve_dare
from .runner import (SimLog, TrackingReport, VariantStats, run_cycle,
                     run_step_test, tracking_report)
from .sysid import (CycleRecord, Experiment, ValidationReport,
                    build_lpv_variant, fit_submodel, generate_perturbation,
                    record_validation_cycle, run_experiment, validate_model)
from .tables import FeedforwardTable, SetpointTables, build_ff_table
from .tuning import (RegionMap, ReferenceSpec, StepMetrics, TuneResult,
                     assign_regions, desired_response, measure_step_metrics,
                     trace_to_csv, tune_point, tune_regions)

__all__ = [
    "ToolkitConfig", "load_config", "save_config",
    "ActuatorInput", "AirpathPlant", "OperatingPoint", "PlantOutput",
    "PlantState", "ThermalMode", "egr_rate",
    "LinearSubmodel", "LpvModel", "ModelVariant", "ScheduledModel",
    "predict_absolute", "predict_rate",
    "CycleRecord", "Experiment", "ValidationReport",
    "build_lpv_variant", "fit_submodel", "generate_perturbation",
    "record_validation_cycle", "run_experiment", "validate_model",
    "QpResult", "QpStatus", "solve_qp",
    "dare_residual", "dlqr", "solve_dare",
    "ExtendedState", "MpcConfig", "MpcController", "MpcSolution",
    "StepDiagnostics", "build_extended", "build_qp", "mpc_step",
    "solve_tracking_qp", "terminal_penalty", "tracking_dynamics",
    "CycleKind", "DriveCycle", "make_cycle",
    "SetpointTables", "FeedforwardTable", "build_ff_table",
    "SimLog", "TrackingReport", "VariantStats", "run_cycle",
    "run_step_test", "tracking_report",
    "RegionMap", "ReferenceSpec", "StepMetrics", "TuneResult",
    "assign_regions", "desired_response", "measure_step_metrics",
    "trace_to_csv", "tune_point", "tune_regions",
]
