"""Iteration-level simulator and speculation controller for MoE decoding."""
from specmoe.controller import ControllerConfig, SpeculationController, hill_climb_next_k
from specmoe.cost_model import (
    ConfigError,
    DraftCostModel,
    ExpertConfig,
    FixedCostModel,
    MoECostModel,
    draft_preset,
    expected_unique_experts,
    model_preset,
)
from specmoe.engine import Policy, run_request, run_scenario, run_stream
from specmoe.kernels import BACKEND
from specmoe.utility import IterationRecord, UtilityAnalyzer, run_utility
from specmoe.workload import AcceptanceTrace, WorkloadProfile, load_task

__version__ = "0.1.0"

__all__ = [
    "AcceptanceTrace", "BACKEND", "ConfigError", "ControllerConfig", "DraftCostModel",
    "ExpertConfig", "FixedCostModel", "IterationRecord", "MoECostModel", "Policy",
    "SpeculationController", "UtilityAnalyzer", "WorkloadProfile", "draft_preset",
    "expected_unique_experts", "hill_climb_next_k", "load_task", "model_preset",
    "run_request", "run_scenario", "run_stream", "run_utility",
]
