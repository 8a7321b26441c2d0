"""Serving engine: workloads, batching, gating, partitioning and stage execution."""

from .batching import StageBatch, form_stage
from .engine import (
    MODES,
    Engine,
    coprocess,
    default_system_for_mode,
    run,
    simulate_stage,
    stage_policy,
)
from .gating import GateOutcome, gate_select
from .partition import ExpertAssignment, ExpertLUT, brute_force_partition, build_lut, partition_experts
from .trace import RequestRecord, StageRecord, Trace
from .workload import Request, gen_workload, is_closed_loop

__all__ = [
    "MODES", "Engine", "ExpertAssignment", "ExpertLUT", "GateOutcome", "Request",
    "RequestRecord", "StageBatch", "StageRecord", "Trace", "brute_force_partition",
    "build_lut", "coprocess", "default_system_for_mode", "form_stage", "gate_select",
    "gen_workload", "is_closed_loop", "partition_experts", "run", "simulate_stage",
    "stage_policy",
]
