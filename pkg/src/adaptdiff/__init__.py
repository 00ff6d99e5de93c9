"""Adaptive batch-size and worker-count scheduling for key-aligned table diffs."""

__version__ = "0.1.0"

from .bench import ExperimentReport, PolicyKind, compare_policies, render_tables, run_matrix, run_policy
from .controller import AdaptiveController, ControlDecision, InfeasibleJob
from .diffcore import (
    Column,
    ColumnType,
    DataError,
    DiffResult,
    JobSpec,
    TableHandle,
    Verdict,
    diff_batch,
    merge_results,
    partition_job,
    preflight_profile,
    reference_diff,
)
from .exec import BatchMetrics, SimModel, make_backend
from .model import CostModel, MemModel, PolicyParams, PreflightProfile, ResourceCaps
from .scheduler import AdaptiveScheduler, run_job
from .telemetry import JobSummary, TelemetryLog, TelemetryRecord, job_summary, read_log
from .workload import WorkloadSpec, generate_pair, scenario_matrix

__all__ = [
    "AdaptiveController", "AdaptiveScheduler", "BatchMetrics", "Column", "ColumnType", "ControlDecision",
    "CostModel", "DataError", "DiffResult", "ExperimentReport", "InfeasibleJob", "JobSpec", "JobSummary",
    "MemModel", "PolicyKind", "PolicyParams", "PreflightProfile", "ResourceCaps", "SimModel", "TableHandle",
    "TelemetryLog", "TelemetryRecord", "Verdict", "WorkloadSpec", "compare_policies", "diff_batch",
    "generate_pair", "job_summary", "make_backend", "merge_results", "partition_job", "preflight_profile",
    "read_log", "reference_diff", "render_tables", "run_job", "run_matrix", "run_policy", "scenario_matrix",
]
