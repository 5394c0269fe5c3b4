"""Synthetic workloads, attention traces and the batched trial engine."""

from .attention import AttentionModel, synth_attention
from .engine import TrialResult, run_batch, run_trial
from .suite import SuiteConfig, load_config, run_suite
from .workload import Workload, WorkloadConfig, build_workload

__all__ = [
    "AttentionModel", "SuiteConfig", "TrialResult", "Workload", "WorkloadConfig",
    "build_workload", "load_config", "run_batch", "run_suite", "run_trial", "synth_attention",
]
