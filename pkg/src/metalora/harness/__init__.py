"""Experiment orchestration, verification suites, outputs and the command line."""
from .config import DEFAULT_SWEEPS, ExperimentConfig, RankPolicy
from .experiments import AblationRow, run_comparison, run_default_sweeps
from .verify import CheckResult, VerificationReport, verify_theorems
from .outputs import emit_outputs, write_csv

__all__ = [
    "AblationRow", "CheckResult", "DEFAULT_SWEEPS", "ExperimentConfig", "RankPolicy", "VerificationReport",
    "emit_outputs", "run_comparison", "run_default_sweeps", "verify_theorems", "write_csv",
]
