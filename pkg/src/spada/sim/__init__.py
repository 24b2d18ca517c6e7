"""Deterministic simulation harness and measurement rig."""

from .clock import SimClock
from .net import Blackout, FaultSchedule, SimNet
from .convergence import SuiteResult, run_convergence_suite
from .modelcheck import CheckResult, model_check_sync_loop

__all__ = [
    "Blackout",
    "CheckResult",
    "FaultSchedule",
    "SimClock",
    "SimNet",
    "SuiteResult",
    "model_check_sync_loop",
    "run_convergence_suite",
]
