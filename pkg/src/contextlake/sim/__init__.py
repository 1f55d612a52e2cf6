"""Deterministic multi-agent simulator."""

from .engine import DecisionOutcome, Runtime, Schedule, ScheduledEvent, Session, Trace, step
from .scenarios import MATRIX_SYMPTOMS, SCENARIO_FUNCS, matrix_symptoms, run_scenario, scenario_registry

__all__ = [
    "DecisionOutcome",
    "MATRIX_SYMPTOMS",
    "Runtime",
    "SCENARIO_FUNCS",
    "Schedule",
    "ScheduledEvent",
    "Session",
    "Trace",
    "matrix_symptoms",
    "run_scenario",
    "scenario_registry",
    "step",
]
