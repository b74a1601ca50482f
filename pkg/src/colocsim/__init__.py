"""Discrete-event simulator for colocating online and offline LLM inference on shared GPUs."""

from .baselines import PRESETS, REFERENCE_PRESET, STANDALONE, PolicySelection
from .core import SimulationError, Simulator
from .metrics import RunReport, report_from_events, report_from_node
from .sim import NodeSim, Scenario, SimParams, simulate

__version__ = "0.1.0"

__all__ = [
    "NodeSim", "PRESETS", "PolicySelection", "REFERENCE_PRESET", "RunReport", "STANDALONE",
    "Scenario", "SimParams", "SimulationError", "Simulator", "report_from_events",
    "report_from_node", "simulate",
]
