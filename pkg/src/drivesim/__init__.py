"""Headless deterministic driving simulator with a websocket pub/sub bridge."""

from .dynamics import ControlInput, PidController, VehicleParams, VehicleState
from .engine import Engine, RunReport, SimClock, replay_dataset
from .geometry import Pose2, Vec2
from .scenario import Scenario, ScenarioError, load_scenario, resolve_scenario_path

__version__ = "0.1.0"

__all__ = [
    "ControlInput",
    "Engine",
    "PidController",
    "Pose2",
    "RunReport",
    "Scenario",
    "ScenarioError",
    "SimClock",
    "Vec2",
    "VehicleParams",
    "VehicleState",
    "__version__",
    "load_scenario",
    "replay_dataset",
    "resolve_scenario_path",
]
