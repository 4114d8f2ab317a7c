"""Lightweight digital twin of a campus polygeneration microgrid."""

__version__ = "1.0.0"

from .scenario import Scenario, ScenarioError, load_scenario, validate_scenario
from .runner import RunArtifacts, Runner, run_scenario

__all__ = [
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "validate_scenario",
    "RunArtifacts",
    "Runner",
    "run_scenario",
    "__version__",
]
