"""Two-level IoT co-simulation.

A coarse time-stepped agent simulation (entities gossiping over proximity on
a toroidal plane, partitioned across logical processes) that can delegate
entities to fine-grained discrete-event instances (a wireless mesh with
on-demand routing) and reintegrate them, one coarse timestep at a time.
"""

from .config import ConfigError, SimConfig, SpawnTrigger
from .level0 import RunResult, SimEngine, SimulationError, TimestepReport, run_simulation
from .world import ToroidalWorld

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "RunResult",
    "SimConfig",
    "SimEngine",
    "SimulationError",
    "SpawnTrigger",
    "TimestepReport",
    "ToroidalWorld",
    "run_simulation",
    "__version__",
]
