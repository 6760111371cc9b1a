"""Disturbance-adaptive track-stand control for a single-track two-wheeled robot.

The controller estimates unknown loads with an extended-state observer, moves
the regulation target to the equilibrium that those loads imply, and tracks it
with a Gauss-Newton multiple-shooting MPC.
"""

from .controllers import OcpConfig, make_controller
from .dynamics import RobotParams, f_sys, linearize, structured_form
from .equilibrium import Reference, track_stand_equilibrium
from .harness import HarnessConfig, build_scenario, run_closed_loop
from .observer import ObserverConfig

__all__ = [
    "HarnessConfig",
    "ObserverConfig",
    "OcpConfig",
    "Reference",
    "RobotParams",
    "build_scenario",
    "f_sys",
    "linearize",
    "make_controller",
    "run_closed_loop",
    "structured_form",
    "track_stand_equilibrium",
]

__version__ = "0.1.0"
