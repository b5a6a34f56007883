"""Signal temporal logic to harmonic control Lyapunov-barrier field safety filtering."""
from .field import (
    CellState, GridTransform, NoGoalCell, NonConverged, PotentialField, Rect, SolverParams, WorldSpec,
    compile_schedule, solve, solve_schedule,
)
from .safety_filter import FilterParams, apply_filter, project
from .sim import Scenario, Trajectory, barrier_decrease_audit, batch, check_safety, prepare, run
from .stl import FragmentViolation, StlFormula, StlSyntaxError, monitor, parse, pretty_print

__version__ = "0.1.0"
