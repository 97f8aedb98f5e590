"""Infection-cap model predictive control for a controlled SEIR model."""

from .integrate import ControlSignal, Trajectory, simulate
from .model import ControlValue, Params, State
from .mpc import MpcConfig, mpc_run, synthesize_feasible_control
from .ocp import OcpProblem, SolverConfig, solve_ocp

__all__ = [
    "ControlSignal",
    "ControlValue",
    "MpcConfig",
    "OcpProblem",
    "Params",
    "SolverConfig",
    "State",
    "Trajectory",
    "mpc_run",
    "simulate",
    "solve_ocp",
    "synthesize_feasible_control",
]
