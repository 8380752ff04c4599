"""Control-based continuation of periodic orbits with adaptive feedback."""

from .continuation import (
    BranchPoint,
    ChartSettings,
    Experiment,
    ExperimentProtocol,
    continue_branch,
    open_loop_sweep,
)
from .control import ClosedLoop, Mrac, NoControl, Proportional, ScalarAdaptive, simulate
from .ode import IntegratorConfig, integrate
from .plant import beam_2dof, duffing, linear_oscillator, scalar_sine
from .signal import FourierSeries, VectorFourierSeries, synthesize_reference

__version__ = "0.1.0"

__all__ = [
    "BranchPoint",
    "ChartSettings",
    "ClosedLoop",
    "Experiment",
    "ExperimentProtocol",
    "FourierSeries",
    "IntegratorConfig",
    "Mrac",
    "NoControl",
    "Proportional",
    "ScalarAdaptive",
    "VectorFourierSeries",
    "beam_2dof",
    "continue_branch",
    "duffing",
    "integrate",
    "linear_oscillator",
    "open_loop_sweep",
    "scalar_sine",
    "simulate",
    "synthesize_reference",
]
