"""Ergodic constants and mean-field games for acceleration-controlled motion on the torus."""

__version__ = "0.1.0"

from .core import ControlMeasure, FlowMeasure, GridMeasure, PhaseGrid, ValueField, wasserstein1
from .costs import CostField, MeanFieldCoupling, TerminalCost, TrigKernel, congestion, make_field
from .hjb import solve_discounted, solve_finite_horizon
from .measure_lp import solve_ergodic, solve_finite_horizon_lp
from .mfg import solve_ergodic_mfg, solve_mfg_time
from .trajectory import Curve, connect_cubic, evaluate_cost, make_periodic, minimize_horizon

__all__ = [
    "ControlMeasure", "CostField", "Curve", "FlowMeasure", "GridMeasure", "MeanFieldCoupling",
    "PhaseGrid", "TerminalCost", "TrigKernel", "ValueField", "congestion", "connect_cubic",
    "evaluate_cost", "make_field", "make_periodic", "minimize_horizon", "solve_discounted",
    "solve_ergodic", "solve_ergodic_mfg", "solve_finite_horizon", "solve_finite_horizon_lp",
    "solve_mfg_time", "wasserstein1",
]
