"""Replay-sample selection for continual federated learning.

Gradient-diversity replay selection (random baselines, greedy, and QP
relaxations), server-coordinated selection by alternating minimization over a
real message transport, a brute-force-verified synthetic benchmark, and a
desk-scale FedAvg simulator.
"""

from .gradients import (GradientSet, GramMatrix, ReplaySelection, SelectionWeights,
                        gram, normalize_columns, objective_discrete,
                        objective_relaxed, round_top_n)
from .qp import QpProblem, QpSolution, SolverOptions, project_capped_simplex, solve
from .strategies import BufferUpdateInput, StrategySpec, select
from .coordination import (ClientSelectionState, CoordinationReport,
                           coordinated_objective, run_coordination)

__all__ = [
    "GradientSet", "GramMatrix", "ReplaySelection", "SelectionWeights",
    "gram", "normalize_columns", "objective_discrete", "objective_relaxed",
    "round_top_n", "QpProblem", "QpSolution", "SolverOptions",
    "project_capped_simplex", "solve", "BufferUpdateInput", "StrategySpec",
    "select", "ClientSelectionState", "CoordinationReport",
    "coordinated_objective", "run_coordination",
]

__version__ = "0.1.0"
