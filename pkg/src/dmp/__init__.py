"""Discrete-time maximum principle toolkit.

Library for open-loop and feedback optimal control in discrete time:
adjoint (costate) sequences, first-order optimality residuals,
transversality diagnostics, forward-backward solvers, Euler-equation
reductions, and open-loop Nash equilibria for N-player dynamic games.
"""

from dmp.core import Plan, StageProblem, TerminalReward, Trajectory, rollout, total_reward
from dmp.feedback import (
    EulerProblem,
    FeedbackPolicy,
    euler_residuals,
    markov_adjoint,
    markov_residuals,
    markov_rollout,
    solve_linear_euler,
)
from dmp.games import GameProblem, MultiStrategy, nash_residuals, solve_nash_br
from dmp.mp import (
    AdjointSeq,
    ResidualReport,
    Tolerances,
    adjoint_backward,
    adjoint_series,
    check_assumption_amp,
    gateaux_differential,
    residual_report,
    stationarity_residuals,
)
from dmp.probfile import load_problem_file, parse_problem_text
from dmp.solve import (
    SweepOptions,
    solve_finite_horizon,
    solve_infinite_horizon,
    sufficiency_probe,
)
from dmp.bench import get_benchmark, list_benchmarks

__version__ = "0.1.0"

__all__ = [
    "AdjointSeq",
    "EulerProblem",
    "FeedbackPolicy",
    "GameProblem",
    "MultiStrategy",
    "Plan",
    "ResidualReport",
    "StageProblem",
    "SweepOptions",
    "TerminalReward",
    "Tolerances",
    "Trajectory",
    "adjoint_backward",
    "adjoint_series",
    "check_assumption_amp",
    "euler_residuals",
    "gateaux_differential",
    "get_benchmark",
    "list_benchmarks",
    "load_problem_file",
    "markov_adjoint",
    "markov_residuals",
    "markov_rollout",
    "nash_residuals",
    "parse_problem_text",
    "residual_report",
    "rollout",
    "solve_finite_horizon",
    "solve_infinite_horizon",
    "solve_linear_euler",
    "solve_nash_br",
    "stationarity_residuals",
    "sufficiency_probe",
    "total_reward",
]
