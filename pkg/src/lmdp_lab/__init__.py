"""Tabular latent-MDP lab: planners, domain-randomization oracle, base policies, sweeps."""

from .mdp_core import (
    AvgSolution,
    PlanSolution,
    TabularMdp,
    UnboundedSpanError,
    ValidationError,
    backward_induction,
    diameter,
    evaluate_markov_policy,
    relative_value_iteration,
)
from .lmdp import LatentMdp, Trajectory, HistoryPolicy, gap_monte_carlo, sample_episode, solve_dr_optimal

__version__ = "0.1.0"
