"""Equilibria of a two-player LQ game with a lossy uplink to the remote player."""

from .model import GameSpec, composites, validate
from .riccati import RiccatiSolution, analytic_costs, gain_convergence, solve
from .evaluate import PolicySequence, monte_carlo, nash_check, propagate_moments

__all__ = [
    "GameSpec", "composites", "validate",
    "RiccatiSolution", "solve", "analytic_costs", "gain_convergence",
    "PolicySequence", "propagate_moments", "monte_carlo", "nash_check",
]
__version__ = "0.1.0"
