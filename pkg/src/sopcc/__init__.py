"""Chance-constrained stochastic orienteering: tree search with rollout or learned evaluators."""

__version__ = "0.1.0"

from .instance import Instance, PathState, generate_instance, make_rng  # noqa: E402,F401
