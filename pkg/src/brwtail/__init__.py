"""Tail asymptotics of the maximum of subcritical branching random walks."""
from .errors import BrwError
from .laws import Model, OffspringLaw, StepLaw, load_model, parse_model, reference_model, solve_gamma, tilt, validate_offspring

__all__ = [
    "BrwError", "Model", "OffspringLaw", "StepLaw", "load_model", "parse_model",
    "reference_model", "solve_gamma", "tilt", "validate_offspring",
]
__version__ = "0.1.0"
