"""Deformable registration with an L1 data term and total-variation regularisation."""
from .evalmetrics import endpoint_error, evaluate_registration, target_overlap
from .registration import RegistrationParams, RegistrationResult, register
from .similarity import Linearization, linearize_sad, sad_energy
from .tvsolver import SolverParams, primal_energy, solve_subproblem

__version__ = "0.1.0"

__all__ = [
    "Linearization",
    "RegistrationParams",
    "RegistrationResult",
    "SolverParams",
    "endpoint_error",
    "evaluate_registration",
    "linearize_sad",
    "primal_energy",
    "register",
    "sad_energy",
    "solve_subproblem",
    "target_overlap",
]
