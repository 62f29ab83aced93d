"""Spiked random-features laboratory.

Simulates two-layer networks trained with one aggressive gradient step plus a
ridge readout on Gaussian single-index data, solves the matching
deterministic-equivalent fixed point, and compares bulk spectra and test
errors between the two.
"""

from .model import ExperimentConfig, VocabularySpec, validate_config
from .detequiv import DetEquivProblem, FixedPointState, problem_from_config, solve_fixed_point
from .generror import asymptotic_generror, asymptotic_tau
from .spectrum import DensityCurve, density_grid, stieltjes

__all__ = [
    "ExperimentConfig",
    "VocabularySpec",
    "validate_config",
    "DetEquivProblem",
    "FixedPointState",
    "problem_from_config",
    "solve_fixed_point",
    "asymptotic_generror",
    "asymptotic_tau",
    "DensityCurve",
    "density_grid",
    "stieltjes",
]
