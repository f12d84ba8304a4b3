"""Estimation of random-parameter distributions in a sampled 1D heat model.

The population model averages a Galerkin heat equation over a parametric
density for the random diffusivity (and input gain). Its parameters are fit to
aggregate output data by projected-gradient least squares with exact discrete
adjoint gradients.
"""

from .assembly import DiscretizationLevel, GalerkinSystem, assemble
from .dataset import Dataset
from .density import DensityError, Family, SamplingError, TruncatedDensity
from .estimator import (ConstraintError, Constraints, EstimateOptions, EstimateResult, Problem,
                        minimize, objective)
from .experiments import (Band, ExperimentConfig, SweepResult, band_coverage_fraction,
                          convergence_sweep, credible_band, generate_data, windowed_abs_cos)
from .fem1d import BoundaryCondition, ModelSpec, SpatialMesh
from .sampled import (AssemblyDegenerateError, SampledSystem, discretize, population_output,
                      simulate, simulate_points)

__version__ = "0.1.0"

__all__ = [
    "AssemblyDegenerateError", "Band", "BoundaryCondition", "ConstraintError", "Constraints",
    "Dataset", "DensityError", "DiscretizationLevel", "EstimateOptions", "EstimateResult",
    "ExperimentConfig", "Family", "GalerkinSystem", "ModelSpec", "Problem", "SampledSystem",
    "SamplingError", "SpatialMesh", "SweepResult", "TruncatedDensity", "assemble",
    "band_coverage_fraction", "convergence_sweep", "credible_band", "discretize",
    "generate_data", "minimize", "objective", "population_output", "simulate",
    "simulate_points", "windowed_abs_cos",
]
