"""Lattice log-Gaussian Cox process fitting with a scaled RW2D field and PC priors."""

__version__ = "0.1.0"

from .errors import DataError, NumericalError
from .igmrf import ScaledPrecision, StructureMatrix, build_rw2d, generalized_variance, scale_to_unit_gv, scaled_rw2d
from .inference import FitOptions, FitResult, decompose, dic, fit, glm_fit, laplace_fit
from .lattice import CountGrid, CovariateStack, PointPattern, Window, grid_counts, preprocess_covariates, vif_filter
from .model import Hyperparameters, LatentState, ModelSpec, linear_predictor, log_likelihood, log_posterior, simulate
from .priors import kld_gaussian, pc_mix_prior, pc_prec_prior, phi_distance

__all__ = [
    "CountGrid", "CovariateStack", "DataError", "FitOptions", "FitResult", "Hyperparameters", "LatentState",
    "ModelSpec", "NumericalError", "PointPattern", "ScaledPrecision", "StructureMatrix", "Window",
    "build_rw2d", "decompose", "dic", "fit", "generalized_variance", "glm_fit", "grid_counts", "kld_gaussian",
    "laplace_fit", "linear_predictor", "log_likelihood", "log_posterior", "pc_mix_prior", "pc_prec_prior",
    "phi_distance", "preprocess_covariates", "scale_to_unit_gv", "scaled_rw2d", "simulate", "vif_filter",
]
