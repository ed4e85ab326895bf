"""Latent Gaussian process models with Vecchia-Laplace approximations.

Estimation and prediction for non-Gaussian spatial data: the GP prior is
Vecchia-approximated into a sparse triangular factor, the non-Gaussian
likelihood is handled by a Laplace approximation, and all heavy linear
algebra runs through preconditioned iterative methods with a dense
Cholesky reference backend for verification.
"""

from .covariance import CovarianceSpec, Locations, cov_grad, cov_submatrix, cov_value
from .errors import (
    BreakdownError,
    CapabilityError,
    CapacityError,
    ConfigError,
    ConvergenceError,
    DataError,
    FactorizationError,
    NumericalError,
    VlgpError,
)
from .laplace import BackendConfig, LaplaceState, find_mode, gradient, neg_marginal_loglik
from .likelihoods import get_likelihood
from .vecchia import (
    VecchiaFactor,
    build_factor,
    factor_gradient,
    find_neighbors,
    make_factor,
    order_random,
    prediction_blocks,
)

__version__ = "0.1.0"

__all__ = [
    "BackendConfig",
    "BreakdownError",
    "CapabilityError",
    "CapacityError",
    "ConfigError",
    "ConvergenceError",
    "CovarianceSpec",
    "DataError",
    "FactorizationError",
    "LaplaceState",
    "Locations",
    "NumericalError",
    "VecchiaFactor",
    "VlgpError",
    "build_factor",
    "cov_grad",
    "cov_submatrix",
    "cov_value",
    "factor_gradient",
    "find_mode",
    "find_neighbors",
    "get_likelihood",
    "gradient",
    "make_factor",
    "neg_marginal_loglik",
    "order_random",
    "prediction_blocks",
]
