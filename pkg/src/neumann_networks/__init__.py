"""Neumann networks, unrolled gradient descent and analytic union-of-subspaces oracles."""

__version__ = "0.1.0"

from neumann_networks.errors import DimensionError, DivergenceError, SingularSubspaceError
from neumann_networks.estimators import (
    EstimatorConfig,
    LinearRegularizer,
    Regularizer,
    Variant,
    ZeroRegularizer,
    conjugate_gradient,
    gdn_estimate,
    neumann_estimate,
    neumann_series_partial,
    precond_neumann_estimate,
)
from neumann_networks.linops import ForwardModel, ModelSpec, build_forward_model

__all__ = [
    "DimensionError", "DivergenceError", "SingularSubspaceError",
    "EstimatorConfig", "LinearRegularizer", "Regularizer", "Variant", "ZeroRegularizer",
    "conjugate_gradient", "gdn_estimate", "neumann_estimate", "neumann_series_partial",
    "precond_neumann_estimate", "ForwardModel", "ModelSpec", "build_forward_model",
]
