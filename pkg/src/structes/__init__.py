"""Structured evolution strategies for blackbox optimization."""

from .errors import (ConfigError, DegenerateSampleError, DimensionMismatchError,
                     IncompleteIterationError, NonFiniteValueError, ProtocolError,
                     StructESError)
from .estimators import (EstimatorKind, GradientEstimate, SmoothingConfig, antithetic_grad,
                         estimate_gradient, forward_fd_grad, mse_estimate, vanilla_grad)
from .exploration import ExplorationMatrix, ExplorationScheme, Scheme
from .policies import PolicySpec, param_count
from .seeding import derive_iteration_seed
from .trainer import OptimizerConfig, RunRecord, bfgs_minimize, train

__version__ = "0.1.0"
