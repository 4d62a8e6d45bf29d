"""Deep Q-learning on small known MDPs, with the objects of its ODE
convergence analysis exposed as diagnostics."""

from .envs import BENCHMARKS, Mdp, value_iteration
from .errors import (ConvergenceError, DivergenceError, DqnLabError, InputError, NumericalError,
                     PreconditionError, ValidationError)
from .network import Topology, forward, q_gradient, q_values
from .trainer import RunConfig, TrainRecord, train

__all__ = [
    "BENCHMARKS", "Mdp", "value_iteration",
    "ConvergenceError", "DivergenceError", "DqnLabError", "InputError", "NumericalError",
    "PreconditionError", "ValidationError",
    "Topology", "forward", "q_gradient", "q_values",
    "RunConfig", "TrainRecord", "train",
]
__version__ = "0.1.0"
