"""Bayesian neural ODE classifiers whose weights follow a partly stochastic SDE, on a small numpy autodiff core."""

from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    NumericsError,
    PsdeBnnError,
    ShapeError,
)
from .model import ModelConfig, PsdeBnn
from .params import ParamStore
from .training import TrainConfig, train

__version__ = "0.1.0"
