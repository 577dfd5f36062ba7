"""Hybrid physics/data system identification: physics-guided networks with
an energy-balance loss, plus prior-model, plain-network and SINDYc baselines."""

from .errors import ConfigError, DivergenceError, DomainError, ShapeError, SplitError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DivergenceError", "DomainError", "ShapeError", "SplitError", "__version__"]
