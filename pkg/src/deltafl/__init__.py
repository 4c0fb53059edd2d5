"""Superquantile federated learning with distributed differential privacy."""
from .risk import (dual_weights, entropic_risk, quantile, smoothed_superquantile,
                   smoothed_weights, superquantile, tilted_weights)
from .fed_sim import FedConfig, train

__all__ = ["FedConfig", "dual_weights", "entropic_risk", "quantile", "smoothed_superquantile",
           "smoothed_weights", "superquantile", "tilted_weights", "train"]
__version__ = "0.1.0"
