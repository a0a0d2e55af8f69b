"""Deterministic simulator for personalized federated segmentation.

Clients share a segmentation backbone and keep the parameters most sensitive
to their own domain local, selected per round from the difference between
Fisher diagonals on real and style-simulated data. The package covers the
tensor/NN core, Fisher scoring and masks, spectral style simulation, the
federation protocol, a synthetic multi-domain benchmark, and a CLI harness.
"""

from . import benchmark, federation, fisher, nn, spectral
from .federation import FederationConfig, run_federation

__version__ = "0.1.0"

__all__ = [
    "FederationConfig",
    "benchmark",
    "federation",
    "fisher",
    "nn",
    "run_federation",
    "spectral",
]
