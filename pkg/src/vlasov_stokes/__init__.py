"""Particle simulation of sedimenting suspensions: Vlasov-Stokes and its inertialess limit."""

from .core import (ConfigError, InitialData, PhaseEnsemble, SimParams, build_initial_data,
                   build_params, sample_ensemble)
from .grid import Grid

__all__ = ["ConfigError", "Grid", "InitialData", "PhaseEnsemble", "SimParams",
           "build_initial_data", "build_params", "sample_ensemble"]
