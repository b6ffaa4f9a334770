"""Quantum-equilibrium tools: ensembles, f diagnostics, distribution tests, shift map, sequences."""

from ..shiftmap import ShiftMapFlow, ShiftState, ShiftWidthError, bernoulli_shift, generalized_shift
from .ensemble import Ensemble, FlowSetup, evolve_ensemble, rng_for, sample_ensemble
from .sequence import BakerCycleFlow, ChainFailure, Convergence, SequenceResult, sequence_experiment
from .stats import (
    DistributionStats,
    FSummary,
    UndersamplingError,
    compare_distributions,
    discrete_tv,
    f_statistics,
    trajectory_f_drift,
)

__all__ = [
    "BakerCycleFlow",
    "ChainFailure",
    "Convergence",
    "DistributionStats",
    "Ensemble",
    "FSummary",
    "FlowSetup",
    "SequenceResult",
    "ShiftMapFlow",
    "ShiftState",
    "ShiftWidthError",
    "UndersamplingError",
    "bernoulli_shift",
    "compare_distributions",
    "discrete_tv",
    "evolve_ensemble",
    "f_statistics",
    "generalized_shift",
    "rng_for",
    "sample_ensemble",
    "sequence_experiment",
    "trajectory_f_drift",
]
