"""Composable involutive MCMC kernels and exact verification oracles."""

from .core import (
    BARKER,
    METROPOLIS,
    AcceptanceFunction,
    AuxiliaryConditional,
    CycleKernel,
    InvolutionMap,
    InvolutiveMHKernel,
    Kernel,
    KernelStepResult,
    LogDensity,
    MixtureKernel,
    RefreshKernel,
    compose_cycle,
    extend_to_involution,
    log_acceptance_ratio,
    make_acceptance,
    make_rng,
    mix,
)

__version__ = "0.1.0"
