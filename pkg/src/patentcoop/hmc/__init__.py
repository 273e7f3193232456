"""Gradient-based MCMC: NUTS transitions, warmup adaptation, diagnostics."""

from .adaptation import DualAveraging, adapt_step_size, warmup_windows
from .diagnostics import (
    potential_scale_reduction,
    read_draws_csv,
    split_rhat,
    summarize,
    write_draws_csv,
)
from .nuts import (
    ChainConfig,
    NUTSKernel,
    PosteriorSamples,
    SamplingQualityError,
    leapfrog,
    nuts_step,
    run_chains,
)

__all__ = [
    "ChainConfig", "DualAveraging", "NUTSKernel", "PosteriorSamples",
    "SamplingQualityError", "adapt_step_size", "leapfrog", "nuts_step",
    "potential_scale_reduction", "read_draws_csv", "run_chains", "split_rhat",
    "summarize", "warmup_windows", "write_draws_csv",
]
