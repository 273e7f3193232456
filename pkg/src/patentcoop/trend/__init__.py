"""Two-curve logistic trend of cooperation-patent arrivals and its variational fit."""

from .model import (
    TABLE3_MEANS,
    UNCONSTRAINED_NAMES,
    TrendParams,
    TrendPosterior,
    TrendPrior,
    component_rates,
    cumulative_difference,
    log_rate,
    mixture_cumulative_rate,
    process_log_likelihood,
    rate,
    read_params_json,
    simulate,
    trend_log_prior,
    write_params_json,
)
from .vi import (
    Forecast,
    VIConfig,
    VIDivergenceError,
    VIResult,
    VariationalPosterior,
    elbo_estimate,
    fit_vi,
    forecast,
    monte_carlo_elbo,
    monthly_grid,
    read_surrogate_json,
    write_forecast_csv,
    write_surrogate_json,
)

__all__ = [
    "TABLE3_MEANS", "UNCONSTRAINED_NAMES", "Forecast", "TrendParams", "TrendPosterior",
    "TrendPrior", "VIConfig", "VIDivergenceError", "VIResult", "VariationalPosterior",
    "component_rates", "cumulative_difference", "elbo_estimate", "fit_vi", "forecast",
    "log_rate", "mixture_cumulative_rate", "monte_carlo_elbo", "monthly_grid",
    "process_log_likelihood", "rate", "read_params_json", "read_surrogate_json", "simulate",
    "trend_log_prior", "write_forecast_csv", "write_params_json", "write_surrogate_json",
]
