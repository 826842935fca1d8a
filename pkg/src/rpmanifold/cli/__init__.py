from .config import ConfigError, ExperimentConfig
from .experiments import (
    feasible_region, run_clt_experiment, run_linear_oracle, run_rate_experiment, run_rho_sweep,
)
from .main import main

__all__ = [
    "ConfigError", "ExperimentConfig", "feasible_region", "main", "run_clt_experiment",
    "run_linear_oracle", "run_rate_experiment", "run_rho_sweep",
]
