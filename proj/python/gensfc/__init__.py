"""Python bindings for the gensfc core library."""

import os
from pathlib import Path

_config = Path(__file__).with_name("config")
if "GENSFC_CONFIG_DIR" not in os.environ and _config.is_dir():
    os.environ["GENSFC_CONFIG_DIR"] = str(_config)

from ._core import (  # noqa: E402
    ConfigError,
    DomainError,
    SizeError,
    StabilityError,
    StructuralError,
    TrainingError,
    agent_latency,
    angular_distance,
    brute_force_optimum,
    default_config,
    evaluate_chain,
    generate_scenario,
    poisson_overload_prob,
    pretraining_loss,
    project_preference,
    run_experiment,
    summarize_dir,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "SizeError",
    "StabilityError",
    "StructuralError",
    "TrainingError",
    "agent_latency",
    "angular_distance",
    "brute_force_optimum",
    "default_config",
    "evaluate_chain",
    "generate_scenario",
    "poisson_overload_prob",
    "pretraining_loss",
    "project_preference",
    "run_experiment",
    "summarize_dir",
]
