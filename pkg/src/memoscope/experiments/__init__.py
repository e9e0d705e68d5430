from .config import ExperimentConfig, build_config, load_config_file, EXPERIMENT_KINDS
from .manifest import verify_manifest, write_manifest
from .runners import (binomial_reference, dump_filters, run_experiment, RUNNERS)

__all__ = [
    "ExperimentConfig", "build_config", "load_config_file", "EXPERIMENT_KINDS",
    "verify_manifest", "write_manifest", "binomial_reference", "dump_filters",
    "run_experiment", "RUNNERS",
]
