"""Configuration, experiment runners and the command line interface."""
from .config import ConfigError, ExperimentConfig, dump_config, from_dict, load_config, save_config, to_dict
from .runner import RunResult, evaluate_checkpoint, load_split, run_adapt, run_benchmark, run_source_only

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunResult",
    "dump_config",
    "evaluate_checkpoint",
    "from_dict",
    "load_config",
    "load_split",
    "run_adapt",
    "run_benchmark",
    "run_source_only",
    "save_config",
    "to_dict",
]
