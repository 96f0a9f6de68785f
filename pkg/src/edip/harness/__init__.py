from .commands import COMMANDS, Experiment, MissingArtifactError, run_command
from .config import ConfigError, ExperimentConfig, MethodSpec, load_config, save_config
from .selection import Candidate, SelectionResult, select_checkpoint

__all__ = [
    "COMMANDS", "Candidate", "ConfigError", "Experiment", "ExperimentConfig", "MethodSpec",
    "MissingArtifactError", "SelectionResult", "load_config", "run_command", "save_config",
    "select_checkpoint",
]
