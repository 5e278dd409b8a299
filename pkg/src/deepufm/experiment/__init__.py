"""Config files, checkpoints, batch analysis and the command line."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config
