"""Command-line orchestration: configs, run directories, stages and the reproduce chain."""

from .config import SCHEMA_VERSION, ExperimentConfig, build_config, load_config
from .main import main
from .run import StageFailure, make_config, reproduce_all, run, run_dir_for
