"""Semantic relation graphs refined by a frame-distilling and a relation-gating agent."""

from . import buffer, config, fd_agent, gradcheck, numerics, rg_agent, scene, srg, trainer
from .config import RunConfig, parse_config
from .scene import ConfigError, SceneConfig, generate_dataset
from .trainer import System, alternate_training

__version__ = "0.1.0"

__all__ = ["buffer", "config", "fd_agent", "gradcheck", "numerics", "rg_agent", "scene", "srg",
           "trainer", "RunConfig", "parse_config", "ConfigError", "SceneConfig",
           "generate_dataset", "System", "alternate_training"]
