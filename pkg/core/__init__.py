# -*- coding: utf-8 -*-
"""
核心模块初始化
"""

from .config import TrainConfig, parse_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DomainError,
    GraphStructureError,
    LabError,
    LookupFailure,
    MetricsFormatError,
    TrainingError,
)
from .logger import configure_logging, get_logger
from .method_system import MethodBase, MethodRegistry
from .trainer import Trainer, evaluate, finetune, pretrain_baseline

__all__ = [
    "TrainConfig",
    "parse_config",
    "LabError",
    "GraphStructureError",
    "ContractError",
    "DomainError",
    "LookupFailure",
    "ConfigError",
    "CheckpointError",
    "TrainingError",
    "MetricsFormatError",
    "get_logger",
    "configure_logging",
    "MethodBase",
    "MethodRegistry",
    "Trainer",
    "finetune",
    "evaluate",
    "pretrain_baseline",
]
