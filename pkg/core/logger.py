# -*- coding: utf-8 -*-
"""
日志系统模块
所有模块的记录器都挂在 mvlab 根记录器下，由它统一输出到控制台和运行目录
"""

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, Optional, Union

ROOT_NAME = "mvlab"
LOG_FILE = "mvlab.log"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
MAX_LOG_BYTES = 10 * 1024 * 1024
LOG_BACKUPS = 5


class LoggerManager:
    """日志管理器（进程内单例）"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if hasattr(self, 'initialized'):
            return
        self.formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
        self.root = logging.getLogger(ROOT_NAME)
        self.root.propagate = False
        self.console = logging.StreamHandler(sys.stdout)
        self.console.setFormatter(self.formatter)
        self.root.addHandler(self.console)
        self.file_handler: Optional[RotatingFileHandler] = None
        self.loggers: Dict[str, logging.Logger] = {}
        self.set_level(logging.INFO)
        self.initialized = True

    @property
    def log_file(self) -> Optional[Path]:
        return Path(self.file_handler.baseFilename) if self.file_handler is not None else None

    def set_level(self, level: int):
        self.root.setLevel(level)
        for handler in self.root.handlers:
            handler.setLevel(level)

    def configure(self, log_dir: Optional[Union[str, Path]] = None, level: int = logging.INFO):
        """
        切换运行目录：关闭旧的文件日志，log_dir 不为 None 时在其中写 mvlab.log（带轮转）

        Args:
            log_dir: 日志目录，None 表示只输出到控制台
            level: 日志级别
        """
        if self.file_handler is not None:
            self.root.removeHandler(self.file_handler)
            self.file_handler.close()
            self.file_handler = None

        if log_dir is not None:
            log_dir = Path(log_dir)
            log_dir.mkdir(parents=True, exist_ok=True)
            self.file_handler = RotatingFileHandler(log_dir / LOG_FILE, maxBytes=MAX_LOG_BYTES,
                                                    backupCount=LOG_BACKUPS, encoding='utf-8')
            self.file_handler.setFormatter(self.formatter)
            self.root.addHandler(self.file_handler)
        self.set_level(level)

    def get_logger(self, name: str) -> logging.Logger:
        if name not in self.loggers:
            self.loggers[name] = self.root.getChild(name)
        return self.loggers[name]


logger_manager = LoggerManager()


def get_logger(name: str) -> logging.Logger:
    """模块记录器 mvlab.<name>"""
    return logger_manager.get_logger(name)


def configure_logging(log_dir: Optional[Union[str, Path]] = None, level: int = logging.INFO):
    logger_manager.configure(log_dir, level)
