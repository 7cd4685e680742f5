# -*- coding: utf-8 -*-
"""
异常定义模块
所有模块共享的异常层级
"""

from typing import Optional


class LabError(Exception):
    """实验室异常基类"""


class GraphStructureError(LabError):
    """计算图结构错误（输入形状不匹配等）"""

    def __init__(self, message: str, node_id: Optional[int] = None, op: Optional[str] = None):
        self.node_id = node_id
        self.op = op
        prefix = f"节点 #{node_id} ({op}): " if node_id is not None else ""
        super().__init__(f"{prefix}{message}")


class ContractError(LabError):
    """前置条件不满足"""


class DomainError(LabError, ValueError):
    """参数超出定义域"""


class LookupFailure(LabError, KeyError):
    """未知的 prompt / view 编号"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConfigError(LabError):
    """配置解析错误，携带出错的键路径"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class CheckpointError(LabError):
    """检查点缺失、损坏或版本不符"""


class TrainingError(LabError):
    """训练过程中出现非有限的损失或梯度"""


class MetricsFormatError(LabError):
    """指标文件格式错误，携带行号"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"第 {line} 行: {message}" if line is not None else message)
