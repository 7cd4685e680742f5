# -*- coding: utf-8 -*-
"""
训练方法系统模块
每种对比方法是一个 MethodBase 子类，放在 methods/ 包中，由 MethodRegistry 动态发现
"""

import importlib
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type

from core.diffusion import Denoiser
from core.errors import ConfigError
from core.logger import get_logger
from core.objectives import LossResult, ObjectiveConfig, TrajectoryPair

logger = get_logger("method_system")


class MethodBase(ABC):
    """训练方法基类"""

    # 方法元信息（子类必须定义）
    name: str = "unnamed"
    description: str = ""
    version: str = "1.0.0"

    # zigzag: 每个 prompt 一条标准轨迹 + 一条 ZMV 轨迹；standard: 两条标准轨迹
    pairing: str = "zigzag"
    # 是否运行拉格朗日控制器
    uses_controller: bool = False
    # snapshot: 对数比以本 epoch 快照 θ' 为参考；pretrained: 以冻结的预训练参数为参考；none: 不需要参考
    reference: str = "snapshot"

    def __init__(self, objective: ObjectiveConfig):
        self.objective = objective
        self.logger = get_logger(f"method.{self.name}")

    def prepare(self, pairs: Sequence[TrajectoryPair], lam: float):
        """
        奖励归一化、控制器更新之后调用，用于写入逐视角优势

        Args:
            pairs: 本批轨迹对
            lam: 当前 λ（未使用控制器的方法为 0）
        """

    @abstractmethod
    def loss(self, model: Denoiser, pair: TrajectoryPair) -> Optional[LossResult]:
        """
        单个轨迹对的损失与梯度

        Args:
            model: 当前参数 θ 所在的噪声预测器
            pair: 已评分、已缓存参考对数似然的轨迹对

        Returns:
            Optional[LossResult]: None 表示跳过该轨迹对
        """

    def get_info(self) -> Dict:
        return {
            "name": self.name,
            "description": self.description,
            "version": self.version,
            "pairing": self.pairing,
            "uses_controller": self.uses_controller,
            "reference": self.reference,
        }


class MethodRegistry:
    """方法注册表"""

    def __init__(self, package: str = "methods"):
        self.package = package
        self.methods: Dict[str, Type[MethodBase]] = {}
        self._discovered = False

    def discover_methods(self) -> List[str]:
        """
        发现方法包中的所有模块

        Returns:
            List[str]: 模块名列表
        """
        module = importlib.import_module(self.package)
        package_dir = Path(module.__file__).parent
        return sorted(file.stem for file in package_dir.glob("*.py") if not file.name.startswith("__"))

    def load_method(self, module_name: str) -> bool:
        """
        加载单个方法模块并注册其中的 MethodBase 子类

        Args:
            module_name: 模块名（不含 .py）

        Returns:
            bool: 是否找到方法类
        """
        module = importlib.import_module(f"{self.package}.{module_name}")
        found = False
        for attr_name in dir(module):
            attr = getattr(module, attr_name)
            if isinstance(attr, type) and issubclass(attr, MethodBase) and attr is not MethodBase \
                    and attr.__module__ == module.__name__:
                self.register(attr)
                found = True
        if not found:
            logger.warning(f"方法模块 {module_name} 中未找到方法类")
        return found

    def register(self, method_class: Type[MethodBase]):
        if method_class.name in self.methods and self.methods[method_class.name] is not method_class:
            raise ConfigError(f"方法名重复: {method_class.name}", key="method")
        self.methods[method_class.name] = method_class

    def load_all_methods(self):
        if self._discovered:
            return
        for module_name in self.discover_methods():
            self.load_method(module_name)
        self._discovered = True
        logger.debug(f"共注册 {len(self.methods)} 种方法: {sorted(self.methods)}")

    def names(self) -> List[str]:
        self.load_all_methods()
        return sorted(self.methods)

    def create(self, name: str, objective: ObjectiveConfig) -> MethodBase:
        """
        按名称实例化方法

        Args:
            name: 方法名，如 "mvc-zigal"
            objective: 损失配置

        Returns:
            MethodBase: 方法实例
        """
        self.load_all_methods()
        if name not in self.methods:
            raise ConfigError(f"未知方法 {name}，可选: {sorted(self.methods)}", key="method")
        return self.methods[name](objective)


# 全局方法注册表实例
method_registry = MethodRegistry()


def get_method(name: str, objective: ObjectiveConfig) -> MethodBase:
    """获取方法实例的便捷函数"""
    return method_registry.create(name, objective)
