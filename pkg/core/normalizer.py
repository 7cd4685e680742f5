# -*- coding: utf-8 -*-
"""
奖励归一化模块
单视角与联合奖励两个通道的跨 epoch 指数滑动统计
"""

import math
from typing import Dict, Literal, Optional, Sequence

import numpy as np

from core.errors import CheckpointError, ContractError
from core.objectives import RewardRecord

CHANNELS = ("single", "joint")


class RunningNormalizer:
    """
    滑动均值/方差归一化器

    running 模式：第一批直接采用该批统计量，之后 mean ← d·mean + (1−d)·batch_mean（方差同理）；
    batch 模式：每批只使用该批自身的统计量。方差下限为 eps。
    """

    def __init__(self, decay: float = 0.95, eps: float = 1e-8,
                 mode: Literal["running", "batch"] = "running"):
        if not 0.0 <= decay < 1.0:
            raise ContractError(f"衰减系数必须在 [0, 1) 内，得到 {decay}")
        self.decay = decay
        self.eps = eps
        self.mode = mode
        self.mean: Dict[str, float] = {}
        self.var: Dict[str, float] = {}

    def update(self, channel: str, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ContractError(f"通道 {channel} 的批为空")
        batch_mean = float(np.mean(values))
        batch_var = float(np.var(values))
        if self.mode == "batch" or channel not in self.mean:
            self.mean[channel] = batch_mean
            self.var[channel] = max(batch_var, self.eps)
            return
        self.mean[channel] = self.decay * self.mean[channel] + (1.0 - self.decay) * batch_mean
        self.var[channel] = max(self.decay * self.var[channel] + (1.0 - self.decay) * batch_var, self.eps)

    def normalize(self, channel: str, values):
        if channel not in self.mean:
            raise ContractError(f"通道 {channel} 尚无统计量")
        std = max(math.sqrt(self.var[channel]), self.eps)
        return (np.asarray(values, dtype=np.float64) - self.mean[channel]) / std

    def state_dict(self) -> Dict:
        return {"mean": dict(self.mean), "var": dict(self.var), "decay": self.decay,
                "eps": self.eps, "mode": self.mode}

    def load_state_dict(self, data: Optional[Dict]):
        if not data:
            return
        try:
            self.mean = {k: float(v) for k, v in data["mean"].items()}
            self.var = {k: float(v) for k, v in data["var"].items()}
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise CheckpointError(f"归一化器状态损坏: {e}") from e


def normalize_rewards(records: Sequence[RewardRecord], normalizer: RunningNormalizer) -> Sequence[RewardRecord]:
    """
    先用原始批更新统计量，再写入归一化值

    单视角通道汇总所有视角与两种标记，联合通道汇总两种标记。

    Args:
        records: 本批全部奖励记录
        normalizer: 归一化器（原地更新）

    Returns:
        Sequence[RewardRecord]: 同一批记录（已填入 single_norm / joint_norm）
    """
    if not records:
        raise ContractError("奖励批为空")
    normalizer.update("single", np.concatenate([np.ravel(r.single) for r in records]))
    normalizer.update("joint", np.array([r.joint for r in records]))
    for record in records:
        record.single_norm = normalizer.normalize("single", record.single)
        record.joint_norm = float(normalizer.normalize("joint", record.joint))
    return records
