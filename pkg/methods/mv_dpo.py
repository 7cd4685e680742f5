# -*- coding: utf-8 -*-
"""
MV-DPO：以原始联合奖励排序的在线偏好对
"""

from core.method_system import MethodBase
from core.objectives import is_tied, mv_dpo_loss


class MultiviewDPO(MethodBase):
    """多视角直接偏好优化"""

    name = "mv-dpo"
    description = "同一 prompt 的两条标准轨迹组成偏好对，参考模型为冻结的预训练参数"
    pairing = "standard"
    reference = "pretrained"

    def loss(self, model, pair):
        if is_tied(pair):
            self.logger.warning(f"跳过联合奖励相同的轨迹对 #{pair.index} (prompt {pair.prompt})")
            return None
        return mv_dpo_loss(model, pair, None, self.objective)
