# -*- coding: utf-8 -*-
"""
WS-ZigAL：单视角与联合奖励的固定加权和
"""

from core.method_system import MethodBase
from core.objectives import mvc_zigal_loss, ws_advantages


class WeightedSumZigzagAdvantage(MethodBase):
    """加权和之字形优势学习"""

    name = "ws-zigal"
    description = "优势取 R + w_mv·R_mv 之差，关闭 λ 机制"

    def prepare(self, pairs, lam):
        for pair in pairs:
            pair.advantages = ws_advantages(pair, self.objective.w_mv)

    def loss(self, model, pair):
        return mvc_zigal_loss(model, pair, pair.advantages, None, self.objective)
