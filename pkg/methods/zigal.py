# -*- coding: utf-8 -*-
"""
ZigAL：只用单视角奖励的逐视角之字形优势学习（约束目标在 λ = 0 时的特例）
"""

from core.method_system import MethodBase
from core.objectives import mvc_advantages, mvc_zigal_loss


class SingleViewZigzagAdvantage(MethodBase):
    """单视角之字形优势学习"""

    name = "zigal"
    description = "逐视角对数比差回归单视角奖励差，不使用联合奖励"

    def prepare(self, pairs, lam):
        for pair in pairs:
            pair.advantages = mvc_advantages(pair, 0.0)

    def loss(self, model, pair):
        return mvc_zigal_loss(model, pair, pair.advantages, None, self.objective)
