# -*- coding: utf-8 -*-
"""
MVC-ZigAL：多视角约束之字形优势学习
"""

from core.method_system import MethodBase
from core.objectives import mvc_advantages, mvc_zigal_loss


class ConstrainedZigzagAdvantage(MethodBase):
    """多视角约束之字形优势学习"""

    name = "mvc-zigal"
    description = "逐视角对数比差回归以当前 λ 计算的约束优势"
    uses_controller = True

    def prepare(self, pairs, lam):
        for pair in pairs:
            pair.advantages = mvc_advantages(pair, lam)

    def loss(self, model, pair):
        return mvc_zigal_loss(model, pair, pair.advantages, None, self.objective)
