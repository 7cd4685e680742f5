# -*- coding: utf-8 -*-
"""
MV-ZigAL：之字形优势学习（汇总对数比差回归 A_mv）
"""

from core.method_system import MethodBase
from core.objectives import mv_zigal_loss


class MultiviewZigzagAdvantage(MethodBase):
    """多视角之字形优势学习"""

    name = "mv-zigal"
    description = "标准轨迹与 ZMV 轨迹的对数比差回归联合奖励之差"

    def loss(self, model, pair):
        return mv_zigal_loss(model, pair, None, self.objective)
