# -*- coding: utf-8 -*-
"""
MV-RDL：对数比差回归联合奖励差
"""

from core.method_system import MethodBase
from core.objectives import mv_rdl_loss


class MultiviewRewardDifference(MethodBase):
    """多视角奖励差学习"""

    name = "mv-rdl"
    description = "两条标准轨迹的对数比差回归归一化联合奖励差"
    pairing = "standard"

    def loss(self, model, pair):
        return mv_rdl_loss(model, pair, None, self.objective)
