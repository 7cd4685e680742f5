# -*- coding: utf-8 -*-
"""
MV-PG：以联合奖励加权的多视角策略梯度
"""

from core.method_system import MethodBase
from core.objectives import mv_pg_loss


class MultiviewPolicyGradient(MethodBase):
    """多视角策略梯度"""

    name = "mv-pg"
    description = "两条标准轨迹，各自以归一化联合奖励加权对数似然"
    pairing = "standard"
    reference = "none"

    def loss(self, model, pair):
        s, b = pair.normalized_records()
        return mv_pg_loss(model, [pair.standard, pair.partner], [s.joint_norm, b.joint_norm])
