# -*- coding: utf-8 -*-
"""
MVC-ZigPG：复用之字形轨迹对，但用多视角约束奖励加权的策略梯度代替优势学习
"""

import numpy as np

from core.method_system import MethodBase
from core.objectives import mv_pg_loss, mvc_reward


class ConstrainedZigzagPolicyGradient(MethodBase):
    """多视角约束之字形策略梯度"""

    name = "mvc-zigpg"
    description = "标准与 ZMV 轨迹各自以逐视角 R_mvc 加权对数似然"
    uses_controller = True

    def __init__(self, objective):
        super().__init__(objective)
        self.lam = 0.0

    def prepare(self, pairs, lam):
        self.lam = lam

    def loss(self, model, pair):
        s, z = pair.normalized_records()
        weights = [np.asarray(mvc_reward(s.single_norm, s.joint_norm, self.lam)),
                   np.asarray(mvc_reward(z.single_norm, z.joint_norm, self.lam))]
        return mv_pg_loss(model, [pair.standard, pair.partner], weights)
