# -*- coding: utf-8 -*-
"""
策略优化目标模块
奖励与优势变换（之字形优势、多视角约束奖励、加权和奖励、对数比裁剪）
以及全部损失：MV-PG、MV-DPO、MV-RDL、MV-ZigAL、MVC-ZigAL
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.diffusion import Denoiser, DenoiserParams, MultiviewTrajectory, replay_log_probs, step_log_prob_graph
from core.errors import ContractError, DomainError, TrainingError
from core.grad import ComputeGraph, GradientMap, Node, backward
from core.logger import get_logger

logger = get_logger("objectives")

ArrayLike = Union[float, np.ndarray]


class ObjectiveConfig(BaseModel):
    """损失函数配置"""

    model_config = ConfigDict(extra="forbid")

    eta: float = Field(1.0, gt=0.0)
    beta_dpo: float = Field(1.0, gt=0.0)
    w_mv: float = Field(0.5, ge=0.0)
    prob_floor: float = Field(1e-4, gt=0.0, lt=1.0)
    residual_mode: Literal["pooled", "per-step"] = "pooled"

    @property
    def log_ratio_clip(self) -> float:
        """逐步对数比的对称裁剪界 −ln(prob_floor)"""
        return -math.log(self.prob_floor)


# ==================== 奖励记录与轨迹对 ====================

@dataclass
class RewardRecord:
    """一条轨迹的原始奖励与归一化奖励"""

    single: np.ndarray
    joint: float
    tag: str = "s"
    single_norm: Optional[np.ndarray] = None
    joint_norm: Optional[float] = None

    @property
    def normalized(self) -> bool:
        return self.single_norm is not None and self.joint_norm is not None


@dataclass
class TrajectoryPair:
    """
    同一 prompt 的一对轨迹

    standard 为标准采样（标记 s），partner 为 ZMV 轨迹（标记 z）或第二条标准轨迹（标记 b）；
    reference 缓存两者在参考参数下的逐步对数似然。
    """

    standard: MultiviewTrajectory
    partner: MultiviewTrajectory
    standard_reward: Optional[RewardRecord] = None
    partner_reward: Optional[RewardRecord] = None
    advantages: Optional[np.ndarray] = None
    reference: Optional[Tuple[np.ndarray, np.ndarray]] = None
    index: int = 0

    def __post_init__(self):
        if self.standard.prompt != self.partner.prompt:
            raise ContractError(f"轨迹对的 prompt 不一致: {self.standard.prompt} vs {self.partner.prompt}")
        if self.standard.num_views != self.partner.num_views:
            raise ContractError("轨迹对的视角数不一致")

    @property
    def prompt(self) -> int:
        return self.standard.prompt

    @property
    def num_views(self) -> int:
        return self.standard.num_views

    def swapped(self) -> "TrajectoryPair":
        return TrajectoryPair(self.partner, self.standard, self.partner_reward, self.standard_reward,
                              index=self.index)

    def records(self) -> Tuple[RewardRecord, RewardRecord]:
        if self.standard_reward is None or self.partner_reward is None:
            raise ContractError(f"轨迹对 #{self.index} 尚未评分")
        return self.standard_reward, self.partner_reward

    def normalized_records(self) -> Tuple[RewardRecord, RewardRecord]:
        s, z = self.records()
        if not (s.normalized and z.normalized):
            raise ContractError(f"轨迹对 #{self.index} 缺少归一化奖励")
        return s, z


# ==================== 奖励与优势 ====================

def zigzag_advantage(pair: TrajectoryPair) -> float:
    """A_mv = R_mv(z) − R_mv(s)（归一化联合奖励）"""
    s, z = pair.normalized_records()
    return float(z.joint_norm) - float(s.joint_norm)


def mvc_reward(single: ArrayLike, joint: float, lam: float) -> ArrayLike:
    """多视角约束奖励 (R + λ·R_mv)/(1+λ)"""
    if lam < 0:
        raise DomainError(f"λ 不能为负: {lam}")
    return (single + lam * joint) / (1.0 + lam)


def ws_reward(single: ArrayLike, joint: float, w_mv: float) -> ArrayLike:
    """加权和奖励 R + w_mv·R_mv"""
    if w_mv < 0:
        raise DomainError(f"w_mv 不能为负: {w_mv}")
    return single + w_mv * joint


def mvc_advantages(pair: TrajectoryPair, lam: float) -> np.ndarray:
    """逐视角约束优势 R_mvc(z, v) − R_mvc(s, v)，返回 [V]"""
    s, z = pair.normalized_records()
    return (np.asarray(mvc_reward(z.single_norm, z.joint_norm, lam), dtype=np.float64)
            - np.asarray(mvc_reward(s.single_norm, s.joint_norm, lam), dtype=np.float64))


def mvc_advantage(pair: TrajectoryPair, v: int, lam: float) -> float:
    """第 v 个视角（从 1 开始）的约束优势"""
    if not 1 <= v <= pair.num_views:
        raise ContractError(f"视角编号 {v} 不在 [1, {pair.num_views}] 内")
    return float(mvc_advantages(pair, lam)[v - 1])


def ws_advantages(pair: TrajectoryPair, w_mv: float) -> np.ndarray:
    """加权和奖励的逐视角优势"""
    s, z = pair.normalized_records()
    return (np.asarray(ws_reward(z.single_norm, z.joint_norm, w_mv), dtype=np.float64)
            - np.asarray(ws_reward(s.single_norm, s.joint_norm, w_mv), dtype=np.float64))


def clip_log_ratio(raw: ArrayLike, prob_floor: float = 1e-4) -> ArrayLike:
    """逐步对数比裁剪到 [ln(floor), −ln(floor)]"""
    bound = -math.log(prob_floor)
    clipped = np.clip(raw, -bound, bound)
    return float(clipped) if np.ndim(clipped) == 0 else clipped


# ==================== 计算图构件 ====================

def attach_reference(model: Denoiser, pair: TrajectoryPair, params: DenoiserParams):
    """在参考参数（θ' 或 DPO 参考模型）下计算并缓存两条轨迹的逐步对数似然"""
    pair.reference = (replay_log_probs(model, pair.standard, params=params),
                      replay_log_probs(model, pair.partner, params=params))


def _reference(model: Denoiser, pair: TrajectoryPair, params: Optional[DenoiserParams]):
    if pair.reference is not None:
        return pair.reference
    if params is None:
        raise ContractError(f"轨迹对 #{pair.index} 没有参考对数似然")
    return (replay_log_probs(model, pair.standard, params=params),
            replay_log_probs(model, pair.partner, params=params))


def log_prob_steps(graph: ComputeGraph, nodes: Dict[str, Node], model: Denoiser,
                   trajectory: MultiviewTrajectory) -> List[Node]:
    """轨迹上各参与似然的时间步的对数密度节点（每个 [V]），顺序 t = T..2"""
    return [step_log_prob_graph(graph, nodes, model, trajectory.latents[t - 1], trajectory.sources[t], t,
                                trajectory.prompt, trajectory.omegas[t], trajectory.sigmas[t])
            for t in trajectory.likelihood_steps()]


def log_ratio_steps(graph: ComputeGraph, nodes: Dict[str, Node], model: Denoiser,
                    trajectory: MultiviewTrajectory, reference: np.ndarray, bound: float) -> List[Node]:
    """逐步裁剪后的对数比 log p_θ − log p_ref（每个 [V]）"""
    steps = trajectory.likelihood_steps()
    current = log_prob_steps(graph, nodes, model, trajectory)
    return [graph.clip(graph.sub(node, graph.constant(reference[t])), -bound, bound)
            for t, node in zip(steps, current)]


def _total(graph: ComputeGraph, per_step: Sequence[Node]) -> Node:
    return graph.sum(graph.add_all(list(per_step)))


def _gap_steps(graph: ComputeGraph, ratios_a: Sequence[Node], ratios_b: Sequence[Node], eta: float):
    return [graph.scale(graph.sub(a, b), 1.0 / eta) for a, b in zip(ratios_a, ratios_b)]


def _residual(graph: ComputeGraph, gaps: Sequence[Node], target: ArrayLike, mode: str) -> Node:
    """
    gap 与目标之间的平方误差

    pooled: (Σ_{t,v} gap − A)²；per-step: Σ_{t,v} (gap_{t,v} − A_v)²（A 为标量时各视角共用）
    """
    if mode == "pooled":
        if np.ndim(target) != 0:
            raise ContractError("pooled 残差需要标量目标")
        return graph.squared_error(_total(graph, gaps), graph.constant(float(target)))
    view_target = np.broadcast_to(np.asarray(target, dtype=np.float64), gaps[0].shape)
    return graph.add_all([graph.squared_error(gap, graph.constant(view_target)) for gap in gaps])


# ==================== 损失 ====================

@dataclass
class LossResult:
    """损失值与对参数的梯度"""

    value: float
    grads: GradientMap
    count: int = 1
    details: Dict[str, float] = field(default_factory=dict)


def compute_loss(model: Denoiser, build: Callable[[ComputeGraph, Dict[str, Node]], Node],
                 label: str = "") -> LossResult:
    """
    在独立计算图上构建标量损失并反向传播

    Args:
        model: 当前参数所在的噪声预测器
        build: (graph, 参数节点) -> 标量损失节点
        label: 出错时用于定位的轨迹对描述

    Returns:
        LossResult: 损失值与梯度
    """
    graph = ComputeGraph()
    nodes = model.bind(graph, trainable=True)
    loss = graph.set_output(build(graph, nodes))
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingError(f"{label} 损失非有限: {value}")
    grads = backward(graph)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"{label} 参数 {name} 的梯度非有限")
    return LossResult(value=value, grads=grads)


def accumulate(results: Sequence[LossResult]) -> LossResult:
    """按固定顺序求批均值"""
    if not results:
        raise ContractError("没有可累加的损失")
    names = sorted(results[0].grads)
    grads = {name: np.zeros_like(results[0].grads[name]) for name in names}
    value = 0.0
    for result in results:
        value += result.value
        for name in names:
            grads[name] = grads[name] + result.grads[name]
    count = len(results)
    return LossResult(value=value / count, grads={k: v / count for k, v in grads.items()}, count=count)


def _pair_label(pair: TrajectoryPair) -> str:
    return f"轨迹对 #{pair.index} (prompt {pair.prompt})"


def pg_loss_graph(graph: ComputeGraph, nodes: Dict[str, Node], model: Denoiser,
                  trajectory: MultiviewTrajectory, weights: ArrayLike) -> Node:
    """−Σ_{t,v} w_v·log p_θ(x_{t-1}^v | x_t^v)；w 为标量时各视角共用"""
    view_weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (trajectory.num_views,))
    weight_node = graph.constant(view_weights)
    terms = [graph.mul(step, weight_node) for step in log_prob_steps(graph, nodes, model, trajectory)]
    return graph.scale(_total(graph, terms), -1.0)


def mv_pg_loss(model: Denoiser, trajectories: Sequence[MultiviewTrajectory],
               weights: Sequence[ArrayLike]) -> LossResult:
    """
    多视角策略梯度损失：批均值 −R_mv·Σ_{t,v} log p_θ

    Args:
        model: 噪声预测器（当前参数 θ）
        trajectories: 轨迹批
        weights: 每条轨迹的联合奖励（标量），或逐视角权重 [V]（MVC-ZigPG）

    Returns:
        LossResult: 批均值损失与梯度
    """
    if len(trajectories) != len(weights):
        raise ContractError("轨迹数与奖励数不一致")
    results = []
    for i, (trajectory, weight) in enumerate(zip(trajectories, weights)):
        results.append(compute_loss(
            model, lambda g, n, tr=trajectory, w=weight: pg_loss_graph(g, n, model, tr, w),
            label=f"轨迹 #{i} (prompt {trajectory.prompt})"))
    return accumulate(results)


def is_tied(pair: TrajectoryPair) -> bool:
    """两条轨迹的原始联合奖励是否相同"""
    s, z = pair.records()
    return s.joint == z.joint


def rank_pair(pair: TrajectoryPair) -> Tuple[MultiviewTrajectory, MultiviewTrajectory, int]:
    """
    按原始联合奖励排序

    Returns:
        (winner, loser, winner_index)，winner_index 为 0 表示 standard 获胜
    """
    if is_tied(pair):
        raise ContractError(f"{_pair_label(pair)} 联合奖励相同，无法排序")
    s, z = pair.records()
    if s.joint > z.joint:
        return pair.standard, pair.partner, 0
    return pair.partner, pair.standard, 1


def dpo_loss_graph(graph: ComputeGraph, nodes: Dict[str, Node], model: Denoiser, pair: TrajectoryPair,
                   reference: Tuple[np.ndarray, np.ndarray], config: ObjectiveConfig) -> Node:
    winner, loser, winner_index = rank_pair(pair)
    ref_w, ref_l = (reference[0], reference[1]) if winner_index == 0 else (reference[1], reference[0])
    bound = config.log_ratio_clip
    ratio_w = _total(graph, log_ratio_steps(graph, nodes, model, winner, ref_w, bound))
    ratio_l = _total(graph, log_ratio_steps(graph, nodes, model, loser, ref_l, bound))
    margin = graph.scale(graph.sub(ratio_w, ratio_l), config.beta_dpo)
    return graph.scale(graph.log_sigmoid(margin), -1.0)


def mv_dpo_loss(model: Denoiser, pair: TrajectoryPair, ref_params: Optional[DenoiserParams],
                config: ObjectiveConfig) -> LossResult:
    """
    多视角 DPO 损失 −log σ(β·Σ_{t,v}[logratio(winner) − logratio(loser)])

    logratio 为当前参数相对参考参数的逐步对数比，θ = ref 时损失为 log 2；
    联合奖励相同的轨迹对无法排序，抛出 ContractError。
    """
    reference = _reference(model, pair, ref_params)
    return compute_loss(model, lambda g, n: dpo_loss_graph(g, n, model, pair, reference, config),
                        label=_pair_label(pair))


def regression_loss_graph(graph: ComputeGraph, nodes: Dict[str, Node], model: Denoiser,
                          pair: TrajectoryPair, reference: Tuple[np.ndarray, np.ndarray],
                          target: ArrayLike, config: ObjectiveConfig, mode: str) -> Node:
    """对数比差 (1/η)(logratio_partner − logratio_standard) 对目标的回归"""
    bound = config.log_ratio_clip
    ratios_z = log_ratio_steps(graph, nodes, model, pair.partner, reference[1], bound)
    ratios_s = log_ratio_steps(graph, nodes, model, pair.standard, reference[0], bound)
    return _residual(graph, _gap_steps(graph, ratios_z, ratios_s, config.eta), target, mode)


def mv_rdl_loss(model: Denoiser, pair: TrajectoryPair, prev_params: Optional[DenoiserParams],
                config: ObjectiveConfig) -> LossResult:
    """
    多视角奖励差学习损失：((1/η)·Σ_{t,v}(logratio_b − logratio_a) − (R_mv^b − R_mv^a))²

    两条标准轨迹中 standard 为 a、partner 为 b，使用归一化联合奖励。
    """
    s, b = pair.normalized_records()
    target = float(b.joint_norm) - float(s.joint_norm)
    reference = _reference(model, pair, prev_params)
    return compute_loss(
        model, lambda g, n: regression_loss_graph(g, n, model, pair, reference, target, config,
                                                  config.residual_mode),
        label=_pair_label(pair))


def mv_zigal_loss(model: Denoiser, pair: TrajectoryPair, prev_params: Optional[DenoiserParams],
                  config: ObjectiveConfig) -> LossResult:
    """之字形优势学习损失：对数比差（汇总）对 A_mv 的平方误差"""
    target = zigzag_advantage(pair)
    reference = _reference(model, pair, prev_params)
    return compute_loss(
        model, lambda g, n: regression_loss_graph(g, n, model, pair, reference, target, config,
                                                  config.residual_mode),
        label=_pair_label(pair))


def mvc_zigal_loss(model: Denoiser, pair: TrajectoryPair, advantages: np.ndarray,
                   prev_params: Optional[DenoiserParams], config: ObjectiveConfig) -> LossResult:
    """
    多视角约束之字形优势学习损失

    Σ_{t,v} ((1/η)(logratio_z − logratio_s)_{t,v} − A_mvc(v))²，残差逐视角配对

    Args:
        model: 噪声预测器（当前参数 θ）
        pair: (standard, zigzag) 轨迹对
        advantages: 逐视角约束优势 [V]
        prev_params: 快照参数 θ'（pair.reference 已缓存时可为 None）
        config: 损失配置

    Returns:
        LossResult: 损失与梯度
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.shape != (pair.num_views,):
        raise ContractError(f"优势形状应为 ({pair.num_views},)，得到 {advantages.shape}")
    reference = _reference(model, pair, prev_params)
    return compute_loss(
        model, lambda g, n: regression_loss_graph(g, n, model, pair, reference, advantages, config,
                                                  "per-step"),
        label=_pair_label(pair))
