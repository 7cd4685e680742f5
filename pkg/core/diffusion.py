# -*- coding: utf-8 -*-
"""
多视角扩散模型模块
少步条件高斯扩散：噪声调度、带 prompt/视角/时间条件的去噪网络、
无分类器引导、标准多视角采样、逐步对数似然以及预训练
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.errors import ConfigError, ContractError, LookupFailure
from core.grad import ComputeGraph, Node, backward
from core.logger import get_logger

logger = get_logger("diffusion")

BETA_START = 1e-2
BETA_END = 0.3
MAX_STEPS = 16


# ==================== 配置 ====================

class ModelConfig(BaseModel):
    """去噪网络与玩具场景的结构配置"""

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(2, ge=2)
    hidden: int = Field(64, ge=1)
    prompt_embed_dim: int = Field(8, ge=1)
    view_embed_dim: int = Field(8, ge=1)
    num_prompts: int = Field(32, ge=1)
    gamma: float = Field(0.5, ge=0.0)
    init_seed: int = 0


class GuidanceConfig(BaseModel):
    """无分类器引导的高低两档系数"""

    model_config = ConfigDict(extra="forbid")

    omega_high: float = 7.0
    omega_low: float = 1.0

    @model_validator(mode="before")
    @classmethod
    def _split_scales(cls, data):
        # 配置文件里写成 guidance.scales = (7.0, 1.0)
        if isinstance(data, dict) and "scales" in data:
            data = dict(data)
            scales = data.pop("scales")
            if not isinstance(scales, (list, tuple)) or len(scales) != 2:
                raise ValueError("scales 需要两个数值 (omega_high, omega_low)")
            data["omega_high"], data["omega_low"] = scales
        return data

    @model_validator(mode="after")
    def _check_order(self):
        if self.omega_low < 0:
            raise ValueError("omega_low 不能为负")
        if self.omega_high < self.omega_low:
            raise ValueError("omega_high 必须不小于 omega_low")
        return self


# ==================== 噪声调度 ====================

@dataclass(frozen=True)
class NoiseSchedule:
    """
    噪声调度，所有数组按 t = 0..T 索引（下标 0 为占位：beta_0 = 0, ᾱ_0 = 1）
    """

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alphabar: np.ndarray
    sigmas: np.ndarray

    def check_step(self, t: int):
        if not 1 <= t <= self.steps:
            raise ContractError(f"时间步 {t} 不在 [1, {self.steps}] 内")

    def to_dict(self) -> Dict:
        return {"steps": self.steps, "betas": [float(b) for b in self.betas[1:]]}


def build_noise_schedule(steps: int) -> NoiseSchedule:
    """
    构建线性 beta 调度

    Args:
        steps: 采样步数 T（≥ 2）

    Returns:
        NoiseSchedule: 调度对象，sigma_t 取祖先采样的后验标准差
    """
    if steps < 2:
        raise ConfigError(f"步数必须至少为 2，得到 {steps}", key="steps")

    betas = np.concatenate([[0.0], np.linspace(BETA_START, BETA_END, steps)])
    alphas = 1.0 - betas
    alphabar = np.cumprod(alphas)

    sigmas = np.zeros(steps + 1)
    for t in range(1, steps + 1):
        sigmas[t] = math.sqrt(betas[t] * (1.0 - alphabar[t - 1]) / (1.0 - alphabar[t]))

    return NoiseSchedule(steps=steps, betas=betas, alphas=alphas, alphabar=alphabar, sigmas=sigmas)


def mean_coefficients(schedule: NoiseSchedule, t: int, sigma: float) -> Tuple[float, float]:
    """
    μ = a·x_t + b·ε̂ 的系数

    μ = √ᾱ_{t-1}·x̂_0 + √(1 − ᾱ_{t-1} − σ²)·ε̂，其中 x̂_0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t；
    σ 取后验标准差时与祖先采样均值完全一致，σ = 0 时为确定性步。
    """
    abar_t = schedule.alphabar[t]
    abar_prev = schedule.alphabar[t - 1]
    direction = math.sqrt(max(1.0 - abar_prev - sigma * sigma, 0.0))
    a = math.sqrt(abar_prev) / math.sqrt(abar_t)
    b = direction - math.sqrt(abar_prev) * math.sqrt(1.0 - abar_t) / math.sqrt(abar_t)
    return a, b


def predicted_clean(schedule: NoiseSchedule, x_t: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """由噪声预测反推干净样本 x̂_0（t = 0 时返回 x_t 本身）"""
    abar = schedule.alphabar[t]
    return (x_t - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)


# ==================== 去噪网络参数 ====================

@dataclass
class DenoiserParams:
    """去噪网络的全部可学习数组（两层宽度 hidden 的 tanh MLP + prompt/视角嵌入表）"""

    arrays: Dict[str, np.ndarray]
    dim: int
    steps: int
    num_prompts: int
    num_views: int
    hidden: int

    NAMES = ("prompt_embedding", "view_embedding", "w1", "b1", "w2", "b2", "w3", "b3")

    @classmethod
    def initialize(cls, config: ModelConfig, num_views: int, steps: int,
                   seed: Optional[int] = None) -> "DenoiserParams":
        """
        随机初始化参数

        Args:
            config: 模型结构配置
            num_views: 视角嵌入表行数
            steps: 时间步数（决定 one-hot 时间嵌入长度）
            seed: 随机种子，默认使用 config.init_seed

        Returns:
            DenoiserParams: 新参数
        """
        if steps > MAX_STEPS:
            raise ConfigError(f"one-hot 时间嵌入最多支持 {MAX_STEPS} 步", key="steps")
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        d, h = config.dim, config.hidden
        width = 2 * d + config.prompt_embed_dim + config.view_embed_dim + steps

        arrays = {
            "prompt_embedding": rng.normal(0.0, 0.5, (config.num_prompts, config.prompt_embed_dim)),
            "view_embedding": rng.normal(0.0, 0.5, (num_views, config.view_embed_dim)),
            "w1": rng.normal(0.0, 1.0 / math.sqrt(width), (width, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(h), (h, h)),
            "b2": np.zeros(h),
            "w3": rng.normal(0.0, 0.1 / math.sqrt(h), (h, d)),
            "b3": np.zeros(d),
        }
        return cls(arrays=arrays, dim=d, steps=steps, num_prompts=config.num_prompts,
                   num_views=num_views, hidden=h)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(arrays={k: v.copy() for k, v in self.arrays.items()},
                              dim=self.dim, steps=self.steps, num_prompts=self.num_prompts,
                              num_views=self.num_views, hidden=self.hidden)

    def meta(self) -> Dict:
        return {"dim": self.dim, "steps": self.steps, "num_prompts": self.num_prompts,
                "num_views": self.num_views, "hidden": self.hidden}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


@dataclass
class EvaluationCounter:
    """去噪网络调用计数：每次引导预测包含条件与无条件两次网络前向"""

    predictions: int = 0
    network_passes: int = 0

    def reset(self):
        self.predictions = 0
        self.network_passes = 0


class Denoiser:
    """条件噪声预测器：ε̂ = (1−ω)·ε_uncond + ω·ε_cond"""

    def __init__(self, params: DenoiserParams, schedule: NoiseSchedule):
        if params.steps != schedule.steps:
            raise ConfigError(f"参数步数 {params.steps} 与调度步数 {schedule.steps} 不一致", key="steps")
        self.params = params
        self.schedule = schedule
        self.counter = EvaluationCounter()

    # ---------- 计算图构建 ----------

    def bind(self, graph: ComputeGraph, trainable: bool = True,
             params: Optional[DenoiserParams] = None) -> Dict[str, Node]:
        """把参数挂到计算图上；trainable=False 时作为常量"""
        source = params if params is not None else self.params
        if trainable:
            return {name: graph.parameter(name, value) for name, value in source.arrays.items()}
        return {name: graph.constant(value) for name, value in source.arrays.items()}

    def _check_ids(self, prompt: int, views: Sequence[int]):
        if not 0 <= prompt < self.params.num_prompts:
            raise LookupFailure(f"未知的 prompt 编号: {prompt}")
        for v in views:
            if not 0 <= v < self.params.num_views:
                raise LookupFailure(f"未知的视角编号: {v}")

    def network(self, graph: ComputeGraph, nodes: Dict[str, Node], x: np.ndarray,
                context: np.ndarray, prompt_onehot: np.ndarray, view_onehot: np.ndarray,
                time_onehot: np.ndarray) -> Node:
        """
        一次网络前向（按行批量）

        Args:
            x: 当前潜变量 [n, d]
            context: 跨视角上下文特征 [n, d]
            prompt_onehot: prompt one-hot [n, P]，全零行即无条件分支
            view_onehot: 视角 one-hot [n, V]，全零行即无条件分支
            time_onehot: 时间 one-hot [n, T]

        Returns:
            Node: 噪声预测 [n, d]
        """
        self.counter.network_passes += 1
        prompt_emb = graph.affine(graph.constant(prompt_onehot), nodes["prompt_embedding"])
        view_emb = graph.affine(graph.constant(view_onehot), nodes["view_embedding"])
        h = graph.concat([graph.constant(x), graph.constant(context), prompt_emb, view_emb,
                          graph.constant(time_onehot)])
        h = graph.tanh(graph.affine(h, nodes["w1"], nodes["b1"]))
        h = graph.tanh(graph.affine(h, nodes["w2"], nodes["b2"]))
        return graph.affine(h, nodes["w3"], nodes["b3"])

    def _conditioning(self, count: int, t: int, prompt: int, views: Sequence[int]):
        prompt_onehot = np.zeros((count, self.params.num_prompts))
        prompt_onehot[:, prompt] = 1.0
        view_onehot = np.zeros((count, self.params.num_views))
        view_onehot[np.arange(count), list(views)] = 1.0
        time_onehot = np.zeros((count, self.params.steps))
        time_onehot[:, t - 1] = 1.0
        return prompt_onehot, view_onehot, time_onehot

    def noise_graph(self, graph: ComputeGraph, nodes: Dict[str, Node], x: np.ndarray, t: int,
                    prompt: int, omega: float, views: Optional[Sequence[int]] = None) -> Node:
        """
        在计算图中构建引导后的噪声预测

        Args:
            x: 各视角当前潜变量 [V, d]
            t: 时间步
            prompt: prompt 编号
            omega: 引导系数
            views: 视角编号，默认 0..V-1

        Returns:
            Node: ε̂ [V, d]
        """
        self.schedule.check_step(t)
        x = np.asarray(x, dtype=np.float64)
        views = list(range(x.shape[0])) if views is None else list(views)
        self._check_ids(prompt, views)

        context = np.repeat(np.mean(x, axis=0, keepdims=True), x.shape[0], axis=0)
        prompt_onehot, view_onehot, time_onehot = self._conditioning(x.shape[0], t, prompt, views)

        self.counter.predictions += 1
        cond = self.network(graph, nodes, x, context, prompt_onehot, view_onehot, time_onehot)
        uncond = self.network(graph, nodes, x, context, np.zeros_like(prompt_onehot),
                              np.zeros_like(view_onehot), time_onehot)
        return graph.add(graph.scale(uncond, 1.0 - omega), graph.scale(cond, omega))

    def predict_noise(self, x: np.ndarray, t: int, prompt: int, omega: float,
                      views: Optional[Sequence[int]] = None) -> np.ndarray:
        """数值版本的噪声预测"""
        graph = ComputeGraph()
        nodes = self.bind(graph, trainable=False)
        return self.noise_graph(graph, nodes, x, t, prompt, omega, views).value

    def mean_graph(self, graph: ComputeGraph, x_t: np.ndarray, eps: Node, t: int, sigma: float) -> Node:
        """在计算图中由 ε̂ 计算转移均值 μ_θ"""
        a, b = mean_coefficients(self.schedule, t, sigma)
        return graph.add(graph.scale(graph.constant(x_t), a), graph.scale(eps, b))


class ConstantNoisePredictor(Denoiser):
    """输出恒定 ε̂ 的桩预测器，用于采样器与反演的闭式校验"""

    def __init__(self, schedule: NoiseSchedule, eps, num_views: int = 1, num_prompts: int = 1):
        eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
        params = DenoiserParams(arrays={}, dim=eps.shape[-1], steps=schedule.steps,
                                num_prompts=num_prompts, num_views=num_views, hidden=0)
        super().__init__(params, schedule)
        self.eps = eps

    def noise_graph(self, graph: ComputeGraph, nodes: Dict[str, Node], x: np.ndarray, t: int,
                    prompt: int, omega: float, views: Optional[Sequence[int]] = None) -> Node:
        self.schedule.check_step(t)
        x = np.asarray(x, dtype=np.float64)
        views = list(range(x.shape[0])) if views is None else list(views)
        self._check_ids(prompt, views)
        self.counter.predictions += 1
        self.counter.network_passes += 2
        return graph.constant(np.broadcast_to(self.eps, x.shape))


# ==================== 采样与似然 ====================

@dataclass
class StepResult:
    """单步去噪结果"""

    x_prev: np.ndarray
    mean: np.ndarray
    sigma: float
    eps: np.ndarray
    log_prob: np.ndarray
    source: np.ndarray


def _transition(model: Denoiser, x_t: np.ndarray, t: int, prompt: int, omega: float,
                rng: np.random.Generator, eta: float, views: Optional[Sequence[int]]) -> StepResult:
    graph = ComputeGraph()
    nodes = model.bind(graph, trainable=False)
    eps = model.noise_graph(graph, nodes, x_t, t, prompt, omega, views)
    sigma = eta * float(model.schedule.sigmas[t])
    mean = model.mean_graph(graph, x_t, eps, t, sigma)

    if sigma > 0:
        x_prev = mean.value + sigma * rng.standard_normal(mean.value.shape)
        density = graph.gaussian_log_density(graph.constant(x_prev), mean, sigma, axis=-1).value
    else:
        x_prev = mean.value.copy()
        density = np.full(x_prev.shape[0], np.nan)
    return StepResult(x_prev=x_prev, mean=mean.value.copy(), sigma=sigma, eps=eps.value.copy(),
                      log_prob=np.array(density), source=x_t.copy())


def denoise_step(model: Denoiser, x_t: np.ndarray, t: int, prompt: int, omega: float,
                 rng: np.random.Generator, eta: float = 1.0,
                 views: Optional[Sequence[int]] = None) -> StepResult:
    """
    一步多视角去噪：x_{t-1} = μ_θ + σ·z

    Args:
        model: 噪声预测器
        x_t: 当前潜变量 [V, d]
        t: 时间步
        prompt: prompt 编号
        omega: 引导系数
        rng: 随机数生成器（σ = 0 时不消耗随机数）
        eta: σ = eta·σ_t，eta = 0 为确定性步

    Returns:
        StepResult: 采样结果及记录的 (μ, σ)
    """
    return _transition(model, np.asarray(x_t, dtype=np.float64), t, prompt, omega, rng, eta, views)


def step_log_prob_graph(graph: ComputeGraph, nodes: Dict[str, Node], model: Denoiser,
                        x_prev: np.ndarray, x_t: np.ndarray, t: int, prompt: int, omega: float,
                        sigma: Optional[float] = None) -> Node:
    """在计算图中构建 log p_θ(x_{t-1}^v | x_t^v, e_v, c)，返回各视角的对数密度 [V]"""
    if t == 1:
        raise ContractError("t = 1 为确定性步，不参与似然计算")
    model.schedule.check_step(t)
    sigma = float(model.schedule.sigmas[t]) if sigma is None else float(sigma)
    if sigma <= 0:
        raise ContractError(f"时间步 {t} 的标准差为 0，无法计算密度")
    eps = model.noise_graph(graph, nodes, x_t, t, prompt, omega)
    mean = model.mean_graph(graph, x_t, eps, t, sigma)
    return graph.gaussian_log_density(graph.constant(x_prev), mean, sigma, axis=-1)


def step_log_prob(model: Denoiser, x_prev: np.ndarray, x_t: np.ndarray, t: int, prompt: int,
                  omega: float, params: Optional[DenoiserParams] = None,
                  sigma: Optional[float] = None) -> np.ndarray:
    """数值版本：各视角的逐步对数似然 [V]"""
    graph = ComputeGraph()
    nodes = model.bind(graph, trainable=False, params=params)
    return step_log_prob_graph(graph, nodes, model, x_prev, x_t, t, prompt, omega, sigma).value.copy()


@dataclass
class MultiviewTrajectory:
    """
    一个 prompt 的多视角潜变量链

    latents[t] = x_t（t = T..0），means[t] / sigmas[t] / omegas[t] 描述 x_t → x_{t-1} 的转移，
    log_probs[t] 为采样时记录的各视角转移对数密度（t = 1 为 nan）。
    sources[t] 为该转移实际条件化的潜变量：标准步等于 latents[t]，之字形步为再去噪前的 x̃_t。
    """

    prompt: int
    latents: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    omegas: np.ndarray
    log_probs: np.ndarray
    sources: np.ndarray
    mode: str = "standard"
    seed: Optional[int] = None
    zigzag_steps: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def steps(self) -> int:
        return self.latents.shape[0] - 1

    @property
    def num_views(self) -> int:
        return self.latents.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.latents[0]

    def likelihood_steps(self) -> List[int]:
        """参与似然求和的时间步（t = T..2）"""
        return [t for t in range(self.steps, 1, -1)]


def empty_trajectory(prompt: int, num_views: int, schedule: NoiseSchedule, dim: int,
                     mode: str, seed: Optional[int]) -> MultiviewTrajectory:
    steps = schedule.steps
    return MultiviewTrajectory(
        prompt=prompt,
        latents=np.zeros((steps + 1, num_views, dim)),
        means=np.zeros((steps + 1, num_views, dim)),
        sigmas=np.zeros(steps + 1),
        omegas=np.zeros(steps + 1),
        log_probs=np.full((steps + 1, num_views), np.nan),
        sources=np.zeros((steps + 1, num_views, dim)),
        mode=mode,
        seed=seed,
    )


def record_step(trajectory: MultiviewTrajectory, t: int, omega: float, result: StepResult):
    trajectory.means[t] = result.mean
    trajectory.sigmas[t] = result.sigma
    trajectory.omegas[t] = omega
    trajectory.log_probs[t] = result.log_prob
    trajectory.sources[t] = result.source
    trajectory.latents[t - 1] = result.x_prev


def sample_trajectories(model: Denoiser, prompt: int, num_views: int, omega: float,
                        rng: np.random.Generator, seed: Optional[int] = None,
                        eta: float = 1.0) -> MultiviewTrajectory:
    """
    标准多视角采样：x_T^v ~ N(0, I)，t = T..1 逐步联合去噪

    Args:
        model: 噪声预测器
        prompt: prompt 编号
        num_views: 视角数 V（≥ 1）
        omega: 引导系数
        rng: 该轨迹独立的随机数生成器
        seed: 记录在轨迹中的种子

    Returns:
        MultiviewTrajectory: 标记为 standard 的轨迹
    """
    if num_views < 1:
        raise ContractError("视角数必须至少为 1")
    schedule = model.schedule
    dim = model.params.dim
    trajectory = empty_trajectory(prompt, num_views, schedule, dim, "standard", seed)
    trajectory.latents[schedule.steps] = rng.standard_normal((num_views, dim))

    for t in range(schedule.steps, 0, -1):
        result = denoise_step(model, trajectory.latents[t], t, prompt, omega, rng, eta)
        record_step(trajectory, t, omega, result)
    return trajectory


def replay_log_probs(model: Denoiser, trajectory: MultiviewTrajectory,
                     params: Optional[DenoiserParams] = None) -> np.ndarray:
    """用给定参数重放轨迹的逐步对数似然，返回 [T+1, V]（不参与的步为 nan）"""
    out = np.full_like(trajectory.log_probs, np.nan)
    for t in trajectory.likelihood_steps():
        out[t] = step_log_prob(model, trajectory.latents[t - 1], trajectory.sources[t], t,
                               trajectory.prompt, trajectory.omegas[t], params=params,
                               sigma=trajectory.sigmas[t])
    return out


# ==================== 预训练 ====================

def _pretrain_batch(model: Denoiser, scenes: Sequence, batch: int, rng: np.random.Generator,
                    dropout: float):
    """采样一批 (场景, t, 噪声) 三元组，返回网络输入与回归目标"""
    from core.scene import scene_targets

    schedule = model.schedule
    params = model.params
    rows_x, rows_ctx, rows_p, rows_v, rows_t, rows_eps = [], [], [], [], [], []
    for _ in range(batch):
        scene = scenes[int(rng.integers(len(scenes)))]
        x0 = scene_targets(scene)[:params.num_views]
        count = x0.shape[0]
        t = int(rng.integers(1, schedule.steps + 1))
        eps = rng.standard_normal(x0.shape)
        abar = schedule.alphabar[t]
        x_t = math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps

        prompt_onehot = np.zeros((count, params.num_prompts))
        view_onehot = np.zeros((count, params.num_views))
        if rng.random() >= dropout:
            prompt_onehot[:, scene.prompt_id] = 1.0
            view_onehot[np.arange(count), np.arange(count)] = 1.0
        time_onehot = np.zeros((count, schedule.steps))
        time_onehot[:, t - 1] = 1.0

        rows_x.append(x_t)
        rows_ctx.append(np.repeat(np.mean(x_t, axis=0, keepdims=True), count, axis=0))
        rows_p.append(prompt_onehot)
        rows_v.append(view_onehot)
        rows_t.append(time_onehot)
        rows_eps.append(eps)

    return tuple(np.concatenate(rows) for rows in (rows_x, rows_ctx, rows_p, rows_v, rows_t, rows_eps))


def pretraining_loss(model: Denoiser, scenes: Sequence, batch: int, rng: np.random.Generator,
                     dropout: float = 0.1, trainable: bool = False):
    """ε 预测的均方误差；trainable=True 时同时返回计算图以便求梯度"""
    x, ctx, p, v, t, eps = _pretrain_batch(model, scenes, batch, rng, dropout)
    graph = ComputeGraph()
    nodes = model.bind(graph, trainable=trainable)
    pred = model.network(graph, nodes, x, ctx, p, v, t)
    loss = graph.scale(graph.squared_error(pred, graph.constant(eps)), 1.0 / eps.size)
    graph.set_output(loss)
    return float(loss.value), graph


def pretrain(model: Denoiser, scenes: Sequence, steps: int, rng: np.random.Generator,
             learning_rate: float = 3e-3, batch: int = 16, dropout: float = 0.1,
             weight_decay: float = 0.0, log_every: int = 500) -> DenoiserParams:
    """
    预训练去噪网络：最小化一致多视角投影上的 ε 预测误差，
    以 dropout 概率把 prompt 与视角嵌入一起置零以训练无条件分支

    Args:
        model: 噪声预测器（参数原地更新）
        scenes: 按 prompt 编号排列的场景列表
        steps: 优化步数（≥ 1）
        rng: 随机数生成器
        learning_rate: 学习率
        batch: 每步场景数
        dropout: 条件丢弃概率

    Returns:
        DenoiserParams: 更新后的参数
    """
    from core.optimizer import AdamW

    if steps < 1:
        raise ContractError("预训练步数必须至少为 1")

    optimizer = AdamW(learning_rate=learning_rate, weight_decay=weight_decay)
    running = None
    for step in range(1, steps + 1):
        value, graph = pretraining_loss(model, scenes, batch, rng, dropout, trainable=True)
        grads = backward(graph)
        optimizer.step(model.params.arrays, grads)

        running = value if running is None else 0.98 * running + 0.02 * value
        if log_every and step % log_every == 0:
            logger.info(f"预训练 step {step}/{steps}: loss={running:.5f}")

    return model.params
