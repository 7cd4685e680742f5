# -*- coding: utf-8 -*-
"""
玩具场景环境模块
每个 prompt 对应一个植入的场景：基准潜变量 y、均匀分布的视角角度、
每个视角一个范数为 γ 的干扰偏移。单视角奖励偏好带偏移的目标，
联合奖励偏好视角间一致，两者之间天然存在取舍。
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DomainError, LookupFailure
from core.logger import get_logger

logger = get_logger("scene")


@dataclass(frozen=True)
class SceneSpec:
    """植入场景"""

    prompt_id: int
    base: np.ndarray
    angles: np.ndarray
    offsets: np.ndarray

    @property
    def num_views(self) -> int:
        return self.angles.shape[0]

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    @property
    def gamma(self) -> float:
        return float(np.linalg.norm(self.offsets[0]))


def rotation(theta: float, dim: int) -> np.ndarray:
    """前两个坐标平面内的旋转矩阵，其余坐标不变"""
    if dim < 2:
        raise DomainError(f"旋转至少需要 2 维，得到 {dim}")
    matrix = np.eye(dim)
    c, s = math.cos(theta), math.sin(theta)
    matrix[0, 0], matrix[0, 1] = c, -s
    matrix[1, 0], matrix[1, 1] = s, c
    return matrix


def make_scene(prompt_id: int, num_views: int, seed: int, dim: int = 2, gamma: float = 0.5) -> SceneSpec:
    """
    生成场景（由 (prompt_id, seed) 确定）

    Args:
        prompt_id: prompt 编号
        num_views: 视角数 V（≥ 1）
        seed: 场景种子
        dim: 潜变量维度 d（≥ 2）
        gamma: 干扰偏移范数

    Returns:
        SceneSpec: 场景
    """
    if num_views < 1:
        raise ContractError("视角数必须至少为 1")
    if dim < 2:
        raise DomainError(f"场景维度至少为 2，得到 {dim}")
    rng = np.random.default_rng([seed, prompt_id])
    base = rng.uniform(-1.0, 1.0, dim)
    angles = 2.0 * math.pi * np.arange(num_views) / num_views
    directions = rng.standard_normal((num_views, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    offsets = gamma * directions / norms
    return SceneSpec(prompt_id=prompt_id, base=base, angles=angles, offsets=offsets)


def make_scenes(num_prompts: int, num_views: int, seed: int, dim: int = 2,
                gamma: float = 0.5) -> List[SceneSpec]:
    return [make_scene(p, num_views, seed, dim, gamma) for p in range(num_prompts)]


def _check_view(scene: SceneSpec, v: int):
    if not 1 <= v <= scene.num_views:
        raise LookupFailure(f"视角编号 {v} 不在 [1, {scene.num_views}] 内")


def target_view(scene: SceneSpec, v: int) -> np.ndarray:
    """第 v 个视角（从 1 开始）的一致投影 Rot(θ_v)·y"""
    _check_view(scene, v)
    return rotation(scene.angles[v - 1], scene.dim) @ scene.base


def scene_targets(scene: SceneSpec) -> np.ndarray:
    """所有视角的一致投影 [V, d]，作为预训练目标"""
    return np.stack([target_view(scene, v) for v in range(1, scene.num_views + 1)])


def back_rotate(x0: np.ndarray, scene: SceneSpec) -> np.ndarray:
    """u_v = Rot(−θ_v)·x0_v"""
    x0 = np.asarray(x0, dtype=np.float64)
    return np.stack([rotation(-scene.angles[v], scene.dim) @ x0[v] for v in range(x0.shape[0])])


def single_view_reward(x0_v: np.ndarray, scene: SceneSpec, v: int) -> float:
    """R(x0_v) = −||x0_v − (target_v + δ_v)||²"""
    goal = target_view(scene, v) + scene.offsets[v - 1]
    diff = np.asarray(x0_v, dtype=np.float64) - goal
    return -float(diff @ diff)


def single_view_rewards(x0: np.ndarray, scene: SceneSpec) -> np.ndarray:
    return np.array([single_view_reward(x0[v - 1], scene, v) for v in range(1, x0.shape[0] + 1)])


def joint_view_reward(x0: np.ndarray, scene: SceneSpec) -> float:
    """R_mv = −(1/V)·Σ_v ||u_v − ū||²，u_v 为反旋转后的视角"""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] != scene.num_views:
        raise ContractError(f"需要 {scene.num_views} 个视角，得到 {x0.shape[0]}")
    u = back_rotate(x0, scene)
    centered = u - np.mean(u, axis=0)
    return -float(np.sum(centered * centered)) / scene.num_views


def reward_gradients(x0: np.ndarray, scene: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    两种奖励对 x0 的解析梯度

    Returns:
        Tuple[np.ndarray, np.ndarray]: (∂ΣR/∂x0, ∂R_mv/∂x0)，均为 [V, d]
    """
    x0 = np.asarray(x0, dtype=np.float64)
    goals = scene_targets(scene) + scene.offsets
    single = -2.0 * (x0 - goals)

    u = back_rotate(x0, scene)
    du = -2.0 / scene.num_views * (u - np.mean(u, axis=0))
    joint = np.stack([rotation(scene.angles[v], scene.dim) @ du[v] for v in range(x0.shape[0])])
    return single, joint


# ==================== 约束最优解 ====================

@dataclass
class ConstrainedOptimum:
    """拉格朗日取舍的最优解（视角坐标 u 与图像坐标 x0）"""

    sum_single: float
    joint: float
    points: np.ndarray
    view_points: np.ndarray


def _anchors(scene: SceneSpec) -> np.ndarray:
    """a_v = y + Rot(−θ_v)·δ_v"""
    return np.stack([scene.base + rotation(-scene.angles[v], scene.dim) @ scene.offsets[v]
                     for v in range(scene.num_views)])


def _objective_terms(u: np.ndarray, anchors: np.ndarray) -> Tuple[float, float]:
    diff = u - anchors
    centered = u - np.mean(u, axis=0)
    return -float(np.sum(diff * diff)), -float(np.sum(centered * centered)) / u.shape[0]


def _optimum_from_u(scene: SceneSpec, u: np.ndarray) -> ConstrainedOptimum:
    sum_single, joint = _objective_terms(u, _anchors(scene))
    points = np.stack([rotation(scene.angles[v], scene.dim) @ u[v] for v in range(scene.num_views)])
    return ConstrainedOptimum(sum_single=sum_single, joint=joint, points=points, view_points=u)


def constrained_optimum_oracle(scene: SceneSpec, lam: float) -> ConstrainedOptimum:
    """
    max_u Σ_v −||u_v − a_v||² + λ·(−(1/V)·Σ_v||u_v − ū||²) 的闭式解

    驻点条件给出 u_v = (V·a_v + λ·ā)/(V + λ)

    Args:
        scene: 场景
        lam: 拉格朗日乘子 λ（≥ 0）

    Returns:
        ConstrainedOptimum: 最优的 ΣR、R_mv 与对应点
    """
    if lam < 0:
        raise DomainError(f"λ 不能为负: {lam}")
    anchors = _anchors(scene)
    count = scene.num_views
    u = (count * anchors + lam * np.mean(anchors, axis=0)) / (count + lam)
    return _optimum_from_u(scene, u)


def grid_search_optimum(scene: SceneSpec, lam: float, resolution: float = 0.01,
                        margin: float = 0.1) -> ConstrainedOptimum:
    """
    网格搜索求约束最优（逐坐标独立，每个坐标在 V 维格点上穷举）

    目标函数在各坐标之间可分离，因此分别对每个坐标做 V 维网格搜索；
    格点数随 V 指数增长，只适合 V ≤ 3 的校验用途。
    """
    if lam < 0:
        raise DomainError(f"λ 不能为负: {lam}")
    anchors = _anchors(scene)
    count, dim = anchors.shape
    if count > 3:
        raise ContractError(f"网格搜索只支持 V ≤ 3，得到 {count}")

    u = np.zeros_like(anchors)
    for k in range(dim):
        low = anchors[:, k].min() - margin
        high = anchors[:, k].max() + margin
        axis = np.arange(math.floor(low / resolution), math.ceil(high / resolution) + 1) * resolution
        mesh = np.stack(np.meshgrid(*([axis] * count), indexing="ij"), axis=-1).reshape(-1, count)
        fit = -np.sum((mesh - anchors[:, k]) ** 2, axis=1)
        spread = -np.sum((mesh - mesh.mean(axis=1, keepdims=True)) ** 2, axis=1) / count
        u[:, k] = mesh[int(np.argmax(fit + lam * spread))]
    return _optimum_from_u(scene, u)


def ascent_optimum(scene: SceneSpec, lam: float, steps: int = 2000,
                   learning_rate: float = 0.05) -> ConstrainedOptimum:
    """在图像坐标上用 reward_gradients 做梯度上升求约束最优"""
    if lam < 0:
        raise DomainError(f"λ 不能为负: {lam}")
    x0 = scene_targets(scene) + scene.offsets
    for _ in range(steps):
        single, joint = reward_gradients(x0, scene)
        x0 = x0 + learning_rate * (single + lam * joint)
    return _optimum_from_u(scene, back_rotate(x0, scene))


# ==================== 场景转储 ====================

def _format_vector(values: Sequence[float]) -> str:
    return " ".join(repr(float(x)) for x in values)


def dump_scenes(scenes: Sequence[SceneSpec], path: Union[str, Path]) -> Path:
    """
    把场景写为文本记录，每个场景一行：
    prompt_id<TAB>y<TAB>angles<TAB>offsets（向量内用空格分隔，偏移按行优先展开）
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# prompt_id\tbase\tangles\toffsets\n")
        for scene in scenes:
            f.write("\t".join([str(scene.prompt_id), _format_vector(scene.base),
                               _format_vector(scene.angles), _format_vector(scene.offsets.ravel())]))
            f.write("\n")
    logger.info(f"已写出 {len(scenes)} 个场景: {path}")
    return path


def load_scenes(path: Union[str, Path]) -> List[SceneSpec]:
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ContractError(f"场景文件第 {line_no} 行字段数为 {len(fields)}，需要 4")
            base = np.array([float(x) for x in fields[1].split()])
            angles = np.array([float(x) for x in fields[2].split()])
            offsets = np.array([float(x) for x in fields[3].split()]).reshape(len(angles), len(base))
            scenes.append(SceneSpec(prompt_id=int(fields[0]), base=base, angles=angles, offsets=offsets))
    return scenes


def scene_summary(scene: SceneSpec) -> Dict:
    return {"prompt_id": scene.prompt_id, "views": scene.num_views,
            "gamma": scene.gamma, "base": [float(x) for x in scene.base]}
