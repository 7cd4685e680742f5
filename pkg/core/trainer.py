# -*- coding: utf-8 -*-
"""
训练模块
完整的训练循环：成对采样、奖励归一化、约束控制、优势计算、快照 θ'、
内层优化与梯度裁剪、检查点与续训，以及固定种子评估
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.checkpoint import TrainingState, load_checkpoint, save_checkpoint
from core.config import TrainConfig, config_hash
from core.controller import ConstraintController, batch_avg_joint_reward
from core.diffusion import (
    Denoiser,
    DenoiserParams,
    MultiviewTrajectory,
    build_noise_schedule,
    pretrain,
    pretraining_loss,
    sample_trajectories,
)
from core.errors import CheckpointError, ConfigError, TrainingError
from core.exporter import (
    DataExporter,
    EpochMetrics,
    EvaluationReport,
    GapPoint,
    ModeSummary,
    emit_gap_curve,
    emit_metrics_csv,
)
from core.logger import get_logger
from core.method_system import MethodBase, get_method
from core.normalizer import RunningNormalizer, normalize_rewards
from core.objectives import LossResult, RewardRecord, TrajectoryPair, accumulate, attach_reference
from core.optimizer import AdamW, clip_grad_norm, global_norm
from core.performance import performance_monitor
from core.scene import SceneSpec, joint_view_reward, make_scenes, single_view_rewards
from core.zigzag import zmv_sample

logger = get_logger("trainer")

SEED_SPACE = 2 ** 31


def score_trajectory(trajectory: MultiviewTrajectory, scene: SceneSpec, tag: str) -> RewardRecord:
    """对轨迹终点 x0 计算单视角与联合奖励"""
    x0 = trajectory.x0
    return RewardRecord(single=single_view_rewards(x0, scene), joint=joint_view_reward(x0, scene), tag=tag)


# ==================== 预训练 ====================

def pretrain_baseline(config: TrainConfig, log_every: int = 500) -> TrainingState:
    """
    从随机初始化预训练去噪网络，得到微调的起点

    Args:
        config: 实验配置
        log_every: 日志间隔（步）

    Returns:
        TrainingState: epoch 0 的训练状态
    """
    schedule = build_noise_schedule(config.steps)
    params = DenoiserParams.initialize(config.model, config.views, config.steps)
    model = Denoiser(params, schedule)
    scenes = make_scenes(config.model.num_prompts, config.views, config.scene_seed,
                         config.model.dim, config.model.gamma)
    rng = np.random.default_rng([config.seed, 0])

    held_out = np.random.default_rng([config.seed, 1])
    before, _ = pretraining_loss(model, scenes, config.pretrain_batch * 4, held_out, config.cond_dropout)
    logger.info(f"开始预训练: {config.pretrain_steps} 步, batch={config.pretrain_batch}, "
                f"lr={config.pretrain_lr}, 初始 loss={before:.5f}")

    with performance_monitor.phase("pretrain"):
        pretrain(model, scenes, config.pretrain_steps, rng, config.pretrain_lr, config.pretrain_batch,
                 config.cond_dropout, log_every=log_every)

    held_out = np.random.default_rng([config.seed, 1])
    after, _ = pretraining_loss(model, scenes, config.pretrain_batch * 4, held_out, config.cond_dropout)
    logger.info(f"预训练完成: held-out loss {before:.5f} -> {after:.5f}")
    return TrainingState(params=model.params, schedule=schedule, epoch=0, config_hash=config_hash(config))


# ==================== 训练器 ====================

CONFIG_KEYS = {"steps": "steps", "num_views": "views", "dim": "model.dim", "num_prompts": "model.num_prompts"}


def check_compatible(config: TrainConfig, params: DenoiserParams):
    """检查点参数的结构必须与配置一致"""
    expected = {"steps": config.steps, "num_views": config.views, "dim": config.model.dim,
                "num_prompts": config.model.num_prompts}
    for attribute, value in expected.items():
        if getattr(params, attribute) != value:
            raise ConfigError(f"检查点中的 {attribute}={getattr(params, attribute)} 与配置值 {value} 不一致",
                              key=CONFIG_KEYS[attribute])


@dataclass
class EpochBatch:
    """一个 epoch 内采样并评分的全部轨迹对"""

    pairs: List[TrajectoryPair]
    records: List[RewardRecord] = field(default_factory=list)


class Trainer:
    """微调训练器"""

    def __init__(self, config: TrainConfig, state: TrainingState):
        """
        初始化训练器

        Args:
            config: 实验配置
            state: 起始训练状态（预训练检查点或续训检查点）
        """
        self.config = config
        self.hash = config_hash(config)
        check_compatible(config, state.params)

        self.schedule = state.schedule
        self.model = Denoiser(state.params, state.schedule)
        self.method: MethodBase = get_method(config.method, config.objective)
        # MV-DPO 的参考模型：冻结的预训练参数
        self.reference = state.reference if state.reference is not None else state.params.copy()

        self.optimizer = AdamW(config.learning_rate, tuple(config.adam_betas), config.adam_eps,
                               config.weight_decay)
        self.optimizer.load_state_dict(state.optimizer)
        self.controller = ConstraintController(config.controller)
        self.controller.load_state_dict(state.controller)
        self.normalizer = RunningNormalizer(config.normalization_decay, config.normalization_eps,
                                            config.normalization)
        self.normalizer.load_state_dict(state.normalizer)

        self.scenes = make_scenes(config.model.num_prompts, config.views, config.scene_seed,
                                  config.model.dim, config.model.gamma)
        self.epoch = state.epoch

    # ---------- 状态 ----------

    def state(self) -> TrainingState:
        return TrainingState(
            params=self.model.params,
            schedule=self.schedule,
            epoch=self.epoch,
            config_hash=self.hash,
            reference=self.reference,
            optimizer=self.optimizer.state_dict(),
            controller=self.controller.state_dict(),
            normalizer=self.normalizer.state_dict(),
        )

    # ---------- 采样与评分 ----------

    def sample_pair(self, prompt: int, seed: int, partner_seed: int, index: int) -> TrajectoryPair:
        """
        为一个 prompt 生成轨迹对

        之字形方法的两条轨迹共用同一种子（共同随机数），标准配对方法使用两个独立种子
        """
        config = self.config
        standard = sample_trajectories(self.model, prompt, config.views, config.guidance.omega_high,
                                       np.random.default_rng(seed), seed=seed)
        if self.method.pairing == "zigzag":
            partner = zmv_sample(self.model, prompt, config.views, config.zigzag, config.guidance,
                                 np.random.default_rng(seed), seed=seed)
        else:
            partner = sample_trajectories(self.model, prompt, config.views, config.guidance.omega_high,
                                          np.random.default_rng(partner_seed), seed=partner_seed)
        return TrajectoryPair(standard, partner, index=index)

    def collect(self, rng: np.random.Generator) -> EpochBatch:
        """采样 batches_per_epoch × B 个轨迹对并计算原始奖励"""
        config = self.config
        count = config.batch_size * config.batches_per_epoch
        prompts = rng.integers(config.model.num_prompts, size=count)
        seeds = rng.integers(SEED_SPACE, size=count)
        partner_seeds = rng.integers(SEED_SPACE, size=count)

        batch = EpochBatch(pairs=[])
        with performance_monitor.phase("sampling"):
            for i in range(count):
                batch.pairs.append(self.sample_pair(int(prompts[i]), int(seeds[i]), int(partner_seeds[i]), i))
        with performance_monitor.phase("scoring"):
            partner_tag = "z" if self.method.pairing == "zigzag" else "b"
            for pair in batch.pairs:
                scene = self.scenes[pair.prompt]
                pair.standard_reward = score_trajectory(pair.standard, scene, "s")
                pair.partner_reward = score_trajectory(pair.partner, scene, partner_tag)
                batch.records.extend([pair.standard_reward, pair.partner_reward])
        return batch

    # ---------- 优化 ----------

    def optimize(self, pairs: Sequence[TrajectoryPair]) -> Tuple[Optional[float], float, int]:
        """
        在一个批上计算损失并执行一次带梯度裁剪的优化步

        Returns:
            Tuple[Optional[float], float, int]: (批损失, 裁剪后的全局梯度范数, 是否触发裁剪)
        """
        results: List[LossResult] = []
        for pair in pairs:
            try:
                result = self.method.loss(self.model, pair)
            except TrainingError:
                performance_monitor.record_error()
                logger.error(f"epoch {self.epoch + 1} 中止: 轨迹对 #{pair.index} (prompt {pair.prompt})",
                             exc_info=True)
                raise
            if result is not None:
                results.append(result)
        if not results:
            return None, 0.0, 0

        batch = accumulate(results)
        clipped, raw_norm = clip_grad_norm(batch.grads, self.config.max_grad_norm)
        self.optimizer.step(self.model.params.arrays, clipped)
        if not self.model.params.is_finite():
            raise TrainingError(f"epoch {self.epoch + 1} 更新后参数出现非有限值")
        return batch.value, global_norm(clipped), int(raw_norm > self.config.max_grad_norm)

    def run_epoch(self) -> EpochMetrics:
        """
        运行一个 epoch，返回该 epoch 的指标行

        Returns:
            EpochMetrics: 指标
        """
        config = self.config
        epoch = self.epoch + 1
        rng = np.random.default_rng([config.seed, epoch])

        batch = self.collect(rng)
        normalize_rewards(batch.records, self.normalizer)

        control: Dict = {}
        if self.method.uses_controller:
            control = self.controller.step(batch_avg_joint_reward(batch.pairs))
        self.method.prepare(batch.pairs, control.get("lambda", 0.0))

        # 快照 θ'，对数比的参考在本 epoch 内固定
        if self.method.reference != "none":
            snapshot = self.model.params.copy()
            reference = self.reference if self.method.reference == "pretrained" else snapshot
            for pair in batch.pairs:
                attach_reference(self.model, pair, reference)

        losses, norms, clipped = [], [], 0
        with performance_monitor.phase("optimization"):
            for _ in range(config.inner_epochs):
                for start in range(0, len(batch.pairs), config.batch_size):
                    loss, norm, was_clipped = self.optimize(batch.pairs[start:start + config.batch_size])
                    if loss is not None:
                        losses.append(loss)
                        norms.append(norm)
                        clipped += was_clipped
        if clipped:
            logger.warning(f"epoch {epoch}: {clipped} 次优化步的梯度范数超过 {config.max_grad_norm} 并被裁剪")

        self.epoch = epoch
        metrics = self._metrics(epoch, batch, control, losses, norms)
        logger.info(f"epoch {epoch}/{config.epochs} [{config.method}] R={metrics.mean_R_single_raw:.4f} "
                    f"R_mv={metrics.mean_R_mv_raw:.4f} loss={metrics.loss} λ={metrics.lam} τ={metrics.tau}")
        return metrics

    def _metrics(self, epoch: int, batch: EpochBatch, control: Dict, losses: List[float],
                 norms: List[float]) -> EpochMetrics:
        records = batch.records
        gap = None
        if self.method.pairing == "zigzag":
            gap = float(np.mean([p.partner_reward.joint for p in batch.pairs])
                        - np.mean([p.standard_reward.joint for p in batch.pairs]))
        wall_ms = 0.0
        if self.config.record_wall_time:
            wall_ms = performance_monitor.last_ms("sampling", "scoring", "optimization")
        return EpochMetrics(
            epoch=epoch,
            method=self.config.method,
            mean_R_single_raw=float(np.mean(np.concatenate([r.single for r in records]))),
            mean_R_mv_raw=float(np.mean([r.joint for r in records])),
            mean_R_single_norm=float(np.mean(np.concatenate([r.single_norm for r in records]))),
            mean_R_mv_norm=float(np.mean([r.joint_norm for r in records])),
            lam=control.get("lambda"),
            tau=control.get("tau"),
            violated=control.get("violated"),
            loss=float(np.mean(losses)) if losses else None,
            grad_norm=max(norms) if norms else None,
            zigzag_gap=gap,
            wall_ms=wall_ms,
            config_hash=self.hash,
        )


# ==================== 评估 ====================

def evaluate(model: Denoiser, config: TrainConfig, prompts: Optional[Sequence[int]] = None,
             modes: Sequence[str] = ("standard", "zigzag"), checkpoint: str = "",
             epoch: int = 0) -> EvaluationReport:
    """
    固定种子评估：每个 prompt、每种模式各生成一次（同一 prompt 的两种模式共用种子）

    Args:
        model: 噪声预测器
        config: 实验配置
        prompts: prompt 编号，默认 0..num_eval_prompts-1
        modes: standard / zigzag 的子集
        checkpoint: 记录在报告中的检查点路径
        epoch: 记录在报告中的 epoch

    Returns:
        EvaluationReport: 各模式平均奖励与之字形差距
    """
    if prompts is None:
        prompts = list(range(min(config.num_eval_prompts, config.model.num_prompts)))
    unknown = [m for m in modes if m not in ("standard", "zigzag")]
    if unknown:
        raise ConfigError(f"未知的评估模式: {unknown}", key="modes")

    scenes = make_scenes(config.model.num_prompts, config.views, config.scene_seed,
                         config.model.dim, config.model.gamma)
    summaries: Dict[str, ModeSummary] = {}
    for mode in modes:
        singles, joints = [], []
        for i, prompt in enumerate(prompts):
            seed = config.eval_seed + i
            rng = np.random.default_rng(seed)
            if mode == "standard":
                trajectory = sample_trajectories(model, prompt, config.views, config.guidance.omega_high,
                                                 rng, seed=seed)
            else:
                trajectory = zmv_sample(model, prompt, config.views, config.zigzag, config.guidance, rng,
                                        seed=seed)
            record = score_trajectory(trajectory, scenes[prompt], mode)
            singles.append(float(np.mean(record.single)))
            joints.append(record.joint)
        summaries[mode] = ModeSummary(mean_single=float(np.mean(singles)), mean_joint=float(np.mean(joints)))

    gap = None
    if "standard" in summaries and "zigzag" in summaries:
        gap = summaries["zigzag"].mean_joint - summaries["standard"].mean_joint
    return EvaluationReport(
        checkpoint=checkpoint,
        epoch=epoch,
        config_hash=config_hash(config),
        prompts=[int(p) for p in prompts],
        views=config.views,
        steps=config.steps,
        eval_seed=config.eval_seed,
        zigzag_steps=config.zigzag.active_steps(config.steps),
        modes=summaries,
        zigzag_gap=gap,
    )


def gap_point(report: EvaluationReport, epoch: int, hash_value: str) -> GapPoint:
    standard, zigzag = report.modes["standard"], report.modes["zigzag"]
    return GapPoint(epoch=epoch, mean_R_single_standard=standard.mean_single,
                    mean_R_mv_standard=standard.mean_joint, mean_R_single_zigzag=zigzag.mean_single,
                    mean_R_mv_zigzag=zigzag.mean_joint, zigzag_gap=report.zigzag_gap, config_hash=hash_value)


# ==================== 微调 ====================

@dataclass
class FinetuneResult:
    """微调输出"""

    state: TrainingState
    metrics: List[EpochMetrics]
    checkpoints: List[Path]
    metrics_path: Path
    gap_curve: List[GapPoint] = field(default_factory=list)
    resumed_from: Optional[int] = None


def latest_checkpoint_path(out_dir: Union[str, Path]) -> Path:
    return Path(out_dir) / "checkpoints" / "latest.json"


def _load_start_state(config: TrainConfig, exporter: DataExporter, resume: bool) -> Tuple[TrainingState, bool]:
    latest = latest_checkpoint_path(exporter.out_dir)
    if resume and latest.exists():
        state = load_checkpoint(latest)
        if state.config_hash == config_hash(config):
            logger.info(f"从 {latest} 续训 (epoch {state.epoch})")
            return state, True
        logger.warning(f"{latest} 的配置哈希 {state.config_hash} 与当前配置不一致，忽略续训")
    if not config.checkpoint:
        raise CheckpointError("未指定预训练检查点（checkpoint）")
    return load_checkpoint(config.checkpoint), False


def finetune(config: TrainConfig, out_dir: Union[str, Path], resume: bool = True,
             stop_after: Optional[int] = None) -> FinetuneResult:
    """
    运行 K 个 epoch 的微调

    Args:
        config: 实验配置（config.checkpoint 为预训练检查点）
        out_dir: 运行目录，写入 metrics.csv、gap_curve.csv 与 checkpoints/
        resume: 运行目录中存在同一配置的 latest 检查点时从其续训
        stop_after: 只运行到该 epoch（模拟中断，用于续训校验）

    Returns:
        FinetuneResult: 最终状态、本次写出的指标行与检查点
    """
    exporter = DataExporter(out_dir)
    state, resumed = _load_start_state(config, exporter, resume)
    trainer = Trainer(config, state)
    hash_value = trainer.hash

    if resumed:
        exporter.truncate_after(state.epoch)
    else:
        emit_metrics_csv([], exporter.metrics_path)
        if exporter.gap_curve_path.exists():
            exporter.gap_curve_path.unlink()

    checkpoints: List[Path] = []
    rows: List[EpochMetrics] = []
    gap_curve: List[GapPoint] = []

    if config.epochs == 0:
        logger.info("epochs = 0，直接返回输入检查点")
        return FinetuneResult(state=state, metrics=rows, checkpoints=checkpoints,
                              metrics_path=exporter.metrics_path)

    def record_gap(epoch: int):
        report = evaluate(trainer.model, config, epoch=epoch)
        point = gap_point(report, epoch, hash_value)
        emit_gap_curve([point], exporter.gap_curve_path, append=True)
        gap_curve.append(point)
        logger.info(f"epoch {epoch} 评估: 之字形差距 {point.zigzag_gap:.5f}")

    if config.eval_every and trainer.epoch == 0:
        record_gap(0)

    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    while trainer.epoch < last:
        row = trainer.run_epoch()
        emit_metrics_csv([row], exporter.metrics_path, append=True)
        rows.append(row)

        epoch = trainer.epoch
        if config.eval_every and epoch % config.eval_every == 0:
            record_gap(epoch)
        if (config.checkpoint_every and epoch % config.checkpoint_every == 0) or epoch == config.epochs:
            checkpoints.append(_write_checkpoint(trainer, exporter))

    if stop_after is not None and (not checkpoints or trainer.epoch != _epoch_of(checkpoints[-1])):
        checkpoints.append(_write_checkpoint(trainer, exporter))

    return FinetuneResult(state=trainer.state(), metrics=rows, checkpoints=checkpoints,
                          metrics_path=exporter.metrics_path, gap_curve=gap_curve,
                          resumed_from=state.epoch if resumed else None)


def _epoch_of(path: Path) -> int:
    return int(path.stem.split("_")[-1])


def _write_checkpoint(trainer: Trainer, exporter: DataExporter) -> Path:
    state = trainer.state()
    path = save_checkpoint(exporter.checkpoint_dir / f"epoch_{trainer.epoch:04d}.json", state)
    save_checkpoint(latest_checkpoint_path(exporter.out_dir), state)
    return path
