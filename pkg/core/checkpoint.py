# -*- coding: utf-8 -*-
"""
检查点模块
自描述的 JSON 容器：数组名 -> {shape, data}（行优先 float64），
外加噪声调度常量、格式版本以及续训所需的训练状态
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from core.diffusion import DenoiserParams, NoiseSchedule, build_noise_schedule
from core.errors import CheckpointError
from core.logger import get_logger

logger = get_logger("checkpoint")

FORMAT_VERSION = 1


def encode_arrays(arrays: Dict[str, np.ndarray]) -> Dict[str, Dict]:
    """数组字典 -> 可 JSON 序列化的 {shape, data} 字典（浮点用最短可逆十进制）"""
    encoded = {}
    for name in sorted(arrays):
        array = np.asarray(arrays[name], dtype=np.float64)
        encoded[name] = {"shape": list(array.shape), "data": [float(x) for x in array.ravel()]}
    return encoded


def decode_arrays(encoded: Dict[str, Dict]) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, record in encoded.items():
        try:
            shape = tuple(int(s) for s in record["shape"])
            data = np.array(record["data"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"数组 {name} 记录损坏: {e}") from e
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"数组 {name} 数据长度 {data.size} 与形状 {shape} 不一致")
        arrays[name] = data.reshape(shape)
    return arrays


@dataclass
class TrainingState:
    """一次训练运行在某个 epoch 边界上的完整状态"""

    params: DenoiserParams
    schedule: NoiseSchedule
    epoch: int = 0
    config_hash: str = ""
    reference: Optional[DenoiserParams] = None
    optimizer: Dict[str, Any] = field(default_factory=dict)
    controller: Dict[str, Any] = field(default_factory=dict)
    normalizer: Dict[str, Any] = field(default_factory=dict)


def _params_record(params: DenoiserParams) -> Dict:
    return {"meta": params.meta(), "arrays": encode_arrays(params.arrays)}


def _params_from_record(record: Dict) -> DenoiserParams:
    try:
        meta = record["meta"]
        arrays = decode_arrays(record["arrays"])
        missing = [name for name in DenoiserParams.NAMES if name not in arrays]
        if missing:
            raise CheckpointError(f"缺少参数数组: {missing}")
        return DenoiserParams(arrays=arrays, dim=int(meta["dim"]), steps=int(meta["steps"]),
                              num_prompts=int(meta["num_prompts"]), num_views=int(meta["num_views"]),
                              hidden=int(meta["hidden"]))
    except KeyError as e:
        raise CheckpointError(f"参数记录缺少字段: {e}") from e


def _encode_state_value(value):
    """优化器状态里的数组字典递归编码"""
    if isinstance(value, dict):
        if value and all(isinstance(v, np.ndarray) for v in value.values()):
            return {"__arrays__": encode_arrays(value)}
        return {k: _encode_state_value(v) for k, v in value.items()}
    return value


def _decode_state_value(value):
    if isinstance(value, dict):
        if "__arrays__" in value:
            return decode_arrays(value["__arrays__"])
        return {k: _decode_state_value(v) for k, v in value.items()}
    return value


def _check_finite(value, path: str):
    if isinstance(value, float) and not math.isfinite(value):
        raise CheckpointError(f"状态字段 {path} 非有限: {value}")
    if isinstance(value, dict):
        for k, v in value.items():
            _check_finite(v, f"{path}.{k}")


def state_to_dict(state: TrainingState) -> Dict:
    payload = {
        "format_version": FORMAT_VERSION,
        "schedule": state.schedule.to_dict(),
        "epoch": state.epoch,
        "config_hash": state.config_hash,
        "params": _params_record(state.params),
        "reference": _params_record(state.reference) if state.reference is not None else None,
        "optimizer": _encode_state_value(state.optimizer),
        "controller": dict(state.controller),
        "normalizer": dict(state.normalizer),
    }
    _check_finite(payload["controller"], "controller")
    _check_finite(payload["normalizer"], "normalizer")
    return payload


def state_from_dict(payload: Dict) -> TrainingState:
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"不支持的检查点格式版本: {version}（需要 {FORMAT_VERSION}）")
    try:
        schedule_record = payload["schedule"]
        schedule = build_noise_schedule(int(schedule_record["steps"]))
        stored = np.array(schedule_record["betas"], dtype=np.float64)
        if stored.shape != schedule.betas[1:].shape or not np.array_equal(stored, schedule.betas[1:]):
            raise CheckpointError("检查点中的噪声调度常量与当前实现不一致")
        params = _params_from_record(payload["params"])
        reference = payload.get("reference")
        return TrainingState(
            params=params,
            schedule=schedule,
            epoch=int(payload.get("epoch", 0)),
            config_hash=str(payload.get("config_hash", "")),
            reference=_params_from_record(reference) if reference else None,
            optimizer=_decode_state_value(payload.get("optimizer") or {}),
            controller=dict(payload.get("controller") or {}),
            normalizer=dict(payload.get("normalizer") or {}),
        )
    except KeyError as e:
        raise CheckpointError(f"检查点缺少字段: {e}") from e


def save_checkpoint(path: Union[str, Path], state: TrainingState) -> Path:
    """
    保存检查点（先写临时文件再替换，避免中断时留下半个文件）

    Args:
        path: 目标文件路径
        state: 训练状态

    Returns:
        Path: 写入的文件路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(state_to_dict(state), sort_keys=True, separators=(",", ":"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
        f.write("\n")
    tmp.replace(path)
    logger.info(f"检查点已保存: {path} (epoch {state.epoch})")
    return path


def load_checkpoint(path: Union[str, Path]) -> TrainingState:
    """
    加载检查点

    Args:
        path: 检查点文件路径

    Returns:
        TrainingState: 训练状态
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"检查点无法读取: {path}: {e}") from e
    state = state_from_dict(payload)
    logger.debug(f"已加载检查点: {path} (epoch {state.epoch})")
    return state
