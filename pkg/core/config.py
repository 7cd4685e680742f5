# -*- coding: utf-8 -*-
"""
配置管理模块
解析扁平的 `section.key = value` 配置文件，校验为 TrainConfig，并计算配置哈希
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.controller import ControllerConfig
from core.diffusion import MAX_STEPS, GuidanceConfig, ModelConfig
from core.errors import ConfigError
from core.logger import get_logger
from core.objectives import ObjectiveConfig
from core.zigzag import ZigzagSchedule

logger = get_logger("config")

OUT_DIR_ENV = "MVLAB_OUT_DIR"

MethodName = Literal["mv-pg", "mv-dpo", "mv-rdl", "mv-zigal", "zigal", "ws-zigal", "mvc-zigpg", "mvc-zigal"]


class TrainConfig(BaseModel):
    """完整的实验配置"""

    model_config = ConfigDict(extra="forbid")

    method: MethodName = "mvc-zigal"
    views: int = Field(4, ge=1)
    steps: int = Field(4, ge=2, le=MAX_STEPS)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(50, ge=0)
    inner_epochs: int = Field(1, ge=1)
    batches_per_epoch: int = Field(1, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    max_grad_norm: float = Field(5.0, gt=0.0)
    normalization: Literal["running", "batch"] = "running"
    normalization_decay: float = Field(0.95, ge=0.0, lt=1.0)
    normalization_eps: float = Field(1e-8, gt=0.0)
    seed: int = 42
    scene_seed: int = 0
    eval_seed: int = 1000
    num_eval_prompts: int = Field(16, ge=1)
    checkpoint_every: int = Field(10, ge=0)
    eval_every: int = Field(0, ge=0)
    pretrain_steps: int = Field(3000, ge=1)
    pretrain_batch: int = Field(16, ge=1)
    pretrain_lr: float = Field(3e-3, gt=0.0)
    cond_dropout: float = Field(0.1, ge=0.0, le=1.0)
    record_wall_time: bool = False
    checkpoint: Optional[str] = None

    model: ModelConfig = Field(default_factory=ModelConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    zigzag: ZigzagSchedule = Field(default_factory=ZigzagSchedule)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)

    @model_validator(mode="after")
    def _check_zigzag_steps(self):
        outside = [s for s in self.zigzag.steps if s > self.steps]
        if outside:
            raise ValueError(f"zigzag.steps 中的 {outside} 超出 [1, {self.steps}]")
        return self


# ==================== 解析 ====================

def parse_value(text: str) -> Any:
    """
    解析单个配置值：JSON 字面量 → 括号/逗号列表 → 字符串

    Args:
        text: 等号右侧的原始文本

    Returns:
        Any: 解析后的值
    """
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if text.startswith("(") and text.endswith(")"):
        inner = text[1:-1].strip()
        return [parse_value(part) for part in inner.split(",") if part.strip()] if inner else []
    if "," in text:
        return [parse_value(part) for part in text.split(",")]
    return text


def _assign(tree: Dict, key: str, value: Any, line_no: int):
    """点号分隔的键写入嵌套字典"""
    keys = key.split(".")
    node = tree
    for k in keys[:-1]:
        child = node.setdefault(k, {})
        if not isinstance(child, dict):
            raise ConfigError(f"第 {line_no} 行: {k} 已是标量，不能再作为分组", key=key)
        node = child
    if keys[-1] in node:
        raise ConfigError(f"第 {line_no} 行: 重复的键", key=key)
    node[keys[-1]] = value


def parse_config_text(text: str) -> Dict:
    """把配置文本解析为嵌套字典（尚未校验）"""
    tree: Dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"第 {line_no} 行缺少 '='")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"第 {line_no} 行键名无效", key=key or None)
        _assign(tree, key, parse_value(value), line_no)
    return tree


def _error_key(error: Dict) -> str:
    return ".".join(str(part) for part in error["loc"] if not isinstance(part, int)) or "<root>"


def validate_config(data: Dict) -> TrainConfig:
    """
    校验嵌套字典为 TrainConfig

    Raises:
        ConfigError: 未知键、类型不符或约束违反，携带键路径
    """
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = _error_key(first)
        if first["type"] == "extra_forbidden":
            raise ConfigError("未知的配置键", key=key) from e
        raise ConfigError(first["msg"], key=key) from e


def parse_config(path: Union[str, Path]) -> TrainConfig:
    """
    读取并严格校验配置文件

    Args:
        path: 配置文件路径

    Returns:
        TrainConfig: 填充默认值后的配置
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        config = validate_config(parse_config_text(f.read()))
    logger.info(f"已加载配置: {path} (method={config.method}, hash={config_hash(config)})")
    return config


def apply_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """用命令行覆盖项生成新配置（None 表示不覆盖）"""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    data = config.model_dump(mode="python")
    data.update(updates)
    return validate_config(data)


# ==================== 哈希与导出 ====================

def canonical_json(config: TrainConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: TrainConfig) -> str:
    """规范 JSON 的 SHA-256 前 12 位"""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def _flatten(prefix: str, value: Any, out: List[Tuple[str, Any]]):
    if isinstance(value, dict):
        for k in value:
            _flatten(f"{prefix}.{k}" if prefix else k, value[k], out)
    else:
        out.append((prefix, value))


def dump_config(config: TrainConfig) -> str:
    """导出为与输入相同的 key = value 文本（可被 parse_config 重新读取）"""
    pairs: List[Tuple[str, Any]] = []
    _flatten("", config.model_dump(mode="json"), pairs)
    lines = [f"{key} = {json.dumps(value)}" for key, value in pairs if value is not None]
    return "\n".join(lines) + "\n"


def default_out_dir(explicit: Optional[str] = None) -> Path:
    """--out-dir 优先，其次环境变量 MVLAB_OUT_DIR，最后 ./runs"""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUT_DIR_ENV, "./runs"))
