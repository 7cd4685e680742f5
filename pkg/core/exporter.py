# -*- coding: utf-8 -*-
"""
数据导出模块
指标 CSV 的写入与严格读取、之字形差距曲线、评估报告与运行清单
"""

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, Union

from pydantic import BaseModel, ConfigDict, Field

from core.errors import ContractError, MetricsFormatError
from core.logger import get_logger

logger = get_logger("export")

ARTIFACT_FORMAT_VERSION = 1

METRICS_COLUMNS = [
    "epoch", "method", "mean_R_single_raw", "mean_R_mv_raw", "mean_R_single_norm", "mean_R_mv_norm",
    "lambda", "tau", "violated", "loss", "grad_norm", "zigzag_gap", "wall_ms", "config_hash",
]

GAP_COLUMNS = ["epoch", "mean_R_single_standard", "mean_R_mv_standard", "mean_R_single_zigzag",
               "mean_R_mv_zigzag", "zigzag_gap", "config_hash"]


class EpochMetrics(BaseModel):
    """指标文件的一行"""

    model_config = ConfigDict(populate_by_name=True)

    epoch: int
    method: str
    mean_R_single_raw: float
    mean_R_mv_raw: float
    mean_R_single_norm: float
    mean_R_mv_norm: float
    lam: Optional[float] = Field(None, alias="lambda")
    tau: Optional[float] = None
    violated: Optional[bool] = None
    loss: Optional[float] = None
    grad_norm: Optional[float] = None
    zigzag_gap: Optional[float] = None
    wall_ms: float = 0.0
    config_hash: str = ""


class GapPoint(BaseModel):
    """差距曲线上的一个评估点"""

    epoch: int
    mean_R_single_standard: float
    mean_R_mv_standard: float
    mean_R_single_zigzag: float
    mean_R_mv_zigzag: float
    zigzag_gap: float
    config_hash: str = ""


class ModeSummary(BaseModel):
    mean_single: float
    mean_joint: float


class EvaluationReport(BaseModel):
    """固定种子评估报告"""

    checkpoint: str = ""
    epoch: int = 0
    config_hash: str = ""
    prompts: List[int]
    views: int
    steps: int
    eval_seed: int
    zigzag_steps: List[int]
    modes: Dict[str, ModeSummary]
    zigzag_gap: Optional[float] = None


class RunManifest(BaseModel):
    """一次运行产生的全部文件与环境"""

    format_version: int = ARTIFACT_FORMAT_VERSION
    command: str
    config: Dict[str, Any]
    config_hash: str
    seeds: List[int]
    checkpoints: List[str] = Field(default_factory=list)
    metrics: List[str] = Field(default_factory=list)
    extra_files: List[str] = Field(default_factory=list)
    started_at: str
    finished_at: str = ""
    host: Dict[str, Any] = Field(default_factory=dict)


# ==================== CSV 编解码 ====================

def format_cell(value: Any) -> str:
    """最短可逆十进制；None 写为空单元格"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(text: str, column: str, line: int):
    if text == "":
        return None
    try:
        if column == "epoch":
            return int(text)
        if column == "violated":
            if text not in ("true", "false"):
                raise ValueError(f"布尔值应为 true/false，得到 {text!r}")
            return text == "true"
        return float(text)
    except ValueError as e:
        raise MetricsFormatError(f"列 {column} 无法解析: {e}", line=line) from e


_STRING_COLUMNS = {"method", "config_hash"}


def _row_cells(row: BaseModel, columns: Sequence[str]) -> Dict[str, str]:
    data = row.model_dump(by_alias=True)
    return {column: format_cell(data[column]) for column in columns}


def emit_csv(rows: Sequence[BaseModel], path: Union[str, Path], columns: Sequence[str],
             append: bool = False) -> Path:
    """
    写出 CSV（append=True 且文件已存在时只追加数据行）

    Args:
        rows: 行模型
        path: 文件路径
        columns: 列名（即表头）
        append: 是否追加

    Returns:
        Path: 文件路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not (append and path.exists())
    with open(path, "a" if append else "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        if write_header:
            writer.writeheader()
        for row in rows:
            writer.writerow(_row_cells(row, columns))
    return path


def read_csv(path: Union[str, Path], columns: Sequence[str], model: Type[BaseModel]) -> List[BaseModel]:
    """
    严格读取 CSV：表头必须完全一致，每行列数一致，数值可解析

    Raises:
        MetricsFormatError: 携带出错的行号（表头为第 1 行）
    """
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(columns):
            raise MetricsFormatError(f"表头不匹配: {header}", line=1)
        for row_cells in reader:
            line = reader.line_num
            if not row_cells:
                continue
            if len(row_cells) != len(columns):
                raise MetricsFormatError(f"列数为 {len(row_cells)}，需要 {len(columns)}", line=line)
            values = {}
            for column, text in zip(columns, row_cells):
                values[column] = text if column in _STRING_COLUMNS else _parse_cell(text, column, line)
            try:
                rows.append(model.model_validate(values))
            except ValueError as e:
                raise MetricsFormatError(f"数据无效: {e}", line=line) from e
    return rows


def emit_metrics_csv(rows: Sequence[EpochMetrics], path: Union[str, Path], append: bool = False) -> Path:
    return emit_csv(rows, path, METRICS_COLUMNS, append)


def read_metrics_csv(path: Union[str, Path]) -> List[EpochMetrics]:
    return read_csv(path, METRICS_COLUMNS, EpochMetrics)


def emit_gap_curve(rows: Sequence[GapPoint], path: Union[str, Path], append: bool = False) -> Path:
    return emit_csv(rows, path, GAP_COLUMNS, append)


def read_gap_curve(path: Union[str, Path]) -> List[GapPoint]:
    return read_csv(path, GAP_COLUMNS, GapPoint)


# ==================== 导出器 ====================

class DataExporter:
    """运行目录下的文件导出器"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    @property
    def gap_curve_path(self) -> Path:
        return self.out_dir / "gap_curve.csv"

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / "checkpoints"

    def export_to_json(self, data: Any, filename: str) -> Path:
        """
        导出为 JSON（键排序、浮点最短可逆表示，便于逐字节比对）

        Args:
            data: 可序列化数据或 pydantic 模型
            filename: 运行目录下的文件名

        Returns:
            Path: 导出文件路径
        """
        if isinstance(data, BaseModel):
            data = data.model_dump(mode="json")
        filepath = self.out_dir / filename
        _check_json_finite(data, filename)
        try:
            with open(filepath, "w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
                f.write("\n")
            logger.info(f"数据已导出为JSON: {filepath}")
            return filepath
        except OSError as e:
            logger.error(f"导出JSON失败: {e}", exc_info=True)
            raise

    def export_text(self, text: str, filename: str) -> Path:
        filepath = self.out_dir / filename
        with open(filepath, "w", encoding="utf-8") as f:
            f.write(text)
        return filepath

    def truncate_after(self, epoch: int):
        """续训时丢弃检查点之后已写出的指标与差距曲线行"""
        for path, columns, model, emit in (
                (self.metrics_path, METRICS_COLUMNS, EpochMetrics, emit_metrics_csv),
                (self.gap_curve_path, GAP_COLUMNS, GapPoint, emit_gap_curve)):
            if not path.exists():
                continue
            kept = [row for row in read_csv(path, columns, model) if row.epoch <= epoch]
            emit(kept, path)
            logger.info(f"已截断 {path.name} 至 epoch {epoch}（保留 {len(kept)} 行）")


def _check_json_finite(value: Any, where: str):
    if isinstance(value, float) and not math.isfinite(value):
        raise ContractError(f"{where} 中存在非有限数值")
    if isinstance(value, dict):
        for v in value.values():
            _check_json_finite(v, where)
    elif isinstance(value, list):
        for v in value:
            _check_json_finite(v, where)


def read_report(path: Union[str, Path]) -> EvaluationReport:
    with open(path, "r", encoding="utf-8") as f:
        return EvaluationReport.model_validate(json.load(f))
