# -*- coding: utf-8 -*-
"""
绘图模块
把指标 CSV 渲染为 SVG 曲线（奖励、λ、τ、之字形差距）以及方法对比的权衡散点图；
只读输入文件，不修改指标
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from jinja2 import Environment, FileSystemLoader, select_autoescape

from core.exporter import EpochMetrics, GapPoint, read_gap_curve, read_metrics_csv
from core.logger import get_logger

logger = get_logger("plotter")

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]

WIDTH, HEIGHT = 720, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 200, 36, 48


@dataclass
class Series:
    """一条曲线"""

    label: str
    xs: List[float] = field(default_factory=list)
    ys: List[float] = field(default_factory=list)

    def add(self, x: float, y: Optional[float]):
        if y is None:
            return
        self.xs.append(float(x))
        self.ys.append(float(y))


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _tick_label(value: float) -> str:
    return f"{value:.4g}"


def _extent(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return 0.0, 1.0
    low, high = min(values), max(values)
    if low == high:
        pad = abs(low) * 0.1 or 1.0
        return low - pad, high + pad
    pad = (high - low) * 0.05
    return low - pad, high + pad


class _Frame:
    def __init__(self):
        self.left = MARGIN_LEFT
        self.right = WIDTH - MARGIN_RIGHT
        self.top = MARGIN_TOP
        self.bottom = HEIGHT - MARGIN_BOTTOM


class SvgRenderer:
    """基于 jinja2 模板的 SVG 渲染器"""

    def __init__(self, template_dir: Union[str, Path] = TEMPLATE_DIR):
        self.env = Environment(
            loader=FileSystemLoader(str(template_dir)),
            autoescape=select_autoescape(enabled_extensions=("svg",)),
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
        )

    def render(self, path: Union[str, Path], title: str, x_label: str, y_label: str,
               series: Sequence[Series], connect: bool = True) -> Path:
        """
        渲染一张图

        Args:
            path: 输出文件
            title: 标题
            x_label: 横轴标签（列名）
            y_label: 纵轴标签（列名）
            series: 曲线列表，空列表时输出带 "no data" 的空图
            connect: 是否用折线连接各点（散点图为 False）

        Returns:
            Path: 输出文件路径
        """
        series = [s for s in series if s.xs]
        frame = _Frame()
        x_low, x_high = _extent([x for s in series for x in s.xs])
        y_low, y_high = _extent([y for s in series for y in s.ys])

        def to_x(x: float) -> float:
            return frame.left + (x - x_low) / (x_high - x_low) * (frame.right - frame.left)

        def to_y(y: float) -> float:
            return frame.bottom - (y - y_low) / (y_high - y_low) * (frame.bottom - frame.top)

        rendered = []
        for i, s in enumerate(series):
            points = [{"x": _fmt(to_x(x)), "y": _fmt(to_y(y)), "title": f"{x_label}={x:.6g}, {y_label}={y:.6g}"}
                      for x, y in zip(s.xs, s.ys)]
            rendered.append({"label": s.label, "color": PALETTE[i % len(PALETTE)], "points": points})

        x_ticks = [{"pos": _fmt(to_x(v)), "label": _tick_label(v)} for v in _ticks(x_low, x_high)]
        y_ticks = [{"pos": _fmt(to_y(v)), "label": _tick_label(v)} for v in _ticks(y_low, y_high)]

        text = self.env.get_template("line_plot.svg").render(
            width=WIDTH, height=HEIGHT, title=title, x_label=x_label, y_label=y_label, frame=frame,
            x_ticks=x_ticks, y_ticks=y_ticks, series=rendered, connect=connect, radius=3 if connect else 5)

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        logger.debug(f"已渲染 {path.name}: {len(rendered)} 条曲线")
        return path


def _ticks(low: float, high: float, count: int = 5) -> List[float]:
    step = (high - low) / (count - 1)
    return [low + i * step for i in range(count)]


# ==================== 指标图 ====================

def _run_label(path: Path, rows: Sequence[EpochMetrics]) -> str:
    method = rows[0].method if rows else "?"
    return f"{method}:{path.parent.name or path.stem}"


def metric_series(runs: Dict[str, List[EpochMetrics]], column: str) -> List[Series]:
    """每个运行一条曲线，横轴 epoch，纵轴为指定列（空单元格跳过）"""
    attribute = "lam" if column == "lambda" else column
    out = []
    for label, rows in runs.items():
        series = Series(label=label if len(runs) > 1 else column)
        for row in rows:
            series.add(row.epoch, getattr(row, attribute))
        out.append(series)
    return out


def plot_metrics(metrics_paths: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                 renderer: Optional[SvgRenderer] = None) -> List[Path]:
    """
    从一个或多个指标文件渲染 rewards.svg / lambda.svg / tau.svg / zigzag_gap.svg；
    指标文件旁存在 gap_curve.csv 时额外渲染 gap_curve.svg

    Args:
        metrics_paths: 指标 CSV 路径
        out_dir: 输出目录

    Returns:
        List[Path]: 写出的 SVG 文件
    """
    renderer = renderer or SvgRenderer()
    out_dir = Path(out_dir)
    runs: Dict[str, List[EpochMetrics]] = {}
    gap_curves: Dict[str, List[GapPoint]] = {}
    for raw in metrics_paths:
        path = Path(raw)
        rows = read_metrics_csv(path)
        label = _run_label(path, rows)
        if label in runs:
            label = f"{label}#{len(runs)}"
        runs[label] = rows
        gap_path = path.parent / "gap_curve.csv"
        if gap_path.exists():
            gap_curves[label] = read_gap_curve(gap_path)

    written = []
    reward_series = []
    for column in ("mean_R_single_raw", "mean_R_mv_raw"):
        for series in metric_series(runs, column):
            if len(runs) > 1:
                series.label = f"{series.label} {column}"
            reward_series.append(series)
    written.append(renderer.render(out_dir / "rewards.svg", "rewards", "epoch",
                                   "mean_R_single_raw / mean_R_mv_raw", reward_series))
    for column, filename in (("lambda", "lambda.svg"), ("tau", "tau.svg"), ("zigzag_gap", "zigzag_gap.svg")):
        written.append(renderer.render(out_dir / filename, column, "epoch", column,
                                       metric_series(runs, column)))

    if gap_curves:
        series = []
        for label, points in gap_curves.items():
            s = Series(label=label if len(gap_curves) > 1 else "zigzag_gap")
            for point in points:
                s.add(point.epoch, point.zigzag_gap)
            series.append(s)
        written.append(renderer.render(out_dir / "gap_curve.svg", "evaluated zigzag gap", "epoch",
                                       "zigzag_gap", series))
    logger.info(f"已绘制 {len(written)} 张图到 {out_dir}")
    return written


# ==================== 权衡图 ====================

@dataclass
class TradeoffPoint:
    """一个运行最后一个 epoch 的单视角与联合奖励"""

    method: str
    seed: int
    mean_R_single_raw: float
    mean_R_mv_raw: float


def final_point(metrics_path: Union[str, Path], seed: int) -> Optional[TradeoffPoint]:
    rows = read_metrics_csv(metrics_path)
    if not rows:
        return None
    last = rows[-1]
    return TradeoffPoint(last.method, seed, last.mean_R_single_raw, last.mean_R_mv_raw)


def plot_tradeoff(points: Sequence[TradeoffPoint], path: Union[str, Path],
                  renderer: Optional[SvgRenderer] = None) -> Path:
    """每种方法一组散点：横轴最终单视角奖励，纵轴最终联合奖励"""
    renderer = renderer or SvgRenderer()
    grouped: Dict[str, Series] = {}
    for point in sorted(points, key=lambda p: (p.method, p.seed)):
        grouped.setdefault(point.method, Series(label=point.method)).add(point.mean_R_single_raw,
                                                                         point.mean_R_mv_raw)
    return renderer.render(path, "single-view vs joint-view reward", "mean_R_single_raw", "mean_R_mv_raw",
                           list(grouped.values()), connect=False)
