# -*- coding: utf-8 -*-
"""
命令行入口
pretrain | finetune | evaluate | plot | compare

退出码：0 成功；1 配置或用法错误；2 运行时错误
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

# 添加当前目录到 Python 路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from core.config import (  # noqa: E402
    TrainConfig,
    apply_overrides,
    config_hash,
    default_out_dir,
    dump_config,
    parse_config,
    validate_config,
)
from core.diffusion import Denoiser  # noqa: E402
from core.errors import ConfigError, ContractError, LabError  # noqa: E402
from core.exporter import DataExporter, RunManifest  # noqa: E402
from core.logger import configure_logging, get_logger  # noqa: E402
from core.performance import performance_monitor  # noqa: E402
from core.plotter import final_point, plot_metrics, plot_tradeoff  # noqa: E402
from core.trainer import check_compatible, evaluate, finetune, pretrain_baseline  # noqa: E402

logger = get_logger("cli")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULT_COMPARE_METHODS = "zigal,ws-zigal,mvc-zigal"


class UsageError(ConfigError):
    """命令行用法错误"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"无法解析整数列表: {text}") from e


# ==================== 公共步骤 ====================

def load_config(args: argparse.Namespace) -> TrainConfig:
    """读取 --config（缺省时使用默认配置）并应用命令行覆盖项"""
    config = parse_config(args.config) if args.config else validate_config({})
    return apply_overrides(config, seed=getattr(args, "seed", None), method=getattr(args, "method", None),
                           checkpoint=getattr(args, "checkpoint", None))


def prepare_out_dir(args: argparse.Namespace) -> DataExporter:
    out_dir = default_out_dir(args.out_dir)
    try:
        exporter = DataExporter(out_dir)
    except OSError as e:
        raise LabError(f"输出目录不可写: {out_dir}: {e}") from e
    configure_logging(exporter.out_dir / "logs")
    return exporter


def write_manifest(exporter: DataExporter, manifest: RunManifest) -> Path:
    """写出运行清单；清单中引用的文件必须已存在"""
    missing = [p for p in manifest.checkpoints + manifest.metrics + manifest.extra_files if not Path(p).exists()]
    if missing:
        raise ContractError(f"运行清单引用了不存在的文件: {missing}")
    manifest.finished_at = datetime.now().isoformat()
    manifest.host = performance_monitor.system_info()
    return exporter.export_to_json(manifest, "run_manifest.json")


# ==================== 子命令 ====================

def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_config(args)
    exporter = prepare_out_dir(args)
    logger.info(f"pretrain: {config.pretrain_steps} 步, V={config.views}, T={config.steps}")
    state = pretrain_baseline(config)
    path = save_checkpoint(exporter.out_dir / "pretrained.json", state)
    exporter.export_text(dump_config(config), "config.cfg")
    print(path)
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = load_config(args)
    exporter = prepare_out_dir(args)
    started = datetime.now().isoformat()
    exporter.export_text(dump_config(config), "config.cfg")
    logger.info(f"finetune: method={config.method}, K={config.epochs}, B={config.batch_size}, "
                f"hash={config_hash(config)}")

    result = finetune(config, exporter.out_dir, resume=not args.no_resume)
    extra = [str(exporter.out_dir / "config.cfg")]
    if exporter.gap_curve_path.exists():
        extra.append(str(exporter.gap_curve_path))
    write_manifest(exporter, RunManifest(
        command="finetune", config=config.model_dump(mode="json"), config_hash=config_hash(config),
        seeds=[config.seed], checkpoints=[str(p) for p in result.checkpoints],
        metrics=[str(result.metrics_path)], extra_files=extra, started_at=started))
    print(result.metrics_path)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_config(args)
    if not config.checkpoint:
        raise UsageError("evaluate 需要 --checkpoint 或配置项 checkpoint")
    exporter = prepare_out_dir(args)
    state = load_checkpoint(config.checkpoint)
    check_compatible(config, state.params)
    model = Denoiser(state.params, state.schedule)
    report = evaluate(model, config, checkpoint=Path(config.checkpoint).name, epoch=state.epoch)
    path = exporter.export_to_json(report, args.report)
    logger.info(f"evaluate: 之字形差距 {report.zigzag_gap}")
    print(path)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    if not args.metrics:
        raise UsageError("plot 至少需要一个 --metrics")
    exporter = prepare_out_dir(args)
    for path in plot_metrics(args.metrics, exporter.out_dir):
        print(path)
    return EXIT_OK


def _run_cell(config_data: Dict, out_dir: str) -> str:
    """网格中的一个 (方法, 种子) 单元；在子进程中运行"""
    config = validate_config(config_data)
    configure_logging(Path(out_dir) / "logs")
    return str(finetune(config, out_dir).metrics_path)


def compare_grid(methods: Sequence[str], seeds: Sequence[int], root: Path) -> List[Tuple[str, int, Path]]:
    """(方法, 种子, 运行目录) 的笛卡尔网格"""
    cells = []
    for method in methods:
        for seed in seeds:
            cells.append((method, seed, root / method / f"seed_{seed}"))
    return cells


def run_grid(config: TrainConfig, cells: Sequence[Tuple[str, int, Path]], workers: int) -> List[str]:
    """运行网格中的全部单元，返回各单元的指标文件（与 cells 同序）"""
    jobs = [(apply_overrides(config, method=m, seed=s).model_dump(mode="python"), str(d)) for m, s, d in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_run_cell, *zip(*jobs)))
    return [_run_cell(data, out) for data, out in jobs]


def cmd_compare(args: argparse.Namespace) -> int:
    config = load_config(args)
    exporter = prepare_out_dir(args)
    started = datetime.now().isoformat()

    if args.metrics:
        # 只由已有指标文件绘制权衡图
        metrics = list(args.metrics)
        seeds = list(range(len(metrics)))
    else:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        seeds = args.seeds if args.seeds else [config.seed]
        cells = compare_grid(methods, seeds, exporter.out_dir)
        logger.info(f"compare: {len(methods)} 种方法 × {len(seeds)} 个种子, workers={args.workers}")
        metrics = run_grid(config, cells, args.workers)
        seeds = [seed for _, seed, _ in cells]

    points = [final_point(path, seed) for path, seed in zip(metrics, seeds)]
    tradeoff = plot_tradeoff([p for p in points if p is not None], exporter.out_dir / "tradeoff.svg")
    plots = plot_metrics(metrics, exporter.out_dir)

    write_manifest(exporter, RunManifest(
        command="compare", config=config.model_dump(mode="json"), config_hash=config_hash(config),
        seeds=sorted(set(seeds)), metrics=[str(p) for p in metrics],
        extra_files=[str(tradeoff)] + [str(p) for p in plots], started_at=started))
    print(tradeoff)
    return EXIT_OK


# ==================== 参数解析 ====================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvlab", description="多视角扩散 RL 微调实验台 (pretrain | finetune | evaluate | plot | compare)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p: argparse.ArgumentParser, training: bool = True):
        p.add_argument("--out-dir", type=str, default=None, help="输出目录（默认 $MVLAB_OUT_DIR 或 ./runs）")
        if training:
            p.add_argument("--config", type=str, default=None, help="key = value 配置文件")
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--method", type=str, default=None, help="覆盖配置中的 method")
            p.add_argument("--checkpoint", type=str, default=None, help="预训练或待评估的检查点")

    p = sub.add_parser("pretrain", help="预训练基线去噪网络")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="RL 微调")
    common(p)
    p.add_argument("--no-resume", action="store_true", help="忽略运行目录中的 latest 检查点")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="固定种子评估")
    common(p)
    p.add_argument("--report", type=str, default="eval_report.json", help="报告文件名")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="由指标 CSV 绘制 SVG")
    common(p, training=False)
    p.add_argument("--metrics", action="append", default=[], help="指标文件，可重复")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="方法 × 种子网格与权衡图")
    common(p)
    p.add_argument("--methods", type=str, default=DEFAULT_COMPARE_METHODS, help="逗号分隔的方法名")
    p.add_argument("--seeds", type=_int_list, default=None, help="逗号分隔的种子，默认使用配置中的 seed")
    p.add_argument("--workers", type=int, default=1, help="并行进程数")
    p.add_argument("--metrics", action="append", default=[], help="只由已有指标文件绘制权衡图，可重复")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    主函数

    Args:
        argv: 命令行参数（默认 sys.argv[1:]）

    Returns:
        int: 退出码
    """
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LabError, OSError) as e:
        logger.error(f"运行失败: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
