"""命令行入口

子命令：init / bench / scan / defrag / report / crashtest。
成功时退出码 0，并在标准输出打印一行 JSON 摘要；参数错误退出码 2；
运行失败退出码 1，标准错误输出 {"error": 类型, "message": 描述}。
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from blobbench import __version__
from blobbench.config import (
    CellConfig,
    ConfigurationError,
    VolumeGeometry,
    build_model,
    load_experiment,
)
from blobbench.extent_store import ExtentStore, defragment_extent
from blobbench.harness import (
    CRASH_CUT_POINTS,
    ExperimentMatrix,
    crash_matrix,
    run_experiment,
)
from blobbench.logger import get_logger, setup_logger
from blobbench.page_store import DefragRefused, PageStore, defragment_by_copy
from blobbench.report import FIGURE_KINDS, render_figures
from blobbench.scanner import (
    DEFAULT_GAP_ALLOWANCE,
    read_live_csv,
    scan_image,
    write_frag_csv,
    write_frag_json,
)
from blobbench.store import VolumeImage
from blobbench.utils import GB
from blobbench.wal import WriteAheadLog

U64_MAX = 2**64 - 1


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"种子必须在 0..2^64-1 之间: {text}")
    return value


def _positive(text: str) -> int:
    value = int(text, 0)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"必须为正整数: {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    """构造参数解析器"""
    parser = argparse.ArgumentParser(
        prog="blobbench",
        description="大对象存储老化基准与碎片扫描工具",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="在终端输出日志")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("init", help="格式化一个卷镜像")
    p.add_argument("--image", required=True, help="镜像文件路径")
    p.add_argument("--backend", required=True, choices=("extent", "page"))
    p.add_argument("--capacity", type=_positive, default=GB, help="数据区容量（字节，默认 1GB）")
    p.add_argument("--cluster-bytes", type=_positive, default=4096)
    p.add_argument("--page-bytes", type=_positive, default=8192)
    p.add_argument("--page-header-bytes", type=_positive, default=96)

    p = sub.add_parser("bench", help="运行实验矩阵")
    p.add_argument("--config", help="实验配置文件（默认 ~/.blobbench/experiment.yaml）")
    p.add_argument("--seed", type=_u64, help="覆盖所有单元的种子")
    p.add_argument("--backend", choices=("fs", "extent", "page"), help="覆盖所有单元的后端")
    p.add_argument("--out", help="结果目录（覆盖配置与 BLOBBENCH_RESULTS）")

    p = sub.add_parser("scan", help="独立扫描一个卷镜像")
    p.add_argument("--image", required=True, help="镜像文件路径")
    p.add_argument("--live", help="存活对象列表 CSV（object_id[,version,size_bytes]）")
    p.add_argument("--out", default=".", help="输出目录")
    p.add_argument("--workers", type=_positive, default=1, help="扫描线程数")
    p.add_argument("--gap-allowance", type=int, default=DEFAULT_GAP_ALLOWANCE)

    p = sub.add_parser("defrag", help="整理卷镜像")
    p.add_argument("--image", required=True, help="镜像文件路径")
    p.add_argument("--backend", required=True, choices=("extent", "page"))
    p.add_argument("--wal", help="page 后端的日志文件（默认与镜像同名 .wal）")
    p.add_argument("--target", help="page 后端整理复制的目标镜像（默认 <image>.defrag）")

    p = sub.add_parser("report", help="由结果 CSV 生成 SVG 图表")
    p.add_argument("--in", dest="results_dir", required=True, help="结果目录")
    p.add_argument("--fig", default="all", choices=FIGURE_KINDS + ("all",))
    p.add_argument("--out", help="输出目录（默认 <in>/figures）")

    p = sub.add_parser("crashtest", help="运行安全写崩溃注入矩阵")
    p.add_argument("--backend", choices=tuple(CRASH_CUT_POINTS), help="默认两个后端都测")
    p.add_argument("--seeds", type=_positive, default=250, help="每个切点的种子数")
    p.add_argument("--seed", type=_u64, default=0, help="起始种子")
    p.add_argument("--workdir", help="临时文件所在目录")

    return parser


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, ensure_ascii=False, sort_keys=True))


def cmd_init(args: argparse.Namespace) -> int:
    geometry = build_model(VolumeGeometry, {
        "capacity_bytes": args.capacity,
        "cluster_bytes": args.cluster_bytes,
        "page_bytes": args.page_bytes,
        "page_header_bytes": args.page_header_bytes,
    })
    image = VolumeImage.create(geometry, args.backend, path=args.image)
    total = image.total_bytes
    image.close()
    _emit({"image": str(args.image), "backend": args.backend, "capacity_bytes": args.capacity, "file_bytes": total})
    return 0


def _override_cells(cells: List[CellConfig], seed: Optional[int], backend: Optional[str]) -> List[CellConfig]:
    if seed is None and backend is None:
        return cells
    updated = []
    for cell in cells:
        data = cell.model_dump()
        if backend is not None:
            data["backend"] = backend
        if seed is not None:
            data["workload"]["seed"] = seed
        updated.append(build_model(CellConfig, data))
    return updated


def cmd_bench(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    if args.out:
        config.results_dir = str(Path(args.out).expanduser().absolute())
    config.cells = _override_cells(config.cells, args.seed, args.backend)
    matrix = ExperimentMatrix.from_config(config)
    results = run_experiment(matrix)
    cells = {
        name: {
            "status": r.status,
            "stream_digest": r.stream_digest,
            "mean_fragments": {age: round(rep.mean_fragments, 6) for age, rep in r.frag_reports.items()},
            "advisories": len(r.advisories),
            "diagnostics": r.diagnostics,
        }
        for name, r in results.items()
    }
    _emit({"results_dir": str(matrix.results_dir), "cells": cells})
    return 0 if all(r.status == "ok" for r in results.values()) else 1


def cmd_scan(args: argparse.Namespace) -> int:
    image = VolumeImage.open(args.image)
    try:
        live = read_live_csv(Path(args.live)) if args.live else None
        report = scan_image(image, live, gap_allowance=args.gap_allowance, workers=args.workers)
    finally:
        image.close()
    out = Path(args.out)
    csv_path = write_frag_csv(report, out / "frag.csv")
    write_frag_json(report, out / "frag.json")
    _emit({"csv": str(csv_path), **report.summary()})
    return 0


def cmd_defrag(args: argparse.Namespace) -> int:
    logger = get_logger(__name__)
    image = VolumeImage.open(args.image)
    if image.backend != args.backend:
        image.close()
        raise ConfigurationError(f"镜像后端是 {image.backend}，不是 {args.backend}")

    if args.backend == "extent":
        store = ExtentStore.open(image)
        before = store.ground_truth()
        moved = defragment_extent(store)
        after = store.ground_truth()
        store.close()
        _emit({"backend": "extent", "relocated": moved, **_frag_means(before, after)})
        return 0

    wal_path = Path(args.wal) if args.wal else Path(args.image).with_suffix(".wal")
    store = PageStore.recover(image, WriteAheadLog(wal_path))
    target_path = Path(args.target) if args.target else Path(f"{args.image}.defrag")
    target_wal_path = Path(f"{target_path}.wal")
    target_wal_path.unlink(missing_ok=True)
    target_image = VolumeImage.create(image.geometry, "page", path=target_path)
    before = store.ground_truth()
    try:
        target = defragment_by_copy(store, target_image, WriteAheadLog(target_wal_path))
    except DefragRefused as e:
        target_image.close()
        target_path.unlink(missing_ok=True)
        target_wal_path.unlink(missing_ok=True)
        store.close()
        logger.warning(f"整理被拒绝: {e}")
        print(
            json.dumps(
                {
                    "error": "DefragRefused",
                    "message": str(e),
                    "required_bytes": e.estimate.required_bytes,
                    "available_bytes": e.estimate.available_bytes,
                    "shortfall_bytes": e.estimate.shortfall_bytes,
                },
                ensure_ascii=False,
            ),
            file=sys.stderr,
        )
        return 1
    after = target.ground_truth()
    target.close()
    store.close()
    _emit({"backend": "page", "target": str(target_path), **_frag_means(before, after)})
    return 0


def _frag_means(before: Dict[int, int], after: Dict[int, int]) -> Dict[str, float]:
    def mean(values: Dict[int, int]) -> float:
        return round(sum(values.values()) / len(values), 6) if values else 0.0

    return {"objects": len(after), "mean_fragments_before": mean(before), "mean_fragments_after": mean(after)}


def cmd_report(args: argparse.Namespace) -> int:
    paths = render_figures(args.results_dir, args.fig, args.out)
    _emit({"figures": [str(p) for p in paths]})
    return 0


def cmd_crashtest(args: argparse.Namespace) -> int:
    backends = [args.backend] if args.backend else list(CRASH_CUT_POINTS)
    summaries = {}
    violations = 0
    for backend in backends:
        matrix = crash_matrix(backend, seeds=args.seeds, base_seed=args.seed, workdir=args.workdir)
        summaries[backend] = matrix.to_dict()
        violations += len(matrix.violations)
    _emit({"backends": summaries, "violations": violations})
    return 0 if violations == 0 else 1


COMMANDS = {
    "init": cmd_init,
    "bench": cmd_bench,
    "scan": cmd_scan,
    "defrag": cmd_defrag,
    "report": cmd_report,
    "crashtest": cmd_crashtest,
}


def run(argv: Optional[List[str]] = None) -> int:
    """
    运行命令行

    Args:
        argv: 参数列表，默认取 sys.argv[1:]

    Returns:
        退出码
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logger(console=args.verbose)
    logger = get_logger(__name__)
    logger.info(f"执行子命令: {args.command}")
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        logger.error(f"子命令失败: {args.command}: {e}", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}, ensure_ascii=False), file=sys.stderr)
        return 1
