"""图表生成模块

读取 results/<cell>/phases.csv，生成确定性的 SVG 图表。
所有图都是 CSV 内容的纯函数：同样的输入两次生成的 SVG 字节完全相同。
横轴一律用存储年龄而不是墙钟时间。
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from blobbench.harness import PHASE_COLUMNS, PHASES_SCHEMA  # noqa: E402
from blobbench.logger import get_logger  # noqa: E402
from blobbench.utils import KB, MB  # noqa: E402

FIGURE_KINDS = (
    "frag-vs-age",
    "throughput-vs-age",
    "throughput-vs-size",
    "size-dist",
    "free-pool",
    "buffer-sweep",
)

# 对比图中默认应当出现的后端
EXPECTED_BACKENDS = ("extent", "page")

_MARKERS = ("o", "s", "^", "D", "v", "P", "X", "*")

_SVG_PARAMS = {
    "svg.hashsalt": "blobbench",
    "svg.fonttype": "path",
    "path.simplify": False,
}


class ReportError(RuntimeError):
    """结果 CSV 缺失或 schema 版本不匹配"""
    pass


@dataclass
class FigureData:
    """一张图的全部数据点"""

    kind: str
    title: str
    xlabel: str
    ylabel: str
    series: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    absent: List[str] = field(default_factory=list)


def read_phases_csv(path: Path) -> List[Dict[str, str]]:
    """
    读取 phases.csv 并检查 schema

    Raises:
        ReportError: schema 行或列不匹配
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        first = f.readline().strip()
        if first != f"#schema={PHASES_SCHEMA}":
            raise ReportError(f"{path}: schema 不匹配，期望 {PHASES_SCHEMA}，实际 {first!r}")
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != PHASE_COLUMNS:
            raise ReportError(f"{path}: 列不匹配: {reader.fieldnames}")
        return list(reader)


def load_results(results_dir: Union[str, Path]) -> List[Dict[str, str]]:
    """
    读取结果目录下所有单元的 phases.csv

    Returns:
        全部数据行（按单元目录名排序）

    Raises:
        ReportError: 没有任何结果文件
    """
    results_dir = Path(results_dir)
    paths = sorted(results_dir.glob("*/phases.csv"))
    if not paths:
        raise ReportError(
            f"{results_dir} 中没有结果文件，期望的文件: <cell>/phases.csv、"
            f"<cell>/frag_age<k>.csv、<cell>/summary.json"
        )
    rows: List[Dict[str, str]] = []
    for path in paths:
        rows.extend(read_phases_csv(path))
    return rows


def _mean_points(groups: Dict[float, List[float]]) -> List[Tuple[float, float]]:
    return [(x, float(np.mean(ys))) for x, ys in sorted(groups.items())]


def _read_rows(rows: List[Dict[str, str]]) -> List[Dict[str, str]]:
    return [r for r in rows if r["phase"] == "read_pass"]


def _final_read(rows: List[Dict[str, str]]) -> Dict[str, Dict[str, str]]:
    """每个单元最后一次（年龄最大）带碎片数的读测量"""
    final: Dict[str, Dict[str, str]] = {}
    for r in _read_rows(rows):
        if r["mean_fragments"] == "":
            continue
        best = final.get(r["cell"])
        if best is None or float(r["age_to"]) >= float(best["age_to"]):
            final[r["cell"]] = r
    return final


def _missing_backends(present: List[str]) -> List[str]:
    return [b for b in EXPECTED_BACKENDS if b not in present]


def _frag_vs_age(rows: List[Dict[str, str]]) -> FigureData:
    data = FigureData("frag-vs-age", "Fragmentation vs storage age", "storage age", "mean fragments / object")
    present = []
    for r in _read_rows(rows):
        name = f"{r['cell']} ({r['backend']})"
        points = data.series.setdefault(name, [])
        if r["mean_fragments"] != "":
            points.append((float(r["age_to"]), float(r["mean_fragments"])))
            present.append(r["backend"])
    for name, points in data.series.items():
        points.sort()
        if not points:
            data.absent.append(name)
    data.absent.extend(_missing_backends(present))
    return data


def _throughput_vs_age(rows: List[Dict[str, str]]) -> FigureData:
    data = FigureData("throughput-vs-age", "Throughput vs storage age", "storage age", "throughput (MB/s)")
    for r in rows:
        if r["phase"] == "read_pass":
            name = f"{r['cell']} read"
        elif r["phase"] == "churn":
            name = f"{r['cell']} write"
        else:
            continue
        data.series.setdefault(name, []).append((float(r["age_to"]), float(r["throughput_mb_s"])))
    for points in data.series.values():
        points.sort()
    data.absent.extend(_missing_backends([r["backend"] for r in rows]))
    return data


def _throughput_vs_size(rows: List[Dict[str, str]]) -> FigureData:
    data = FigureData(
        "throughput-vs-size", "Read throughput after bulk load", "object size (MB)", "throughput (MB/s)"
    )
    reads = _read_rows(rows)
    if reads:
        first_age = min(float(r["age_to"]) for r in reads)
        groups: Dict[str, Dict[float, List[float]]] = {}
        for r in reads:
            if float(r["age_to"]) != first_age:
                continue
            by_size = groups.setdefault(r["backend"], {})
            by_size.setdefault(int(r["mean_object_bytes"]) / MB, []).append(float(r["throughput_mb_s"]))
        data.series = {b: _mean_points(g) for b, g in sorted(groups.items())}
    data.absent.extend(_missing_backends(list(data.series)))
    return data


def _size_dist(rows: List[Dict[str, str]]) -> FigureData:
    data = FigureData(
        "size-dist", "Constant vs uniform object sizes", "storage age", "mean fragments / object"
    )
    groups: Dict[str, Dict[float, List[float]]] = {}
    for r in _read_rows(rows):
        if r["mean_fragments"] == "":
            continue
        name = f"{r['backend']} {r['size_kind']}"
        groups.setdefault(name, {}).setdefault(float(r["age_to"]), []).append(float(r["mean_fragments"]))
    data.series = {name: _mean_points(g) for name, g in sorted(groups.items())}
    backends = sorted({name.split()[0] for name in data.series})
    for b in backends:
        for kind in ("constant", "uniform"):
            if f"{b} {kind}" not in data.series:
                data.absent.append(f"{b} {kind}")
    return data


def _final_by(rows: List[Dict[str, str]], kind: str, title: str, xlabel: str, x_of) -> FigureData:
    data = FigureData(kind, title, xlabel, "mean fragments / object (final age)")
    bulk = {r["cell"]: r for r in rows if r["phase"] == "bulk_load"}
    groups: Dict[str, Dict[float, List[float]]] = {}
    for cell, r in sorted(_final_read(rows).items()):
        x = x_of(r, bulk.get(cell, r))
        groups.setdefault(r["backend"], {}).setdefault(x, []).append(float(r["mean_fragments"]))
    data.series = {b: _mean_points(g) for b, g in sorted(groups.items())}
    data.absent.extend(_missing_backends(list(data.series)))
    return data


def figure_data(rows: List[Dict[str, str]], kind: str) -> FigureData:
    """
    由 CSV 行计算一张图的数据

    Args:
        rows: load_results() 的结果
        kind: FIGURE_KINDS 之一

    Returns:
        FigureData

    Raises:
        ReportError: 图类型未知
    """
    if kind == "frag-vs-age":
        return _frag_vs_age(rows)
    if kind == "throughput-vs-age":
        return _throughput_vs_age(rows)
    if kind == "throughput-vs-size":
        return _throughput_vs_size(rows)
    if kind == "size-dist":
        return _size_dist(rows)
    if kind == "free-pool":
        return _final_by(
            rows, kind, "Effect of free pool size", "free pool after bulk load (objects)",
            lambda r, bulk: round(float(bulk["free_pool"]), 2),
        )
    if kind == "buffer-sweep":
        return _final_by(
            rows, kind, "Effect of write buffer size", "write buffer (KB)",
            lambda r, bulk: int(r["write_buffer_bytes"]) / KB,
        )
    raise ReportError(f"未知的图类型: {kind}，可选: {', '.join(FIGURE_KINDS)}")


def draw_figure(data: FigureData, path: Path) -> Path:
    """把 FigureData 画成 SVG（不含时间戳，哈希盐固定）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_SVG_PARAMS):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        drawn = 0
        for i, (name, points) in enumerate(sorted(data.series.items())):
            if not points:
                continue
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker=_MARKERS[i % len(_MARKERS)], label=name)
            drawn += 1
        if data.absent:
            ax.text(
                0.02, 0.98, "absent series: " + ", ".join(data.absent),
                transform=ax.transAxes, va="top", ha="left", fontsize=8, color="gray",
            )
        if drawn == 0:
            ax.text(0.5, 0.5, "no data", transform=ax.transAxes, ha="center", va="center")
        else:
            ax.legend(fontsize=8)
        ax.set_title(data.title, fontsize=10)
        ax.set_xlabel(data.xlabel)
        ax.set_ylabel(data.ylabel)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def render_figures(
    results_dir: Union[str, Path],
    figure_kind: str = "all",
    out_dir: Optional[Union[str, Path]] = None,
) -> List[Path]:
    """
    生成图表

    Args:
        results_dir: 结果目录
        figure_kind: FIGURE_KINDS 之一或 all
        out_dir: 输出目录，默认为 results_dir/figures

    Returns:
        生成的 SVG 路径列表

    Raises:
        ReportError: 结果缺失、schema 不匹配或图类型未知
    """
    logger = get_logger(__name__)
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir / "figures"
    kinds = FIGURE_KINDS if figure_kind == "all" else (figure_kind,)
    for kind in kinds:
        if kind not in FIGURE_KINDS:
            raise ReportError(f"未知的图类型: {kind}，可选: {', '.join(FIGURE_KINDS)}")

    rows = load_results(results_dir)
    paths = []
    for kind in kinds:
        data = figure_data(rows, kind)
        if data.absent:
            logger.warning(f"图 {kind} 缺少数据系列: {data.absent}")
        paths.append(draw_figure(data, out_dir / f"{kind}.svg"))
    logger.info(f"生成图表: 数量={len(paths)}, 目录={out_dir}")
    return paths
