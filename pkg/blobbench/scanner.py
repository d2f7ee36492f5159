"""碎片扫描模块

负载生成时在每个 1KB 边界嵌入 24 字节标记；扫描器只读取卷镜像的原始数据区，
按字节粒度查找标记并统计每个对象的碎片数，不依赖任何后端元数据。

标记格式（小端）：

    magic "FRAGMRK1" (8) | object (u64) | sequence (u32) | crc32(前 20 字节) (u32)

object 字段低 48 位是对象 id，高 16 位是写入版本（generation mod 2^16）。
唯一允许的外部输入是驱动提供的存活对象列表，用来过滤已删除或已覆盖的旧副本。
"""

import csv
import json
import re
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from blobbench.config import MARKER_INTERVAL, ConfigurationError
from blobbench.logger import get_logger
from blobbench.store import VolumeImage
from blobbench.utils import make_rng

MAGIC = b"FRAGMRK1"
MARKER_BYTES = 24
DEFAULT_GAP_ALLOWANCE = 512
FRAG_SCHEMA = "blobbench.frag/1"
FRAG_COLUMNS = ("object_id", "expected_markers", "recovered_markers", "fragments")

ID_BITS = 48
ID_MASK = (1 << ID_BITS) - 1
VERSION_MASK = 0xFFFF

# 负载填充字节的子流标识
PAYLOAD_KEY = 0x504C

_MARKER_HEAD = struct.Struct("<8sQI")
_MARKER_CRC = struct.Struct("<I")
_MARKER_DTYPE = np.dtype([("magic", "S8"), ("obj", "<u8"), ("seq", "<u4"), ("crc", "<u4")])
_MAGIC_RE = re.compile(re.escape(MAGIC))

_SCAN_CHUNK = 64 * 1024 * 1024


class ScanMismatchError(ValueError):
    """扫描报告与真值覆盖的对象集合不一致"""
    pass


class LiveObject(NamedTuple):
    """驱动提供的存活对象：id、当前版本、大小（未知时为 None）"""

    object_id: int
    version: Optional[int] = None
    size_bytes: Optional[int] = None


@dataclass(frozen=True)
class ObjectFrag:
    object_id: int
    expected_markers: int
    recovered_markers: int
    fragments: int


@dataclass
class FragReport:
    """每对象碎片数及汇总"""

    objects: Dict[int, ObjectFrag] = field(default_factory=dict)
    storage_age: Optional[str] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def mean_fragments(self) -> float:
        """每对象平均碎片数（只计入至少恢复了一个标记的对象）"""
        found = [o.fragments for o in self.objects.values() if o.recovered_markers > 0]
        return sum(found) / len(found) if found else 0.0

    @property
    def fragments_per_64kb(self) -> float:
        """每 64KB 数据的碎片数"""
        total_bytes = sum(o.expected_markers for o in self.objects.values()) * MARKER_INTERVAL
        if total_bytes == 0:
            return 0.0
        return sum(o.fragments for o in self.objects.values()) / (total_bytes / 65536)

    def fragments(self) -> Dict[int, int]:
        return {k: o.fragments for k, o in self.objects.items()}

    def summary(self) -> Dict:
        return {
            "schema": FRAG_SCHEMA,
            "storage_age": self.storage_age,
            "objects": len(self.objects),
            "mean_fragments": round(self.mean_fragments, 6),
            "fragments_per_64kb": round(self.fragments_per_64kb, 6),
            "expected_markers": sum(o.expected_markers for o in self.objects.values()),
            "recovered_markers": sum(o.recovered_markers for o in self.objects.values()),
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class ReportDiff:
    """扫描结果减去真值的逐对象差（只保留非零项）"""

    differences: Dict[int, int]
    informational: bool = False

    @property
    def empty(self) -> bool:
        return not self.differences


def marker_object_field(obj_id: int, version: int) -> int:
    """把 id 和版本合成标记中的 object 字段"""
    return ((version & VERSION_MASK) << ID_BITS) | (obj_id & ID_MASK)


def make_payload(obj_id: int, size_bytes: int, seed: int, version: int = 0) -> bytes:
    """
    生成带标记的负载

    标记 k 位于偏移 k·1024；其余字节是由 (seed, id, version) 决定的伪随机填充，
    填充中出现的 magic 会被改写一个字节。

    Args:
        obj_id: 对象 id（低 48 位有效）
        size_bytes: 负载大小，必须是 1024 的正整数倍
        seed: 种子
        version: 写入版本

    Returns:
        负载字节

    Raises:
        ConfigurationError: 大小未对齐
    """
    if size_bytes <= 0 or size_bytes % MARKER_INTERVAL != 0:
        raise ConfigurationError(f"负载大小必须是 {MARKER_INTERVAL} 的正整数倍: {size_bytes}")
    count = size_bytes // MARKER_INTERVAL
    rng = make_rng(seed, PAYLOAD_KEY, obj_id & ID_MASK, version & VERSION_MASK)
    buf = np.frombuffer(rng.bytes(size_bytes), dtype=np.uint8).copy()

    markers = np.zeros(count, dtype=_MARKER_DTYPE)
    markers["magic"] = MAGIC
    markers["obj"] = marker_object_field(obj_id, version)
    markers["seq"] = np.arange(count, dtype=np.uint32)
    raw = markers.view(np.uint8).reshape(count, MARKER_BYTES)
    markers["crc"] = [zlib.crc32(raw[i, :_MARKER_HEAD.size].tobytes()) for i in range(count)]
    buf.reshape(count, MARKER_INTERVAL)[:, :MARKER_BYTES] = markers.view(np.uint8).reshape(count, MARKER_BYTES)

    # 标记之外出现的 magic：翻转其中一个填充字节
    data = buf.tobytes()
    for m in _MAGIC_RE.finditer(data):
        if m.start() % MARKER_INTERVAL == 0:
            continue
        for i in range(m.start(), m.end()):
            if i % MARKER_INTERVAL >= MARKER_BYTES:
                buf[i] ^= 0xFF
                break
    return buf.tobytes()


def _scan_range(view: memoryview, start: int, end: int) -> List[Tuple[int, int, int]]:
    """扫描 [start, end) 内起始的标记，返回 (object 字段, sequence, 偏移)"""
    hits = []
    limit = len(view)
    endpos = min(limit, end + len(MAGIC) - 1)
    for m in _MAGIC_RE.finditer(view, start, endpos):
        pos = m.start()
        if pos + MARKER_BYTES > limit:
            continue
        head = bytes(view[pos:pos + _MARKER_HEAD.size])
        (crc,) = _MARKER_CRC.unpack_from(view, pos + _MARKER_HEAD.size)
        if zlib.crc32(head) != crc:
            continue
        _, obj, seq = _MARKER_HEAD.unpack(head)
        hits.append((obj, seq, pos))
    return hits


def find_markers(view: memoryview, workers: int = 1) -> np.ndarray:
    """
    在原始字节中查找全部有效标记

    数据按 64MB 切成区间，每个区间只收集起始于其内部的标记，区间边界不会重复或遗漏。

    Returns:
        形状 (n, 3) 的 uint64 数组：object 字段、sequence、偏移
    """
    size = len(view)
    ranges = [(s, min(size, s + _SCAN_CHUNK)) for s in range(0, size, _SCAN_CHUNK)]
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda r: _scan_range(view, r[0], r[1]), ranges))
    else:
        parts = [_scan_range(view, s, e) for s, e in ranges]
    hits = [h for part in parts for h in part]
    if not hits:
        return np.zeros((0, 3), dtype=np.uint64)
    return np.asarray(hits, dtype=np.uint64)


def _count_fragments(seqs: np.ndarray, offsets: np.ndarray, gap_allowance: int) -> int:
    order = np.lexsort((offsets, seqs))
    s = seqs[order].astype(np.int64)
    o = offsets[order].astype(np.int64)
    if len(s) < 2:
        return len(s)
    d_seq = np.diff(s)
    d_off = np.diff(o)
    breaks = (d_seq != 1) | (d_off < MARKER_INTERVAL) | (d_off > MARKER_INTERVAL + gap_allowance)
    return int(np.count_nonzero(breaks)) + 1


def scan_image(
    image: Union[VolumeImage, bytes, bytearray, memoryview],
    live: Optional[Iterable[LiveObject]] = None,
    gap_allowance: int = DEFAULT_GAP_ALLOWANCE,
    workers: int = 1,
    storage_age: Optional[str] = None,
) -> FragReport:
    """
    扫描原始数据区，统计每个对象的碎片数

    命中按对象分组、按序号排序；相邻序号标记之间的卷偏移差不在
    [1024, 1024 + gap_allowance] 内即计一个断点（缺失序号、顺序颠倒同样计断点），
    碎片数 = 断点数 + 1。

    Args:
        image: 卷镜像或数据区原始字节
        live: 存活对象列表；给定时只统计匹配 (id, version) 的标记
        gap_allowance: 允许的额外间隙（默认 512，大于页头、小于簇）
        workers: 扫描线程数
        storage_age: 报告标签

    Returns:
        FragReport
    """
    logger = get_logger(__name__)
    if isinstance(image, VolumeImage):
        view = image.data_view()
    else:
        view = memoryview(image).toreadonly()

    try:
        hits = find_markers(view, workers)
    finally:
        view.release()

    report = FragReport(storage_age=storage_age)
    if len(hits) == 0:
        message = "未找到任何标记（可能是未格式化的镜像）"
        logger.warning(message)
        report.warnings.append(message)
        if live is not None:
            for obj in live:
                expected = obj.size_bytes // MARKER_INTERVAL if obj.size_bytes else 0
                report.objects[obj.object_id] = ObjectFrag(obj.object_id, expected, 0, 0)
        return report

    obj_field = hits[:, 0]
    ids = obj_field & np.uint64(ID_MASK)
    versions = obj_field >> np.uint64(ID_BITS)
    seqs = hits[:, 1]
    offsets = hits[:, 2]

    groups: Dict[Tuple[int, int], np.ndarray] = {}
    order = np.lexsort((seqs, obj_field))
    sorted_fields = obj_field[order]
    bounds = np.flatnonzero(np.diff(sorted_fields)) + 1
    for idx in np.split(order, bounds):
        key = (int(ids[idx[0]]), int(versions[idx[0]]))
        groups[key] = idx

    if live is not None:
        wanted = {obj.object_id: obj for obj in live}
    else:
        wanted = {}
        for (obj_id, version), idx in sorted(groups.items()):
            best = wanted.get(obj_id)
            if best is None or len(idx) >= len(groups[(obj_id, best.version)]):
                wanted[obj_id] = LiveObject(obj_id, version, None)

    stale = 0
    for obj_id, obj in sorted(wanted.items()):
        if obj.version is None:
            candidates = [(v, idx) for (i, v), idx in groups.items() if i == obj_id]
            idx = max(candidates, key=lambda t: (len(t[1]), t[0]))[1] if candidates else None
        else:
            idx = groups.get((obj_id, obj.version & VERSION_MASK))
        stale += sum(
            len(g) for (i, v), g in groups.items() if i == obj_id and (idx is None or g is not idx)
        )
        if idx is None:
            recovered = 0
            frags = 0
        else:
            obj_seqs = seqs[idx]
            recovered = len(np.unique(obj_seqs))
            if recovered != len(obj_seqs):
                report.warnings.append(f"对象 {obj_id} 有重复序号的标记")
            frags = _count_fragments(obj_seqs, offsets[idx], gap_allowance)
        if obj.size_bytes:
            expected = obj.size_bytes // MARKER_INTERVAL
        else:
            expected = int(seqs[idx].max()) + 1 if idx is not None else 0
        report.objects[obj_id] = ObjectFrag(obj_id, expected, recovered, frags)

    if stale:
        logger.info(f"过滤旧版本标记: {stale}")
    logger.info(
        f"扫描完成: 标记={len(hits)}, 对象={len(report.objects)}, "
        f"平均碎片={report.mean_fragments:.3f}"
    )
    return report


def validate_against_ntfs_style_report(
    report: FragReport, ground_truth: Optional[Dict[int, int]]
) -> ReportDiff:
    """
    与分配器真值逐对象比对

    Args:
        report: 扫描报告
        ground_truth: id → 碎片数；None 表示真值不可得

    Returns:
        ReportDiff；真值不可得时为空且标记为 informational

    Raises:
        ScanMismatchError: 两边对象集合不同
    """
    if ground_truth is None:
        return ReportDiff({}, informational=True)
    scanned = set(report.objects)
    truth = set(ground_truth)
    if scanned != truth:
        missing = sorted(truth - scanned)[:10]
        extra = sorted(scanned - truth)[:10]
        raise ScanMismatchError(f"对象集合不一致: 缺少={missing}, 多出={extra}")
    diff = {}
    for obj_id in sorted(scanned):
        delta = report.objects[obj_id].fragments - ground_truth[obj_id]
        if delta:
            diff[obj_id] = delta
    return ReportDiff(diff)


def write_frag_csv(report: FragReport, path: Path) -> Path:
    """写每对象碎片 CSV（首行是 schema 版本）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"#schema={FRAG_SCHEMA}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FRAG_COLUMNS)
        for obj_id in sorted(report.objects):
            o = report.objects[obj_id]
            writer.writerow([o.object_id, o.expected_markers, o.recovered_markers, o.fragments])
    return path


def write_frag_json(report: FragReport, path: Path) -> Path:
    """写扫描汇总 JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.summary(), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_live_csv(path: Path) -> List[LiveObject]:
    """
    读取存活对象列表

    CSV 必须有 object_id 列，version 和 size_bytes 列可选。
    """
    objects = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = (line for line in f if not line.startswith("#"))
        for row in csv.DictReader(rows):
            version = row.get("version")
            size = row.get("size_bytes")
            objects.append(
                LiveObject(
                    int(row["object_id"]),
                    int(version) if version not in (None, "") else None,
                    int(size) if size not in (None, "") else None,
                )
            )
    return objects


def write_live_csv(objects: Iterable[LiveObject], path: Path) -> Path:
    """写存活对象列表"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["object_id", "version", "size_bytes"])
        for obj in sorted(objects):
            writer.writerow([
                obj.object_id,
                "" if obj.version is None else obj.version,
                "" if obj.size_bytes is None else obj.size_bytes,
            ])
    return path
