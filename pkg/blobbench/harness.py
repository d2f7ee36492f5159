"""基准测试驱动

按 OperationStream 在指定后端上执行 批量加载 → 读测量 → 老化 → 读测量 …，
每个读测量点调用扫描器统计碎片，结果写入 results/<cell>/。
另外提供安全写协议的崩溃注入矩阵。

驱动对存储的所有修改都在单线程中进行，只有扫描器内部可以并行。
"""

import csv
import json
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from blobbench.config import (
    CellConfig,
    ConfigurationError,
    DiskModel,
    ExperimentConfig,
    VolumeGeometry,
)
from blobbench.extent_store import ExtentStore
from blobbench.fs_store import CUT_POINTS as FS_CUT_POINTS
from blobbench.fs_store import FsStore, FsStoreConfig, recover_sweep
from blobbench.logger import get_logger
from blobbench.page_store import CUT_POINTS as PAGE_CUT_POINTS
from blobbench.page_store import PageStore
from blobbench.scanner import (
    FragReport,
    LiveObject,
    ScanMismatchError,
    make_payload,
    scan_image,
    validate_against_ntfs_style_report,
    write_frag_csv,
)
from blobbench.store import (
    BlobNotFoundError,
    BlobStore,
    CrashInjected,
    InvariantViolation,
    VolumeFullError,
    VolumeImage,
)
from blobbench.utils import KB, MB, ceil_div, make_rng, throughput_mb_s
from blobbench.wal import WriteAheadLog
from blobbench.workload import (
    AgeMark,
    BulkCreate,
    Create,
    Delete,
    Event,
    OperationStream,
    Read,
    SafeWrite,
    build_stream,
)

PHASES_SCHEMA = "blobbench.phases/1"
PHASE_COLUMNS = (
    "cell",
    "backend",
    "size_kind",
    "mean_object_bytes",
    "write_buffer_bytes",
    "capacity_bytes",
    "occupancy",
    "free_pool",
    "phase",
    "age_from",
    "age_to",
    "bytes_moved",
    "seeks",
    "elapsed_s",
    "throughput_mb_s",
    "mean_fragments",
    "fragments_per_64kb",
)
SUMMARY_SCHEMA = "blobbench.summary/1"

FREE_POOL_ADVISORY = 400
FREE_SPACE_ADVISORY = 0.10

# 崩溃测试与读采样的随机子流标识
CRASH_KEY = 0x4352
SAMPLE_KEY = 0x5244

# 每个写缓冲块都会经过一次的切点
PER_CHUNK_CUT_POINTS = ("after-write", "after-alloc-log", "after-chunk-write")

CRASH_CUT_POINTS = {"fs": FS_CUT_POINTS, "page": PAGE_CUT_POINTS}

VERDICTS = ("old", "new", "violation")


class HarnessError(RuntimeError):
    """驱动自身的错误（读取不存在的对象、空读样本等）"""
    pass


def age_label(age: Optional[Fraction]) -> str:
    """存储年龄的文本形式：整数年龄不带小数点"""
    if age is None:
        return ""
    if age.denominator == 1:
        return str(age.numerator)
    return format(float(age), "g")


@dataclass
class PhaseResult:
    """
    一个测量阶段

    phase 取 bulk_load / churn / read_pass。churn 阶段的吞吐是两次读测量之间
    的平均写吞吐；elapsed_s 按配置取模型耗时或墙钟耗时，wall_s 总是墙钟耗时。
    """

    phase: str
    age_from: Optional[Fraction]
    age_to: Optional[Fraction]
    bytes_moved: int
    seeks: int
    elapsed_s: float
    wall_s: float
    free_pool: float = 0.0
    frag_snapshot: Optional[FragReport] = None
    extra: Dict[str, int] = field(default_factory=dict)

    @property
    def throughput_mb_s(self) -> float:
        return throughput_mb_s(self.bytes_moved, self.elapsed_s)


@dataclass
class CellResult:
    """一个单元的运行结果"""

    cell: CellConfig
    stream_digest: str
    status: str = "ok"
    phases: List[PhaseResult] = field(default_factory=list)
    frag_reports: Dict[str, FragReport] = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)
    advisories: List[str] = field(default_factory=list)
    scan_differences: Dict[str, int] = field(default_factory=dict)
    ages_reached: Dict[str, str] = field(default_factory=dict)
    store_stats: Dict[str, Any] = field(default_factory=dict)

    def read_passes(self) -> List[PhaseResult]:
        return [p for p in self.phases if p.phase == "read_pass"]


@dataclass
class ExperimentMatrix:
    """
    实验矩阵

    工作负载相同的单元共用同一个 OperationStream，
    因此只有后端不同的单元执行完全相同的事件序列。
    """

    cells: List[CellConfig]
    results_dir: Path
    timing: str = "modeled"
    disk: DiskModel = field(default_factory=DiskModel)
    scan_workers: int = 1

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "ExperimentMatrix":
        return cls(
            cells=list(config.cells),
            results_dir=Path(config.results_dir),
            timing=config.timing,
            disk=config.disk,
            scan_workers=config.scan_workers,
        )

    def streams(self) -> Dict[str, OperationStream]:
        """单元名 → 操作流"""
        cache: Dict[str, OperationStream] = {}
        streams = {}
        for cell in self.cells:
            key = cell.workload.model_dump_json()
            if key not in cache:
                cache[key] = build_stream(cell.workload)
            streams[cell.name] = cache[key]
        return streams


def _elapsed(timing: str, disk: DiskModel, num_bytes: int, seeks: int, wall_s: float) -> float:
    if timing == "wall":
        return wall_s
    return disk.elapsed(num_bytes, seeks)


def make_store(cell: CellConfig, workdir: Optional[Path] = None) -> BlobStore:
    """
    为单元创建一个全新的存储

    Args:
        cell: 单元配置
        workdir: fs 后端存放对象文件的目录

    Returns:
        空的 BlobStore（extent 后端按 shatter_stride_bytes 预先钉住簇）

    Raises:
        ConfigurationError: fs 后端缺少工作目录
    """
    if cell.backend == "fs":
        if workdir is None:
            raise ConfigurationError("fs 后端需要工作目录")
        root = Path(workdir) / "objects"
        if root.exists():
            shutil.rmtree(root)
        return FsStore(FsStoreConfig(root_directory=str(root), fsync_policy=cell.fsync_policy))

    image = VolumeImage.create(cell.geometry, cell.backend, path=cell.image_path)
    if cell.backend == "extent":
        store = ExtentStore(image, cell.fit_policy, cell.commit_interval)
        if cell.shatter_stride_bytes:
            store.shatter(cell.shatter_stride_bytes)
        return store

    wal_path = None
    if cell.image_path:
        wal_path = Path(cell.image_path).with_suffix(".wal")
        wal_path.unlink(missing_ok=True)
    sync = cell.fsync_policy == "flush_before_rename"
    return PageStore(image, WriteAheadLog(wal_path, sync=sync), cell.commit_interval)


def measure_read_pass(
    store: BlobStore,
    ids: Sequence[int],
    sample_count: Optional[int] = None,
    rng=None,
    disk: Optional[DiskModel] = None,
    timing: str = "modeled",
    age: Optional[Fraction] = None,
) -> PhaseResult:
    """
    一次读测量：完整读取每个样本对象

    寻道次数 = 各样本对象的碎片数之和（不可得时每个对象按 1 次计）。

    Args:
        store: 静止状态的存储
        ids: 要读取的对象（sample_count 为 None 时原样使用）
        sample_count: 从 ids 中均匀有放回抽取的数量
        rng: 抽样用的随机数生成器
        disk: 磁盘模型
        timing: modeled 或 wall
        age: 该测量点的存储年龄

    Returns:
        read_pass 阶段结果

    Raises:
        HarnessError: 样本为空或读取了不存在的对象
    """
    logger = get_logger(__name__)
    ids = list(ids)
    if not ids:
        raise HarnessError("读样本为空，无法计算吞吐")
    if sample_count is not None:
        if rng is None:
            rng = make_rng(0, SAMPLE_KEY)
        ids = [ids[i] for i in rng.integers(0, len(ids), size=sample_count)]
    if disk is None:
        disk = DiskModel()

    store.drop_caches()
    total = 0
    seeks = 0
    start = time.perf_counter()
    for obj_id in ids:
        try:
            num_bytes, obj_seeks = store.read_cost(obj_id)
        except BlobNotFoundError as e:
            raise HarnessError(f"读取不存在的对象: {obj_id}") from e
        total += num_bytes
        seeks += obj_seeks
    wall = time.perf_counter() - start

    result = PhaseResult(
        phase="read_pass",
        age_from=age,
        age_to=age,
        bytes_moved=total,
        seeks=seeks,
        elapsed_s=_elapsed(timing, disk, total, seeks, wall),
        wall_s=wall,
    )
    logger.info(
        f"读测量完成: 年龄={age_label(age)}, 对象数={len(ids)}, 寻道={seeks}, "
        f"吞吐={result.throughput_mb_s:.2f}MB/s"
    )
    return result


def _counters(store: BlobStore) -> Dict[str, int]:
    counters = {"append_requests": store.stats.append_requests, "puts": store.stats.puts}
    if isinstance(store, PageStore):
        counters["data_bytes_written"] = store.data_bytes_written
        counters["wal_bytes_appended"] = store.wal.bytes_appended
        counters["checkpoints"] = store.wal.checkpoints
    return counters


class CellRunner:
    """在一个后端上执行一个单元的操作流"""

    def __init__(
        self,
        cell: CellConfig,
        stream: OperationStream,
        timing: str = "modeled",
        disk: Optional[DiskModel] = None,
        scan_workers: int = 1,
        workdir: Optional[Path] = None,
    ):
        self.cell = cell
        self.stream = stream
        self.spec = stream.spec
        self.timing = timing
        self.disk = disk or DiskModel()
        self.scan_workers = scan_workers
        self.workdir = workdir
        self.logger = get_logger(__name__)

        self._versions: Dict[int, int] = {}
        self._sizes: Dict[int, int] = {}
        self._phase_bytes = 0
        self._phase_seeks = 0
        self._phase_wall = 0.0
        self._phase_counters: Dict[str, int] = {}
        self._writes_since_checkpoint = 0

    def run(self) -> CellResult:
        """
        执行整个单元

        卷满不会向外抛出：单元标记为 failed 并记录诊断信息。

        Returns:
            CellResult
        """
        result = CellResult(cell=self.cell, stream_digest=self.stream.digest())
        self.logger.info(
            f"开始运行单元: 名称={self.cell.name}, 后端={self.cell.backend}, "
            f"事件数={len(self.stream)}"
        )
        store = make_store(self.cell, self.workdir)
        try:
            self._drive(store, result)
            audit = store.audit()
            if audit is not None:
                result.store_stats["audit"] = {
                    "capacity_bytes": audit.capacity_bytes,
                    "live_bytes": audit.live_bytes,
                    "free_bytes": audit.free_bytes,
                    "pending_bytes": audit.pending_bytes,
                    "reserved_bytes": audit.reserved_bytes,
                }
        except VolumeFullError as e:
            result.status = "failed"
            live = sum(self._sizes.values())
            capacity = self.spec.volume_capacity_bytes
            message = (
                f"卷已满（占用率过高）: {e}; 存活字节={live}, "
                f"占用率={live / capacity:.4f}, 空闲字节={store.free_bytes()}"
            )
            result.diagnostics.append(message)
            self.logger.error(f"单元失败: 名称={self.cell.name}, {message}")
        finally:
            result.store_stats.update(self._final_stats(store))
            store.close()
            if isinstance(store, FsStore):
                shutil.rmtree(store.root, ignore_errors=True)
        self.logger.info(f"单元运行结束: 名称={self.cell.name}, 状态={result.status}")
        return result

    def _final_stats(self, store: BlobStore) -> Dict[str, Any]:
        stats: Dict[str, Any] = {
            "bytes_written": store.stats.bytes_written,
            "bytes_read": store.stats.bytes_read,
            "append_requests": store.stats.append_requests,
            "puts": store.stats.puts,
            "internal_fragmentation_bytes": store.internal_fragmentation_bytes(),
        }
        if isinstance(store, PageStore):
            stats["data_bytes_written"] = store.data_bytes_written
            stats["wal_bytes_appended"] = store.wal.bytes_appended
            stats["checkpoints"] = store.wal.checkpoints
        if isinstance(store, ExtentStore):
            stats["high_water_bytes"] = store.high_water_bytes
        return stats

    def _drive(self, store: BlobStore, result: CellResult) -> None:
        reads: List[int] = []
        mark: Optional[AgeMark] = None
        phase = "bulk_load"
        age_from: Optional[Fraction] = None
        self._start_phase(store)

        for index, event in enumerate(self.stream):
            if isinstance(event, Read):
                reads.append(event.id)
                continue
            if reads:
                self._read_pass(store, mark, reads, result)
                reads = []
                self._start_phase(store)
            if isinstance(event, AgeMark):
                self._close_write_phase(store, phase, age_from, event.target, result)
                if phase == "bulk_load":
                    self._after_bulk_load(store, result)
                if isinstance(store, PageStore):
                    store.checkpoint()
                    self._writes_since_checkpoint = 0
                mark = event
                result.ages_reached[age_label(event.target)] = str(event.age)
                phase = "churn"
                age_from = event.target
                continue
            try:
                self._apply(store, event)
            except VolumeFullError as e:
                raise VolumeFullError(f"事件 #{index} {type(event).__name__}: {e}") from e
        if reads:
            self._read_pass(store, mark, reads, result)

    def _start_phase(self, store: BlobStore) -> None:
        self._phase_bytes = 0
        self._phase_seeks = 0
        self._phase_wall = 0.0
        self._phase_counters = _counters(store)

    def _close_write_phase(
        self,
        store: BlobStore,
        phase: str,
        age_from: Optional[Fraction],
        age_to: Fraction,
        result: CellResult,
    ) -> None:
        now = _counters(store)
        extra = {k: now[k] - self._phase_counters.get(k, 0) for k in now}
        record = PhaseResult(
            phase=phase,
            age_from=age_from,
            age_to=age_to,
            bytes_moved=self._phase_bytes,
            seeks=self._phase_seeks,
            elapsed_s=_elapsed(self.timing, self.disk, self._phase_bytes, self._phase_seeks, self._phase_wall),
            wall_s=self._phase_wall,
            free_pool=self._free_pool(store),
            extra=extra,
        )
        result.phases.append(record)
        self.logger.info(
            f"写阶段结束: 阶段={phase}, 年龄 {age_label(age_from) or '-'} → {age_label(age_to)}, "
            f"字节={record.bytes_moved}, 吞吐={record.throughput_mb_s:.2f}MB/s"
        )

    def _free_pool(self, store: BlobStore) -> float:
        return store.free_bytes() / self.spec.size_dist.mean_bytes

    def _after_bulk_load(self, store: BlobStore, result: CellResult) -> None:
        if isinstance(store, ExtentStore) and self.cell.shatter_stride_bytes:
            store.release_ballast()
        free = store.free_bytes()
        pool = self._free_pool(store)
        if pool < FREE_POOL_ADVISORY:
            message = f"空闲池只有 {pool:.1f} 个对象（< {FREE_POOL_ADVISORY}），碎片化会明显加重"
            result.advisories.append(message)
            self.logger.warning(message)
        if store.image() is not None and free < FREE_SPACE_ADVISORY * self.spec.volume_capacity_bytes:
            message = f"空闲空间 {free} 字节不足容量的 {FREE_SPACE_ADVISORY:.0%}"
            result.advisories.append(message)
            self.logger.warning(message)

    def _apply(self, store: BlobStore, event: Event) -> None:
        if isinstance(event, Delete):
            store.delete(event.id)
            self._versions.pop(event.id, None)
            self._sizes.pop(event.id, None)
            return
        if isinstance(event, (BulkCreate, Create)):
            obj_id, size, version = event.id, event.size, 1
        elif isinstance(event, SafeWrite):
            obj_id, size = event.id, event.new_size
            version = self._versions[obj_id] + 1
        else:
            raise HarnessError(f"未知事件: {event!r}")

        payload = make_payload(obj_id, size, self.spec.seed, version)
        start = time.perf_counter()
        store.put(obj_id, payload, self.spec.write_buffer_bytes)
        self._phase_wall += time.perf_counter() - start
        self._versions[obj_id] = version
        self._sizes[obj_id] = size
        self._phase_bytes += size
        self._phase_seeks += store.fragments(obj_id) or 1

        if isinstance(event, BulkCreate):
            # 批量加载在空闲卷上进行，每个对象写完即提交
            store.commit_frees()

        if isinstance(store, PageStore) and not isinstance(event, BulkCreate):
            # 每一轮老化（约等于存活对象数次写）写一次检查点
            self._writes_since_checkpoint += 1
            if self._writes_since_checkpoint >= len(self._versions):
                store.checkpoint()
                self._writes_since_checkpoint = 0

    def _read_pass(
        self, store: BlobStore, mark: Optional[AgeMark], reads: List[int], result: CellResult
    ) -> None:
        if mark is None:
            raise HarnessError("读事件之前没有测量点")
        label = age_label(mark.target)
        report = None
        image = store.image()
        if image is not None:
            live = [LiveObject(i, self._versions[i], self._sizes[i]) for i in sorted(self._versions)]
            report = scan_image(
                image,
                live,
                gap_allowance=self.cell.gap_allowance,
                workers=self.scan_workers,
                storage_age=label,
            )
            result.frag_reports[label] = report
            try:
                diff = validate_against_ntfs_style_report(report, store.ground_truth())
                result.scan_differences[label] = len(diff.differences)
                if not diff.empty:
                    message = f"年龄 {label}: 扫描结果与分配器真值不一致的对象数={len(diff.differences)}"
                    result.diagnostics.append(message)
                    self.logger.error(message)
            except ScanMismatchError as e:
                result.diagnostics.append(f"年龄 {label}: {e}")
                self.logger.error(f"扫描对象集合不一致: 年龄={label}, {e}")

        phase = measure_read_pass(store, reads, disk=self.disk, timing=self.timing, age=mark.target)
        phase.frag_snapshot = report
        phase.free_pool = self._free_pool(store)
        result.phases.append(phase)


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def phase_rows(result: CellResult) -> List[List[str]]:
    """把单元结果展开成 phases.csv 的数据行"""
    cell = result.cell
    spec = cell.workload
    rows = []
    for p in result.phases:
        report = p.frag_snapshot
        rows.append([
            cell.name,
            cell.backend,
            spec.size_dist.kind,
            str(spec.size_dist.mean_bytes),
            str(spec.write_buffer_bytes),
            str(spec.volume_capacity_bytes),
            str(spec.target_occupancy),
            f"{p.free_pool:.2f}",
            p.phase,
            age_label(p.age_from),
            age_label(p.age_to),
            str(p.bytes_moved),
            str(p.seeks),
            _fmt(p.elapsed_s),
            _fmt(p.throughput_mb_s),
            _fmt(report.mean_fragments) if report is not None else "",
            _fmt(report.fragments_per_64kb) if report is not None else "",
        ])
    return rows


def write_cell_results(result: CellResult, out_dir: Path) -> Path:
    """
    写出单元结果：phases.csv、frag_age<k>.csv、summary.json

    Returns:
        单元结果目录
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "phases.csv", "w", encoding="utf-8", newline="") as f:
        f.write(f"#schema={PHASES_SCHEMA}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PHASE_COLUMNS)
        writer.writerows(phase_rows(result))

    for label, report in result.frag_reports.items():
        write_frag_csv(report, out_dir / f"frag_age{label}.csv")

    summary = {
        "schema": SUMMARY_SCHEMA,
        "cell": result.cell.model_dump(mode="json"),
        "stream_digest": result.stream_digest,
        "status": result.status,
        "diagnostics": result.diagnostics,
        "advisories": result.advisories,
        "ages_reached": result.ages_reached,
        "scan_differences": result.scan_differences,
        "wall_clock_s": {
            f"{p.phase}@{age_label(p.age_to)}": round(p.wall_s, 6) for p in result.phases
        },
        "phases": [
            {
                "phase": p.phase,
                "age_from": age_label(p.age_from),
                "age_to": age_label(p.age_to),
                "wall_s": round(p.wall_s, 6),
                "seeks": p.seeks,
                **p.extra,
            }
            for p in result.phases
        ],
        "store": result.store_stats,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return out_dir


def run_cell(
    cell: CellConfig,
    stream: Optional[OperationStream] = None,
    timing: str = "modeled",
    disk: Optional[DiskModel] = None,
    scan_workers: int = 1,
    workdir: Optional[Path] = None,
) -> CellResult:
    """运行单个单元；未给出操作流时由单元的工作负载生成"""
    if stream is None:
        stream = build_stream(cell.workload)
    runner = CellRunner(cell, stream, timing, disk, scan_workers, workdir)
    return runner.run()


def run_experiment(matrix: ExperimentMatrix) -> Dict[str, CellResult]:
    """
    运行整个实验矩阵

    每个单元都从全新格式化的卷开始；结果写到 results_dir/<cell>/。

    Returns:
        单元名 → CellResult
    """
    logger = get_logger(__name__)
    streams = matrix.streams()
    results: Dict[str, CellResult] = {}
    for cell in matrix.cells:
        out_dir = matrix.results_dir / cell.name
        result = run_cell(
            cell,
            streams[cell.name],
            timing=matrix.timing,
            disk=matrix.disk,
            scan_workers=matrix.scan_workers,
            workdir=out_dir,
        )
        write_cell_results(result, out_dir)
        results[cell.name] = result
    failed = [name for name, r in results.items() if r.status != "ok"]
    logger.info(f"实验矩阵完成: 单元数={len(results)}, 失败={failed}")
    return results


# ---------------------------------------------------------------------------
# 崩溃注入
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrashVerdict:
    """一次崩溃注入的判定"""

    backend: str
    cut_point: Optional[str]
    seed: int
    hit: int
    verdict: str
    crashed: bool
    leaked: int = 0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.verdict != "violation"


@dataclass
class CrashMatrix:
    """一个后端上 切点 × 种子 的崩溃注入结果"""

    backend: str
    verdicts: List[CrashVerdict] = field(default_factory=list)

    @property
    def violations(self) -> List[CrashVerdict]:
        return [v for v in self.verdicts if not v.ok]

    def counts(self) -> Dict[str, Dict[str, int]]:
        """切点 → {old, new, violation} 计数"""
        table: Dict[str, Dict[str, int]] = {}
        for v in self.verdicts:
            row = table.setdefault(v.cut_point or "none", {k: 0 for k in VERDICTS})
            row[v.verdict] += 1
        return table

    def to_dict(self) -> Dict[str, Any]:
        return {
            "backend": self.backend,
            "runs": len(self.verdicts),
            "violations": len(self.violations),
            "counts": self.counts(),
            "violation_details": [
                {"cut_point": v.cut_point, "seed": v.seed, "hit": v.hit, "detail": v.detail}
                for v in self.violations
            ],
        }


def crash_cut_points(store_kind: str) -> Tuple[str, ...]:
    """
    后端的全部切点

    Raises:
        ConfigurationError: 后端不支持崩溃注入
    """
    if store_kind not in CRASH_CUT_POINTS:
        raise ConfigurationError(
            f"后端 {store_kind} 不支持崩溃注入，可选: {', '.join(CRASH_CUT_POINTS)}"
        )
    return CRASH_CUT_POINTS[store_kind]


def _crash_geometry() -> VolumeGeometry:
    return VolumeGeometry(capacity_bytes=4 * MB)


def _open_crash_store(store_kind: str, workdir: Path, image: Optional[VolumeImage]) -> BlobStore:
    if store_kind == "fs":
        return FsStore(FsStoreConfig(root_directory=str(workdir / "objects")))
    return PageStore(image, WriteAheadLog(workdir / "meta.wal"))


def _judge(
    store: BlobStore, target: int, old: bytes, new: bytes, neighbors: Dict[int, bytes]
) -> Tuple[str, str]:
    for obj_id, payload in neighbors.items():
        try:
            if store.get(obj_id) != payload:
                return "violation", f"相邻对象 {obj_id} 内容被破坏"
        except (BlobNotFoundError, InvariantViolation) as e:
            return "violation", f"相邻对象 {obj_id} 不可读: {e}"
    try:
        data = store.get(target)
    except (BlobNotFoundError, InvariantViolation) as e:
        return "violation", f"目标对象不可读: {e}"
    if data == old:
        return "old", ""
    if data == new:
        return "new", ""
    return "violation", "读到新旧混合的内容"


def inject_crash(
    store_kind: str,
    cut_point: Optional[str],
    then_recover: bool = True,
    seed: int = 0,
    hit: Optional[int] = None,
    workdir: Optional[Union[str, Path]] = None,
    write_buffer_bytes: int = 64 * KB,
) -> CrashVerdict:
    """
    在一次安全写的指定切点注入崩溃，并判定恢复后的可见状态

    场景：两个相邻对象与一个目标对象已写入，然后对目标对象做一次安全写。
    崩溃后丢弃内存状态，只从持久状态（目录 / 镜像 + 日志）重新打开。

    Args:
        store_kind: fs 或 page
        cut_point: 切点名称；None 表示不注入的对照运行
        then_recover: 是否先执行恢复（清理临时文件 / 截断日志并写检查点）
        seed: 决定对象大小与命中次数的种子
        hit: 第几次经过切点时崩溃，默认按种子在写缓冲块数内随机
        workdir: 临时目录的父目录
        write_buffer_bytes: 写缓冲

    Returns:
        CrashVerdict，verdict ∈ {old, new, violation}

    Raises:
        ConfigurationError: 后端或切点未知
    """
    cut_points = crash_cut_points(store_kind)
    if cut_point is not None and cut_point not in cut_points:
        raise ConfigurationError(f"未知的切点: {cut_point}，可选: {', '.join(cut_points)}")

    rng = make_rng(seed, CRASH_KEY)
    sizes = [int(rng.integers(16, 257)) * KB for _ in range(4)]
    checkpoint_first = bool(rng.integers(0, 2))
    old = make_payload(2, sizes[1], seed, 1)
    new = make_payload(2, sizes[3], seed, 2)
    neighbors = {1: make_payload(1, sizes[0], seed, 1), 3: make_payload(3, sizes[2], seed, 1)}
    if hit is None:
        chunks = ceil_div(len(new), write_buffer_bytes)
        hit = int(rng.integers(1, chunks + 1)) if cut_point in PER_CHUNK_CUT_POINTS else 1

    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        image = VolumeImage.create(_crash_geometry(), "page") if store_kind == "page" else None
        store = _open_crash_store(store_kind, tmp, image)
        store.put(1, neighbors[1], write_buffer_bytes)
        store.put(2, old, write_buffer_bytes)
        store.put(3, neighbors[3], write_buffer_bytes)
        if isinstance(store, PageStore) and checkpoint_first:
            store.checkpoint()

        crashed = False
        if cut_point is not None:
            store.injector.arm(cut_point, hit)
        try:
            store.put(2, new, write_buffer_bytes)
            if isinstance(store, PageStore):
                store.checkpoint()
        except CrashInjected:
            crashed = True
        store.injector.disarm()
        del store

        leaked = 0
        try:
            if store_kind == "fs":
                root = tmp / "objects"
                if then_recover:
                    recover_sweep(root)
                view = FsStore(FsStoreConfig(root_directory=str(root)))
                if then_recover:
                    leaked = view.temp_files()
            else:
                view = PageStore.recover(image, WriteAheadLog(tmp / "meta.wal"), repair=then_recover)
                if then_recover:
                    leaked = view.leaked_pages()
                    view.audit()
        except InvariantViolation as e:
            return CrashVerdict(store_kind, cut_point, seed, hit, "violation", crashed, leaked, str(e))

        verdict, detail = _judge(view, 2, old, new, neighbors)
        if leaked:
            verdict, detail = "violation", f"恢复后残留 {leaked} 个泄漏页/临时文件"

    return CrashVerdict(store_kind, cut_point, seed, hit, verdict, crashed, leaked, detail)


def crash_matrix(
    store_kind: str,
    seeds: int = 250,
    base_seed: int = 0,
    then_recover: bool = True,
    workdir: Optional[Union[str, Path]] = None,
) -> CrashMatrix:
    """
    对后端的每个切点运行 seeds 个随机种子

    Returns:
        CrashMatrix
    """
    logger = get_logger(__name__)
    matrix = CrashMatrix(backend=store_kind)
    for cut_point in crash_cut_points(store_kind):
        for i in range(seeds):
            seed = (base_seed + i) & 0xFFFFFFFFFFFFFFFF
            matrix.verdicts.append(
                inject_crash(store_kind, cut_point, then_recover, seed=seed, workdir=workdir)
            )
    if matrix.violations:
        logger.error(f"崩溃矩阵发现违规: 后端={store_kind}, 数量={len(matrix.violations)}")
    logger.info(f"崩溃矩阵完成: 后端={store_kind}, 运行次数={len(matrix.verdicts)}")
    return matrix
