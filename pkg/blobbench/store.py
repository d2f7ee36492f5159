"""存储核心模块

定义所有后端共享的卷镜像、放置记录、统计、故障注入和 BlobStore 接口。

卷镜像布局（全部小端）：

    [0, 64KB)                     固定镜像头（magic "BLOBVOL1" + 几何参数 + 区域偏移）
    [64KB, 64KB + metadata)       元数据区（id → BlobRecord 映射，后端写入）
    [data_offset, + capacity)     数据区（扫描器读取的唯一区域）
"""

import mmap
import struct
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

from blobbench.config import ConfigurationError, VolumeGeometry
from blobbench.logger import get_logger
from blobbench.utils import count_index_runs, count_runs

IMAGE_MAGIC = b"BLOBVOL1"
IMAGE_FORMAT_VERSION = 1
HEADER_BYTES = 65536

BACKEND_CODES = {"raw": 0, "extent": 1, "page": 2}
BACKEND_NAMES = {v: k for k, v in BACKEND_CODES.items()}

# magic, version, backend, cluster, page, page_header, capacity,
# metadata offset, metadata length, data offset, metadata used
_HEADER = struct.Struct("<8sHHIIIQQQQQ")
_HEADER_CRC = struct.Struct("<I")

# 元数据编码
_META_MAGIC = b"BLOBMETA"
_META_HEAD = struct.Struct("<8sII")  # magic, 记录数, 预留区段数
_META_RECORD = struct.Struct("<QQII")  # id, size, generation, 游程数
_META_RUN = struct.Struct("<QQ")  # 起始, 长度

Payload = Union[bytes, bytearray, memoryview, Iterable[bytes]]

# 释放空间的提交节奏：下限（追加请求数）与每多少字节容量加一次
_MIN_COMMIT_INTERVAL = 65
_COMMIT_INTERVAL_PER_BYTES = 32 * 1024 * 1024


class StoreError(Exception):
    """存储层错误基类"""
    pass


class VolumeFullError(StoreError):
    """空闲空间不足"""
    pass


class BlobNotFoundError(StoreError, KeyError):
    """对象不存在"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "对象不存在"


class InvariantViolation(StoreError):
    """内部不变量被破坏（重复释放、放置重叠、空间不守恒等）"""
    pass


class CrashInjected(StoreError):
    """故障注入点触发的模拟崩溃"""

    def __init__(self, cut_point: str):
        super().__init__(f"模拟崩溃: {cut_point}")
        self.cut_point = cut_point


class ImageFormatError(StoreError):
    """卷镜像头损坏或版本不匹配"""
    pass


@dataclass(frozen=True)
class Extent:
    """卷内一段连续字节（相对数据区起点）"""

    offset_bytes: int
    length_bytes: int

    @property
    def end(self) -> int:
        return self.offset_bytes + self.length_bytes


@dataclass(frozen=True)
class BlobRecord:
    """
    一个存活对象及其物理放置

    placement 在 extent 后端是 Extent 元组（总长度恰为 size_bytes），
    在 page 后端是页号元组（按链中位置排列）。
    """

    id: int
    size_bytes: int
    placement: Tuple
    generation: int


@dataclass
class StoreStats:
    """读写计数与各阶段耗时"""

    bytes_written: int = 0
    bytes_read: int = 0
    append_requests: int = 0
    puts: int = 0
    wall_time_per_phase: Dict[str, float] = field(default_factory=dict)

    def add_phase_time(self, phase: str, seconds: float) -> None:
        self.wall_time_per_phase[phase] = self.wall_time_per_phase.get(phase, 0.0) + seconds


@dataclass(frozen=True)
class AuditReport:
    """全卷审计结果（单位：字节）"""

    capacity_bytes: int
    live_bytes: int
    free_bytes: int
    pending_bytes: int
    reserved_bytes: int

    @property
    def accounted_bytes(self) -> int:
        return self.live_bytes + self.free_bytes + self.pending_bytes + self.reserved_bytes


class FaultInjector:
    """
    命名切点上的故障注入

    arm(name, hit) 之后，第 hit 次经过该切点时抛出 CrashInjected。
    """

    def __init__(self, cut_points: Sequence[str]):
        self.cut_points = tuple(cut_points)
        self._armed: Optional[str] = None
        self._remaining = 0
        self.hits: Dict[str, int] = {name: 0 for name in self.cut_points}

    def arm(self, cut_point: str, hit: int = 1) -> None:
        """
        设置崩溃点

        Raises:
            ConfigurationError: 切点名称未知或 hit < 1
        """
        if cut_point not in self.cut_points:
            raise ConfigurationError(
                f"未知的切点: {cut_point}，可选: {', '.join(self.cut_points)}"
            )
        if hit < 1:
            raise ConfigurationError(f"hit 必须 ≥ 1，当前为 {hit}")
        self._armed = cut_point
        self._remaining = hit

    def will_fire(self, cut_point: str) -> bool:
        """下一次经过 cut_point 是否会触发崩溃"""
        return self._armed == cut_point and self._remaining == 1

    def disarm(self) -> None:
        self._armed = None
        self._remaining = 0

    def check(self, cut_point: str) -> None:
        """经过切点；命中时抛出 CrashInjected"""
        self.hits[cut_point] = self.hits.get(cut_point, 0) + 1
        if self._armed != cut_point:
            return
        self._remaining -= 1
        if self._remaining == 0:
            self._armed = None
            raise CrashInjected(cut_point)


def iter_chunks(payload: Payload, write_buffer_bytes: int) -> Iterator[bytes]:
    """
    把负载切成 write_buffer_bytes 大小的顺序追加请求

    负载可以是字节串，也可以是任意长度块的迭代器（长度事先未知）。
    除最后一块外每块恰为 write_buffer_bytes。
    """
    if write_buffer_bytes <= 0:
        raise ConfigurationError(f"write_buffer_bytes 必须为正数: {write_buffer_bytes}")
    if isinstance(payload, (bytes, bytearray, memoryview)):
        view = memoryview(payload)
        for start in range(0, len(view), write_buffer_bytes):
            yield bytes(view[start:start + write_buffer_bytes])
        return

    pending = bytearray()
    for piece in payload:
        pending += piece
        while len(pending) >= write_buffer_bytes:
            yield bytes(pending[:write_buffer_bytes])
            del pending[:write_buffer_bytes]
    if pending:
        yield bytes(pending)


class VolumeImage:
    """
    扁平卷镜像

    后端可以是内存中的 bytearray，也可以是用 mmap 映射的单个文件。
    数据区读写均以数据区起点为 0 并做越界检查。
    """

    def __init__(
        self,
        geometry: VolumeGeometry,
        backend: str,
        buffer: Union[bytearray, mmap.mmap],
        path: Optional[Path] = None,
        file_handle=None,
    ):
        self.geometry = geometry
        self.backend = backend
        self.path = path
        self._buf = buffer
        self._file = file_handle
        self.metadata_offset = HEADER_BYTES
        self.metadata_length = geometry.resolved_metadata_bytes
        self.data_offset = HEADER_BYTES + self.metadata_length
        self.bytes_written = 0
        self.bytes_read = 0
        self.write_requests = 0
        self.metadata_used = 0

    @property
    def capacity_bytes(self) -> int:
        return self.geometry.capacity_bytes

    @property
    def total_bytes(self) -> int:
        return self.data_offset + self.capacity_bytes

    @classmethod
    def create(
        cls, geometry: VolumeGeometry, backend: str, path: Optional[Union[str, Path]] = None
    ) -> "VolumeImage":
        """
        格式化一个新镜像

        Args:
            geometry: 卷几何
            backend: "extent" / "page" / "raw"
            path: 镜像文件路径，None 表示内存镜像

        Returns:
            VolumeImage
        """
        if backend not in BACKEND_CODES:
            raise ConfigurationError(f"未知的后端: {backend}")
        total = HEADER_BYTES + geometry.resolved_metadata_bytes + geometry.capacity_bytes
        if path is None:
            image = cls(geometry, backend, bytearray(total))
        else:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            handle = open(path, "w+b")
            handle.truncate(total)
            image = cls(geometry, backend, mmap.mmap(handle.fileno(), total), path, handle)
        image._write_header()
        get_logger(__name__).info(
            f"格式化卷镜像: 后端={backend}, 容量={geometry.capacity_bytes}, "
            f"路径={path if path else '(内存)'}"
        )
        return image

    @classmethod
    def open(cls, path: Union[str, Path]) -> "VolumeImage":
        """
        打开已有镜像文件

        Raises:
            ImageFormatError: magic、版本或校验和不匹配
            FileNotFoundError: 文件不存在
        """
        path = Path(path)
        with open(path, "rb") as f:
            raw = f.read(_HEADER.size + _HEADER_CRC.size)
        geometry, backend, meta_used = cls._parse_header(raw)
        handle = open(path, "r+b")
        size = path.stat().st_size
        image = cls(geometry, backend, mmap.mmap(handle.fileno(), size), path, handle)
        if size < image.total_bytes:
            image.close()
            raise ImageFormatError(f"镜像文件被截断: {size} < {image.total_bytes}")
        image.metadata_used = meta_used
        return image

    @classmethod
    def from_bytes(cls, raw: bytes) -> "VolumeImage":
        """从完整的镜像字节构造内存镜像（只用于离线分析）"""
        geometry, backend, meta_used = cls._parse_header(raw[:_HEADER.size + _HEADER_CRC.size])
        image = cls(geometry, backend, bytearray(raw))
        image.metadata_used = meta_used
        return image

    @staticmethod
    def _parse_header(raw: bytes) -> Tuple[VolumeGeometry, str, int]:
        if len(raw) < _HEADER.size + _HEADER_CRC.size:
            raise ImageFormatError("镜像头不完整")
        body = raw[:_HEADER.size]
        (crc,) = _HEADER_CRC.unpack_from(raw, _HEADER.size)
        if zlib.crc32(body) != crc:
            raise ImageFormatError("镜像头校验和不匹配")
        (magic, version, backend_code, cluster, page, page_header, capacity,
         meta_off, meta_len, data_off, meta_used) = _HEADER.unpack(body)
        if magic != IMAGE_MAGIC:
            raise ImageFormatError(f"不是 blobbench 镜像: magic={magic!r}")
        if version != IMAGE_FORMAT_VERSION:
            raise ImageFormatError(f"不支持的镜像版本: {version}")
        if backend_code not in BACKEND_NAMES:
            raise ImageFormatError(f"未知的后端编码: {backend_code}")
        geometry = VolumeGeometry(
            capacity_bytes=capacity,
            cluster_bytes=cluster,
            page_bytes=page,
            page_header_bytes=page_header,
            metadata_bytes=meta_len,
        )
        if meta_off != HEADER_BYTES or data_off != HEADER_BYTES + meta_len:
            raise ImageFormatError("镜像区域偏移不一致")
        return geometry, BACKEND_NAMES[backend_code], meta_used

    def _write_header(self) -> None:
        g = self.geometry
        body = _HEADER.pack(
            IMAGE_MAGIC,
            IMAGE_FORMAT_VERSION,
            BACKEND_CODES[self.backend],
            g.cluster_bytes,
            g.page_bytes,
            g.page_header_bytes,
            g.capacity_bytes,
            self.metadata_offset,
            self.metadata_length,
            self.data_offset,
            self.metadata_used,
        )
        self._buf[0:len(body)] = body
        self._buf[len(body):len(body) + _HEADER_CRC.size] = _HEADER_CRC.pack(zlib.crc32(body))

    def _check_bounds(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.capacity_bytes:
            raise InvariantViolation(
                f"越界访问: offset={offset}, length={length}, capacity={self.capacity_bytes}"
            )

    def write(self, offset: int, data: bytes) -> None:
        """在数据区 offset 处写入"""
        self._check_bounds(offset, len(data))
        start = self.data_offset + offset
        self._buf[start:start + len(data)] = data
        self.bytes_written += len(data)
        self.write_requests += 1

    def read(self, offset: int, length: int) -> bytes:
        """从数据区 offset 处读取 length 字节"""
        self._check_bounds(offset, length)
        start = self.data_offset + offset
        self.bytes_read += length
        return bytes(self._buf[start:start + length])

    def data_view(self) -> memoryview:
        """数据区的只读视图（扫描器使用）"""
        return memoryview(self._buf)[self.data_offset:self.data_offset + self.capacity_bytes].toreadonly()

    def write_metadata(self, blob: bytes) -> None:
        """
        覆盖写入元数据区

        Raises:
            StoreError: 元数据超出元数据区大小
        """
        if len(blob) > self.metadata_length:
            raise StoreError(f"元数据区不足: 需要 {len(blob)}，可用 {self.metadata_length}")
        start = self.metadata_offset
        self._buf[start:start + len(blob)] = blob
        self.metadata_used = len(blob)
        self._write_header()

    def read_metadata(self) -> bytes:
        start = self.metadata_offset
        return bytes(self._buf[start:start + self.metadata_used])

    def to_bytes(self) -> bytes:
        """整个镜像的字节拷贝"""
        return bytes(self._buf[:self.total_bytes])

    def flush(self) -> None:
        if isinstance(self._buf, mmap.mmap):
            self._buf.flush()

    def close(self) -> None:
        if isinstance(self._buf, mmap.mmap):
            self._buf.flush()
            self._buf.close()
        if self._file is not None:
            self._file.close()
            self._file = None


def encode_metadata(records: Iterable[BlobRecord], reserved: Sequence[Extent] = ()) -> bytes:
    """
    编码元数据区内容

    布局：头（magic, 记录数, 预留区段数），每条记录（id, size, generation,
    游程数）后跟若干 (起始, 长度) 游程，最后是预留区段。extent 后端的游程单位
    是字节；page 后端的游程单位是页号。
    """
    records = list(records)
    out = bytearray(_META_HEAD.pack(_META_MAGIC, len(records), len(reserved)))
    for rec in records:
        runs = _placement_runs(rec.placement)
        out += _META_RECORD.pack(rec.id, rec.size_bytes, rec.generation, len(runs))
        for start, length in runs:
            out += _META_RUN.pack(start, length)
    for ext in reserved:
        out += _META_RUN.pack(ext.offset_bytes, ext.length_bytes)
    return bytes(out)


def decode_metadata(blob: bytes, backend: str) -> Tuple[Dict[int, BlobRecord], List[Extent]]:
    """
    解码元数据区内容

    Raises:
        ImageFormatError: 元数据损坏
    """
    if not blob:
        return {}, []
    try:
        magic, n_records, n_reserved = _META_HEAD.unpack_from(blob, 0)
        if magic != _META_MAGIC:
            raise ImageFormatError("元数据 magic 不匹配")
        pos = _META_HEAD.size
        records: Dict[int, BlobRecord] = {}
        for _ in range(n_records):
            obj_id, size, generation, n_runs = _META_RECORD.unpack_from(blob, pos)
            pos += _META_RECORD.size
            runs = []
            for _ in range(n_runs):
                runs.append(_META_RUN.unpack_from(blob, pos))
                pos += _META_RUN.size
            if backend == "page":
                placement = tuple(p for start, count in runs for p in range(start, start + count))
            else:
                placement = tuple(Extent(start, length) for start, length in runs)
            records[obj_id] = BlobRecord(obj_id, size, placement, generation)
        reserved = []
        for _ in range(n_reserved):
            reserved.append(Extent(*_META_RUN.unpack_from(blob, pos)))
            pos += _META_RUN.size
    except struct.error as e:
        raise ImageFormatError(f"元数据截断: {e}")
    return records, reserved


def _placement_runs(placement: Tuple) -> List[Tuple[int, int]]:
    if placement and isinstance(placement[0], Extent):
        return [(e.offset_bytes, e.length_bytes) for e in placement]
    runs: List[Tuple[int, int]] = []
    for page in placement:
        if runs and runs[-1][0] + runs[-1][1] == page:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((page, 1))
    return runs


def extent_fragments(placement: Sequence[Extent]) -> int:
    """extent 放置的碎片数（最大连续游程数）"""
    return count_runs((e.offset_bytes, e.end) for e in placement)


def page_fragments(pages: Sequence[int]) -> int:
    """页链的碎片数（连续页号的最大游程数）"""
    return count_index_runs(pages)


def default_commit_interval(capacity_bytes: int) -> int:
    """
    释放空间的默认提交间隔（追加请求数）

    随卷容量增长，取奇数以免与对象的块数对齐。

    Args:
        capacity_bytes: 数据区容量

    Returns:
        max(65, capacity / 32MB)，向上取奇数
    """
    return max(_MIN_COMMIT_INTERVAL, capacity_bytes // _COMMIT_INTERVAL_PER_BYTES) | 1


class BlobStore(ABC):
    """所有后端共同满足的对象存储接口"""

    backend_name = "abstract"
    cut_points: Tuple[str, ...] = ()

    def __init__(self):
        self.stats = StoreStats()
        self.injector = FaultInjector(self.cut_points)
        self.logger = get_logger(__name__)

    @abstractmethod
    def put(self, obj_id: int, payload: Payload, write_buffer_bytes: int) -> BlobRecord:
        """
        以安全写语义完整写入对象；对象已存在时整体覆盖

        Raises:
            VolumeFullError: 空间不足，该对象保持原状
        """

    @abstractmethod
    def get(self, obj_id: int) -> bytes:
        """
        读取最近一次完整提交的版本

        Raises:
            BlobNotFoundError: 对象不存在
        """

    @abstractmethod
    def delete(self, obj_id: int) -> None:
        """删除对象并按后端策略释放空间"""

    @abstractmethod
    def list(self) -> Set[int]:
        """存活对象 id 集合"""

    @abstractmethod
    def free_bytes(self) -> int:
        """当前可分配的空闲字节数"""

    @abstractmethod
    def ground_truth(self) -> Optional[Dict[int, int]]:
        """分配器视角的每对象碎片数；无法获知时返回 None"""

    def fragments(self, obj_id: int) -> Optional[int]:
        """单个对象的碎片数；无法获知时返回 None"""
        return None

    def read_cost(self, obj_id: int) -> Tuple[int, int]:
        """
        完整读取一个对象并给出代价

        Returns:
            (字节数, 寻道次数)，寻道次数等于碎片数
        """
        payload = self.get(obj_id)
        seeks = self.fragments(obj_id)
        return len(payload), seeks if seeks else 1

    def audit(self) -> Optional[AuditReport]:
        """全卷审计；无法审计的后端返回 None"""
        return None

    def internal_fragmentation_bytes(self) -> int:
        """因簇/页取整浪费的字节数"""
        return 0

    def image(self) -> Optional[VolumeImage]:
        """可供扫描的卷镜像；没有时返回 None"""
        return None

    def commit_frees(self) -> int:
        """
        让已释放但尚未提交的空间立即可重用

        Returns:
            提交的区段或页数；没有延迟释放的后端返回 0
        """
        return 0

    def drop_caches(self) -> None:
        """读测量前丢弃缓存（能做到时）"""

    def flush(self) -> None:
        """把内存状态持久化"""

    def close(self) -> None:
        self.flush()

    def _require(self, records: Dict[int, BlobRecord], obj_id: int) -> BlobRecord:
        record = records.get(obj_id)
        if record is None:
            raise BlobNotFoundError(f"对象不存在: {obj_id}")
        return record
