"""page 后端

模拟数据库的行外大对象存储：对象存放在固定大小页组成的链上，
元数据通过批量日志模式的预写日志提交，对象内容只写一次、不进日志。
"""

import struct
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from blobbench.config import ConfigurationError
from blobbench.logger import get_logger
from blobbench.store import (
    AuditReport,
    BlobRecord,
    BlobStore,
    InvariantViolation,
    Payload,
    StoreError,
    VolumeFullError,
    VolumeImage,
    default_commit_interval,
    encode_metadata,
    iter_chunks,
    page_fragments,
)
from blobbench.utils import ceil_div
from blobbench.wal import (
    CommitEntry,
    PageListEntry,
    WalKind,
    WriteAheadLog,
    encode_commit,
    encode_page_list,
    replay,
)

PAGE_MAGIC = b"BLOBPAGE"
# magic, blob id, generation, 链中位置, 页内负载长度, crc32(前 28 字节)
_PAGE_HEADER = struct.Struct("<8sQIII")
_PAGE_CRC = struct.Struct("<I")

# 标记间隔；页内负载不足一个间隔的尾页不含标记
_MARKER_INTERVAL = 1024

CUT_POINTS = (
    "after-alloc-log",
    "after-chunk-write",
    "before-commit-log",
    "mid-commit-log",
    "after-commit-log",
    "after-free-log",
    "before-checkpoint-replace",
)

_SEARCH_WINDOW = 4096


class PageAllocator:
    """
    页分配器

    空闲位图 + 游标：游标之前的页全部已占用，分配总是取编号最小的空闲页。
    延迟释放的页记在 pending_map 中，commit_frees() 之后才回到空闲位图。
    """

    def __init__(self, n_pages: int):
        self.n_pages = n_pages
        self.free_map = np.ones(n_pages, dtype=bool)
        self.pending_map = np.zeros(n_pages, dtype=bool)
        self.free_count = n_pages
        self.pending_count = 0
        self.cursor = 0

    def page_alloc(self, n_pages: int) -> List[int]:
        """
        分配编号最小的 n_pages 个空闲页

        Raises:
            InvariantViolation: n_pages < 1
            VolumeFullError: 空闲页不足，位图保持不变
        """
        if n_pages < 1:
            raise InvariantViolation(f"页数必须 ≥ 1: {n_pages}")
        if n_pages > self.free_count:
            raise VolumeFullError(f"卷已满: 需要 {n_pages} 页，空闲 {self.free_count} 页")

        found: List[int] = []
        start = self.cursor
        window = _SEARCH_WINDOW
        while len(found) < n_pages and start < self.n_pages:
            end = min(self.n_pages, start + window)
            hits = np.flatnonzero(self.free_map[start:end])
            found.extend(int(h) + start for h in hits[:n_pages - len(found)])
            start = end
            window *= 2

        pages = found[:n_pages]
        self.free_map[pages] = False
        self.free_count -= n_pages
        if pages[0] == self.cursor:
            self._advance_cursor()
        return pages

    def _advance_cursor(self) -> None:
        """把游标移到第一个空闲页"""
        start = self.cursor
        window = _SEARCH_WINDOW
        while start < self.n_pages:
            end = min(self.n_pages, start + window)
            first = int(np.argmax(self.free_map[start:end]))
            if self.free_map[start + first]:
                self.cursor = start + first
                return
            start = end
            window *= 2
        self.cursor = self.n_pages

    def free(self, pages: Sequence[int], deferred: bool = False) -> None:
        """
        释放页

        Args:
            pages: 页号
            deferred: True 时先放入 pending，提交后才能重新分配

        Raises:
            InvariantViolation: 页已经空闲或已在 pending 中（重复释放）
        """
        if not pages:
            return
        idx = np.asarray(pages, dtype=np.int64)
        if self.free_map[idx].any() or self.pending_map[idx].any():
            raise InvariantViolation("重复释放页")
        if deferred:
            self.pending_map[idx] = True
            self.pending_count += len(pages)
            return
        self.free_map[idx] = True
        self.free_count += len(pages)
        self.cursor = min(self.cursor, int(idx.min()))

    def commit_frees(self) -> int:
        """
        把 pending 中的页放回空闲位图

        Returns:
            提交的页数
        """
        if not self.pending_count:
            return 0
        idx = np.flatnonzero(self.pending_map)
        self.pending_map[idx] = False
        self.free_map[idx] = True
        self.free_count += len(idx)
        self.pending_count = 0
        self.cursor = min(self.cursor, int(idx[0]))
        return len(idx)

    def mark_used(self, pages: Sequence[int]) -> None:
        """恢复时把已提交链上的页标记为占用"""
        if not pages:
            return
        idx = np.asarray(pages, dtype=np.int64)
        if not self.free_map[idx].all():
            raise InvariantViolation("已提交的页链相互重叠")
        self.free_map[idx] = False
        self.free_count -= len(pages)
        self.cursor = 0
        self._advance_cursor()


@dataclass(frozen=True)
class SpaceEstimate:
    """整理所需空间与当前可用空间"""

    required_pages: int
    available_pages: int
    page_bytes: int

    @property
    def required_bytes(self) -> int:
        return self.required_pages * self.page_bytes

    @property
    def available_bytes(self) -> int:
        return self.available_pages * self.page_bytes

    @property
    def shortfall_bytes(self) -> int:
        return max(0, self.required_bytes - self.available_bytes)


class DefragRefused(StoreError):
    """空闲空间不足，拒绝整理"""

    def __init__(self, message: str, estimate: SpaceEstimate):
        super().__init__(message)
        self.estimate = estimate


class PageStore(BlobStore):
    """page 后端"""

    backend_name = "page"
    cut_points = CUT_POINTS

    def __init__(self, image: VolumeImage, wal: WriteAheadLog, commit_interval: Optional[int] = None):
        """
        在空卷上初始化 page 后端

        Args:
            image: 卷镜像
            wal: 预写日志（存放在数据区之外）
            commit_interval: 每多少次追加请求提交一次释放的页，默认按容量计算
        """
        super().__init__()
        g = image.geometry
        self._image = image
        self.wal = wal
        self.page_bytes = g.page_bytes
        self.header_bytes = g.page_header_bytes
        self.usable_bytes = g.page_usable_bytes
        self.allocator = PageAllocator(image.capacity_bytes // g.page_bytes)
        if commit_interval is not None and commit_interval < 1:
            raise ConfigurationError(f"commit_interval 必须 ≥ 1: {commit_interval}")
        self.commit_interval = commit_interval or default_commit_interval(image.capacity_bytes)
        self._appends_since_commit = 0
        self._records: Dict[int, BlobRecord] = {}
        self.data_bytes_written = 0
        self.logger = get_logger(__name__)
        self.logger.info(
            f"page 后端初始化: 页数={self.allocator.n_pages}, 页大小={self.page_bytes}, "
            f"页头={self.header_bytes}, 提交间隔={self.commit_interval}"
        )

    def chain_length(self, size_bytes: int) -> int:
        """链长 = ceil(size / 每页可用字节)"""
        return ceil_div(size_bytes, self.usable_bytes)

    def _page_bytes_for(self, obj_id: int, generation: int, position: int, data: bytes) -> bytes:
        head = _PAGE_HEADER.pack(PAGE_MAGIC, obj_id, generation, position, len(data))
        header = head + _PAGE_CRC.pack(zlib.crc32(head))
        pad_header = bytes(self.header_bytes - len(header))
        pad_tail = bytes(self.usable_bytes - len(data))
        return header + pad_header + data + pad_tail

    def _write_page(self, page: int, obj_id: int, generation: int, position: int, data: bytes) -> None:
        self._image.write(page * self.page_bytes, self._page_bytes_for(obj_id, generation, position, data))
        self.data_bytes_written += self.page_bytes

    def put(self, obj_id: int, payload: Payload, write_buffer_bytes: int) -> BlobRecord:
        return self.put_blob(obj_id, payload, write_buffer_bytes)

    def put_blob(
        self,
        obj_id: int,
        payload: Payload,
        buffer_bytes: int,
        generation: Optional[int] = None,
    ) -> BlobRecord:
        """
        安全写一个对象

        日志顺序：每块 AllocPages → 数据页写入（不记日志）→ CommitBlob → FreePages(旧链)。
        数据页只在写满或对象结束时写一次，每次写整页。旧链的页要等下一次提交
        （每 commit_interval 次追加请求，或检查点）才能重新分配。

        Args:
            obj_id: 对象 id
            payload: 负载（字节串或块迭代器）
            buffer_bytes: 写缓冲大小
            generation: 指定新版本号（整理复制时沿用原版本），默认旧版本 + 1

        Raises:
            VolumeFullError: 新链与旧链无法同时放下，旧版本保持可见
        """
        old = self._records.get(obj_id)
        if generation is None:
            generation = old.generation + 1 if old else 1

        chain: List[int] = []
        tail = bytearray()
        written = 0
        size = 0
        try:
            for chunk in iter_chunks(payload, buffer_bytes):
                self.stats.append_requests += 1
                self._appends_since_commit += 1
                if self._appends_since_commit >= self.commit_interval:
                    self.commit_frees()
                size += len(chunk)
                tail += chunk
                needed = self.chain_length(size) - len(chain)
                if needed > 0:
                    if needed > self.allocator.free_count and self.allocator.pending_count:
                        self.commit_frees()
                    pages = self.allocator.page_alloc(needed)
                    chain.extend(pages)
                    self.wal.append(
                        WalKind.ALLOC_PAGES,
                        encode_page_list(PageListEntry(obj_id, generation, tuple(pages))),
                    )
                    self.injector.check("after-alloc-log")
                while len(tail) > self.usable_bytes:
                    position = written
                    self._write_page(chain[position], obj_id, generation, position, bytes(tail[:self.usable_bytes]))
                    del tail[:self.usable_bytes]
                    written += 1
                self.stats.bytes_written += len(chunk)
                self.injector.check("after-chunk-write")
        except VolumeFullError:
            self._rollback(obj_id, generation, chain)
            self.logger.warning(f"写入失败（卷已满）: id={obj_id}")
            raise
        if size == 0:
            raise StoreError(f"负载不能为空: id={obj_id}")
        self._write_page(chain[written], obj_id, generation, written, bytes(tail))

        self.injector.check("before-commit-log")
        record = BlobRecord(obj_id, size, tuple(chain), generation)
        commit = encode_commit(CommitEntry(obj_id, size, generation, record.placement))
        if self.injector.will_fire("mid-commit-log"):
            self.wal.append_torn(WalKind.COMMIT_BLOB, commit)
        self.injector.check("mid-commit-log")
        self.wal.append(WalKind.COMMIT_BLOB, commit)
        self._records[obj_id] = record
        self.injector.check("after-commit-log")

        if old is not None:
            self._free_chain(old)
            self.injector.check("after-free-log")
        self.stats.puts += 1
        return record

    def _rollback(self, obj_id: int, generation: int, chain: List[int]) -> None:
        if chain:
            self.wal.append(WalKind.FREE_PAGES, encode_page_list(PageListEntry(obj_id, generation, tuple(chain))))
            self.allocator.free(chain)

    def _free_chain(self, record: BlobRecord) -> None:
        self.wal.append(
            WalKind.FREE_PAGES,
            encode_page_list(PageListEntry(record.id, record.generation, record.placement)),
        )
        self.allocator.free(record.placement, deferred=True)

    def commit_frees(self) -> int:
        self._appends_since_commit = 0
        return self.allocator.commit_frees()

    def get(self, obj_id: int) -> bytes:
        """
        读取对象；逐页校验页头

        Raises:
            BlobNotFoundError: 对象不存在
            InvariantViolation: 页头与记录不符（链被破坏）
        """
        record = self._require(self._records, obj_id)
        out = bytearray()
        for position, page in enumerate(record.placement):
            raw = self._image.read(page * self.page_bytes, self.page_bytes)
            magic, blob_id, generation, pos, length = _PAGE_HEADER.unpack_from(raw, 0)
            (crc,) = _PAGE_CRC.unpack_from(raw, _PAGE_HEADER.size)
            if (
                magic != PAGE_MAGIC
                or zlib.crc32(raw[:_PAGE_HEADER.size]) != crc
                or blob_id != obj_id
                or generation != record.generation
                or pos != position
            ):
                raise InvariantViolation(f"页头不匹配: id={obj_id}, 页={page}, 位置={position}")
            start = self.header_bytes
            out += raw[start:start + length]
        if len(out) != record.size_bytes:
            raise InvariantViolation(f"对象长度不符: id={obj_id}, {len(out)} != {record.size_bytes}")
        self.stats.bytes_read += len(out)
        return bytes(out)

    def delete(self, obj_id: int) -> None:
        record = self._require(self._records, obj_id)
        self._free_chain(record)
        del self._records[obj_id]

    def list(self) -> Set[int]:
        return set(self._records)

    def record(self, obj_id: int) -> BlobRecord:
        return self._require(self._records, obj_id)

    def free_bytes(self) -> int:
        return self.allocator.free_count * self.page_bytes

    def _observable_fragments(self, record: BlobRecord) -> int:
        """
        扫描器能看到的碎片数

        尾页负载不足一个标记间隔时不含标记，它之前的断点对扫描器不可见，
        因此按并入前一游程计算。
        """
        chain = record.placement
        tail = record.size_bytes - (len(chain) - 1) * self.usable_bytes
        # 与按连续页号划分的游程不同：不足一个标记间隔的尾页并入前一游程，原始游程见 page_runs()
        if len(chain) > 1 and tail < _MARKER_INTERVAL:
            return page_fragments(chain[:-1])
        return page_fragments(chain)

    def fragments(self, obj_id: int) -> Optional[int]:
        return self._observable_fragments(self._require(self._records, obj_id))

    def ground_truth(self) -> Dict[int, int]:
        return {obj_id: self._observable_fragments(rec) for obj_id, rec in self._records.items()}

    def page_runs(self) -> Dict[int, int]:
        """按连续页号统计的原始游程数"""
        return {obj_id: page_fragments(rec.placement) for obj_id, rec in self._records.items()}

    def internal_fragmentation_bytes(self) -> int:
        return sum(
            len(rec.placement) * self.page_bytes - rec.size_bytes for rec in self._records.values()
        )

    def image(self) -> VolumeImage:
        return self._image

    def audit(self) -> AuditReport:
        """
        页级审计：每页要么空闲、要么待提交、要么恰属于一条存活链

        Raises:
            InvariantViolation: 链重叠、链长公式不成立或存在泄漏页
        """
        owner = np.zeros(self.allocator.n_pages, dtype=np.int32)
        for rec in self._records.values():
            if len(rec.placement) != self.chain_length(rec.size_bytes):
                raise InvariantViolation(f"链长不符: id={rec.id}")
            owner[np.asarray(rec.placement, dtype=np.int64)] += 1
        if (owner > 1).any():
            raise InvariantViolation("页链相互重叠")
        used = owner == 1
        free_map = self.allocator.free_map
        pending_map = self.allocator.pending_map
        if (free_map & pending_map).any():
            raise InvariantViolation("页同时处于空闲与待提交状态")
        leaked = int(np.count_nonzero(~used & ~free_map & ~pending_map))
        if leaked:
            raise InvariantViolation(f"泄漏页: {leaked}")
        if (used & (free_map | pending_map)).any():
            raise InvariantViolation("存活页被标记为空闲或待提交")
        live_pages = int(np.count_nonzero(used))
        return AuditReport(
            capacity_bytes=self._image.capacity_bytes,
            live_bytes=live_pages * self.page_bytes,
            free_bytes=self.allocator.free_count * self.page_bytes,
            pending_bytes=self.allocator.pending_count * self.page_bytes,
            reserved_bytes=0,
        )

    def leaked_pages(self) -> int:
        """既不空闲、也不待提交、也不属于任何存活链的页数"""
        used = np.zeros(self.allocator.n_pages, dtype=bool)
        for rec in self._records.values():
            used[np.asarray(rec.placement, dtype=np.int64)] = True
        return int(np.count_nonzero(~used & ~self.allocator.free_map & ~self.allocator.pending_map))

    def _commit_entries(self) -> List[CommitEntry]:
        return [
            CommitEntry(rec.id, rec.size_bytes, rec.generation, rec.placement)
            for rec in (self._records[k] for k in sorted(self._records))
        ]

    def checkpoint(self) -> int:
        """
        写检查点（日志截断）并把页链映射写入镜像元数据区

        检查点之后，之前释放的页全部可以重新分配。

        Returns:
            检查点 LSN
        """
        lsn = self.wal.checkpoint(
            self._commit_entries(),
            before_replace=lambda: self.injector.check("before-checkpoint-replace"),
        )
        self._image.write_metadata(encode_metadata(self._records[k] for k in sorted(self._records)))
        self.commit_frees()
        return lsn

    @classmethod
    def recover(cls, image: VolumeImage, wal: WriteAheadLog, repair: bool = True) -> "PageStore":
        """
        从镜像和日志恢复一致状态

        截断损坏的日志尾部，重放到最后一个检查点之后的已提交状态，
        位图只由已提交链重建（未提交的分配全部回滚），最后写一个检查点。
        重复调用得到相同状态。

        Args:
            image: 卷镜像
            wal: 预写日志
            repair: False 时只重放、不截断日志也不写检查点（只读视图）
        """
        logger = get_logger(__name__)
        dropped = wal.repair() if repair else 0
        state = replay(wal.records())
        store = cls(image, wal)
        for entry in state.values():
            store.allocator.mark_used(entry.pages)
            store._records[entry.blob_id] = BlobRecord(
                entry.blob_id, entry.size_bytes, entry.pages, entry.generation
            )
        if repair:
            store.checkpoint()
        logger.info(f"page 后端恢复完成: 对象数={len(state)}, 截断日志字节={dropped}")
        return store

    def flush(self) -> None:
        self._image.write_metadata(encode_metadata(self._records[k] for k in sorted(self._records)))
        self._image.flush()

    def close(self) -> None:
        self.flush()
        self._image.close()


def defragment_by_copy(
    store: PageStore,
    target_image: Optional[VolumeImage] = None,
    target_wal: Optional[WriteAheadLog] = None,
    buffer_bytes: int = 65536,
) -> PageStore:
    """
    整理 page 后端：按 id 顺序把全部对象复制到一个新区域

    新区域默认是与原卷几何相同的新内存镜像。复制保留每个对象的版本号。

    Args:
        store: 原存储
        target_image: 新区域（必须为空卷）
        target_wal: 新区域的日志
        buffer_bytes: 复制时的写缓冲

    Returns:
        新的 PageStore

    Raises:
        DefragRefused: 原卷空闲空间小于最大对象，或新区域放不下全部对象
    """
    logger = get_logger(__name__)
    store.commit_frees()
    records = [store.record(k) for k in sorted(store.list())]
    largest = max((len(r.placement) for r in records), default=0)
    if store.allocator.free_count < largest:
        estimate = SpaceEstimate(largest, store.allocator.free_count, store.page_bytes)
        logger.warning(
            f"拒绝整理: 空闲 {estimate.available_bytes} 字节 < 最大对象 {estimate.required_bytes} 字节"
        )
        raise DefragRefused(
            f"空闲空间不足: 需要至少 {estimate.required_bytes} 字节，"
            f"当前 {estimate.available_bytes} 字节",
            estimate,
        )

    if target_image is None:
        target_image = VolumeImage.create(store.image().geometry, "page")
    if target_wal is None:
        target_wal = WriteAheadLog()
    target = PageStore(target_image, target_wal)
    total = sum(len(r.placement) for r in records)
    if target.allocator.free_count < total:
        estimate = SpaceEstimate(total, target.allocator.free_count, target.page_bytes)
        raise DefragRefused(
            f"目标区域不足: 需要 {estimate.required_bytes} 字节，可用 {estimate.available_bytes} 字节",
            estimate,
        )

    before = store.ground_truth()
    for rec in records:
        target.put_blob(rec.id, store.get(rec.id), buffer_bytes, generation=rec.generation)
    target.checkpoint()
    after = target.ground_truth()
    if records:
        logger.info(
            f"page 整理完成: 对象数={len(records)}, 平均碎片 "
            f"{sum(before.values()) / len(before):.3f} → {sum(after.values()) / len(after):.3f}"
        )
    return target
