"""extent 后端

模拟 NTFS 风格的分配：按游程组织的空闲空间缓存、尽力连续分配、
释放的空间每隔固定次数的追加请求提交一次，提交前不能重新使用。
"""

import math
from bisect import bisect_left, bisect_right, insort
from typing import Dict, Iterable, List, Optional, Set, Tuple

from blobbench.config import ConfigurationError
from blobbench.logger import get_logger
from blobbench.store import (
    AuditReport,
    BlobRecord,
    BlobStore,
    Extent,
    InvariantViolation,
    Payload,
    StoreError,
    VolumeFullError,
    VolumeImage,
    decode_metadata,
    default_commit_interval,
    encode_metadata,
    extent_fragments,
    iter_chunks,
)
from blobbench.utils import KB, align_up

FIT_POLICIES = ("smallest_fit", "largest_first")

# 已分配达到该字节数后按大文件顺序追加处理
LARGE_APPEND_BYTES = 512 * KB
PREALLOC_FACTOR = 2


class RunCache:
    """
    空闲游程缓存

    游程按 (长度降序, 偏移升序) 排列；释放的区段先进入 pending，
    commit_frees() 时才与相邻游程合并并重新可用。
    """

    def __init__(self, initial: Iterable[Extent] = ()):
        self._order: List[Tuple[int, int]] = []  # (-length, start)
        self._starts: List[int] = []
        self._by_start: Dict[int, int] = {}
        self._by_end: Dict[int, int] = {}
        self.pending: List[Extent] = []
        self.total_free = 0
        for ext in initial:
            self._add_run(ext.offset_bytes, ext.length_bytes)

    def __len__(self) -> int:
        return len(self._order)

    @property
    def pending_bytes(self) -> int:
        return sum(e.length_bytes for e in self.pending)

    def _add_run(self, start: int, length: int) -> None:
        insort(self._order, (-length, start))
        insort(self._starts, start)
        self._by_start[start] = length
        self._by_end[start + length] = start
        self.total_free += length

    def _remove_run(self, start: int) -> int:
        length = self._by_start.pop(start)
        del self._by_end[start + length]
        del self._order[bisect_left(self._order, (-length, start))]
        del self._starts[bisect_left(self._starts, start)]
        self.total_free -= length
        return length

    def runs(self) -> List[Extent]:
        """按偏移排列的空闲游程"""
        return [Extent(s, self._by_start[s]) for s in self._starts]

    def ordered(self) -> List[Extent]:
        """按缓存顺序（长度降序、偏移升序）排列的空闲游程"""
        return [Extent(start, -neg) for neg, start in self._order]

    def largest(self) -> int:
        return -self._order[0][0] if self._order else 0

    def peek(self, request_bytes: int, policy: str = "smallest_fit") -> Optional[Extent]:
        """
        按策略挑出能容纳请求的游程，不修改缓存

        smallest_fit 选长度足够的最短游程（同长取最低偏移）；
        largest_first 直接取最长游程。

        Returns:
            整个游程；没有足够长的单个游程时返回 None
        """
        if not self._order or self.largest() < request_bytes:
            return None
        if policy == "largest_first":
            neg, start = self._order[0]
        else:
            p = bisect_right(self._order, (-request_bytes, math.inf))
            smallest = -self._order[p - 1][0]
            neg, start = self._order[bisect_left(self._order, (-smallest, -1))]
        return Extent(start, -neg)

    def run_at(self, offset: int) -> int:
        """起始于 offset 的空闲游程长度，没有时为 0"""
        return self._by_start.get(offset, 0)

    def allocate_single(self, request_bytes: int, policy: str = "smallest_fit") -> Optional[Extent]:
        """
        尝试用一个游程满足请求

        Returns:
            分配到的区段；没有足够长的单个游程时返回 None
        """
        run = self.peek(request_bytes, policy)
        if run is None:
            return None
        self.take_at(run.offset_bytes, request_bytes)
        return Extent(run.offset_bytes, request_bytes)

    def allocate(self, request_bytes: int, policy: str = "smallest_fit") -> List[Extent]:
        """
        分配 request_bytes 字节

        先尝试单个游程；失败则从最长游程开始贪心消耗，得到碎片化的分配。

        Raises:
            VolumeFullError: 已提交的空闲空间不足（pending 不计入）
            InvariantViolation: 请求不为正
        """
        if request_bytes <= 0:
            raise InvariantViolation(f"分配请求必须为正: {request_bytes}")
        if request_bytes > self.total_free:
            raise VolumeFullError(
                f"卷已满: 请求 {request_bytes}，已提交空闲 {self.total_free}，"
                f"待提交 {self.pending_bytes}"
            )
        single = self.allocate_single(request_bytes, policy)
        if single is not None:
            return [single]

        extents = []
        remaining = request_bytes
        while remaining > 0:
            neg, start = self._order[0]
            length = -neg
            take = min(length, remaining)
            self._remove_run(start)
            if length > take:
                self._add_run(start + take, length - take)
            extents.append(Extent(start, take))
            remaining -= take
        return extents

    def take_at(self, offset: int, max_bytes: int) -> int:
        """
        从恰好起始于 offset 的游程头部取走最多 max_bytes 字节（原地增长）

        Returns:
            实际取走的字节数；offset 处没有游程时为 0
        """
        length = self._by_start.get(offset)
        if not length or max_bytes <= 0:
            return 0
        take = min(length, max_bytes)
        self._remove_run(offset)
        if length > take:
            self._add_run(offset + take, length - take)
        return take

    def carve(self, offset: int, length: int) -> None:
        """
        从某个空闲游程内部挖走任意一段

        Raises:
            InvariantViolation: 该段不完全位于单个空闲游程内
        """
        idx = bisect_right(self._starts, offset) - 1
        if idx < 0:
            raise InvariantViolation(f"区段不在空闲空间内: {offset}+{length}")
        start = self._starts[idx]
        run_len = self._by_start[start]
        if offset + length > start + run_len:
            raise InvariantViolation(f"区段不在空闲空间内: {offset}+{length}")
        self._remove_run(start)
        if offset > start:
            self._add_run(start, offset - start)
        tail = start + run_len - offset - length
        if tail > 0:
            self._add_run(offset + length, tail)

    def free(self, ext: Extent) -> None:
        """
        把区段放入 pending

        Raises:
            InvariantViolation: 与空闲游程或 pending 重叠（重复释放）
        """
        idx = bisect_right(self._starts, ext.offset_bytes) - 1
        if idx >= 0 and self._starts[idx] + self._by_start[self._starts[idx]] > ext.offset_bytes:
            raise InvariantViolation(f"重复释放: {ext} 与空闲游程重叠")
        if idx + 1 < len(self._starts) and self._starts[idx + 1] < ext.end:
            raise InvariantViolation(f"重复释放: {ext} 与空闲游程重叠")
        for p in self.pending:
            if p.offset_bytes < ext.end and ext.offset_bytes < p.end:
                raise InvariantViolation(f"重复释放: {ext} 已在待提交列表中")
        self.pending.append(ext)

    def commit_frees(self) -> int:
        """
        把 pending 合并进缓存并与相邻游程合并

        Returns:
            提交的区段数
        """
        count = len(self.pending)
        for ext in self.pending:
            start, end = ext.offset_bytes, ext.end
            prev = self._by_end.get(start)
            if prev is not None:
                self._remove_run(prev)
                start = prev
            if end in self._by_start:
                end += self._remove_run(end)
            self._add_run(start, end - start)
        self.pending.clear()
        return count

    def check_invariants(self) -> None:
        """
        验证缓存不变量

        Raises:
            InvariantViolation: 顺序错误、游程重叠或相邻未合并、pending 与缓存相交
        """
        if self._order != sorted(self._order):
            raise InvariantViolation("游程顺序错误")
        prev_end = None
        for ext in self.runs():
            if prev_end is not None and ext.offset_bytes <= prev_end:
                raise InvariantViolation(f"游程重叠或相邻未合并: {ext}")
            prev_end = ext.end
        for p in self.pending:
            for r in self.runs():
                if p.offset_bytes < r.end and r.offset_bytes < p.end:
                    raise InvariantViolation(f"pending 与缓存相交: {p}")


class ExtentStore(BlobStore):
    """extent 后端"""

    backend_name = "extent"

    def __init__(
        self,
        image: VolumeImage,
        fit_policy: str = "smallest_fit",
        commit_interval: Optional[int] = None,
    ):
        """
        初始化 extent 后端

        Args:
            image: 卷镜像（整个数据区初始为一个空闲游程）
            fit_policy: smallest_fit 或 largest_first
            commit_interval: 每多少次追加请求提交一次释放的空间，默认按容量计算
        """
        super().__init__()
        if fit_policy not in FIT_POLICIES:
            raise ConfigurationError(f"未知的分配策略: {fit_policy}")
        if commit_interval is not None and commit_interval < 1:
            raise ConfigurationError(f"commit_interval 必须 ≥ 1: {commit_interval}")
        self._image = image
        self.cluster_bytes = image.geometry.cluster_bytes
        self.fit_policy = fit_policy
        self.commit_interval = commit_interval or default_commit_interval(image.capacity_bytes)
        self.run_cache = RunCache([Extent(0, image.capacity_bytes)])
        self._records: Dict[int, BlobRecord] = {}
        self._ballast: List[Extent] = []
        self._appends_since_commit = 0
        self.high_water_bytes = 0
        self.logger = get_logger(__name__)
        self.logger.info(
            f"extent 后端初始化: 容量={image.capacity_bytes}, 簇={self.cluster_bytes}, "
            f"策略={fit_policy}, 提交间隔={self.commit_interval}"
        )

    @classmethod
    def open(
        cls,
        image: VolumeImage,
        fit_policy: str = "smallest_fit",
        commit_interval: Optional[int] = None,
    ) -> "ExtentStore":
        """从镜像元数据区恢复 extent 映射，空闲缓存取其补集"""
        store = cls(image, fit_policy, commit_interval)
        records, reserved = decode_metadata(image.read_metadata(), "extent")
        store._records = records
        store._ballast = list(reserved)
        occupied = sorted(
            [e for rec in records.values() for e in store._allocated(rec.placement)] + store._ballast,
            key=lambda e: e.offset_bytes,
        )
        free = []
        cursor = 0
        for ext in occupied:
            if ext.offset_bytes > cursor:
                free.append(Extent(cursor, ext.offset_bytes - cursor))
            cursor = max(cursor, ext.end)
        if cursor < image.capacity_bytes:
            free.append(Extent(cursor, image.capacity_bytes - cursor))
        store.run_cache = RunCache(free)
        store.logger.info(f"从镜像恢复 extent 映射: 对象数={len(records)}")
        return store

    def _allocated(self, placement: Iterable[Extent]) -> List[Extent]:
        """放置区段按簇向上取整后的实际占用"""
        return [Extent(e.offset_bytes, align_up(e.length_bytes, self.cluster_bytes)) for e in placement]

    def append_extend(self, blob: BlobRecord, chunk_bytes: int) -> BlobRecord:
        """
        为正在写入的对象追加 chunk_bytes 字节的空间

        blob.placement 是已分配（按簇取整）的区段，size_bytes 是已写入字节数。
        已分配不足 LARGE_APPEND_BYTES 时每块单独放置，紧接末尾的游程要与
        fit_policy 选出的游程竞争；之后视为大文件顺序追加，原地预分配到已分配量的
        PREALLOC_FACTOR 倍。多分配的簇由 put() 在对象写完后释放。

        每 commit_interval 次追加请求提交一次释放的空间。

        Raises:
            VolumeFullError: 提交全部待释放空间后仍不足
        """
        self.stats.append_requests += 1
        self._appends_since_commit += 1
        if self._appends_since_commit >= self.commit_interval:
            self.commit_frees()

        extents = list(blob.placement)
        allocated = sum(e.length_bytes for e in extents)
        need = blob.size_bytes + chunk_bytes - allocated
        if need > 0:
            need = align_up(need, self.cluster_bytes)
            if need > self.run_cache.total_free and self.run_cache.pending:
                self.commit_frees()
            if need > self.run_cache.total_free:
                raise VolumeFullError(
                    f"卷已满: 对象 {blob.id} 需要 {need}，已提交空闲 {self.run_cache.total_free}"
                )
            tail = extents[-1].end if extents else None
            if allocated < LARGE_APPEND_BYTES:
                pieces = self._place_chunk(tail, need)
            else:
                pieces = self._extend_sequential(tail, need, max(need, PREALLOC_FACTOR * allocated))
            for ext in pieces:
                if extents and extents[-1].end == ext.offset_bytes:
                    extents[-1] = Extent(extents[-1].offset_bytes, extents[-1].length_bytes + ext.length_bytes)
                else:
                    extents.append(ext)
            in_use = self._image.capacity_bytes - self.run_cache.total_free
            self.high_water_bytes = max(self.high_water_bytes, in_use)
        return BlobRecord(blob.id, blob.size_bytes + chunk_bytes, tuple(extents), blob.generation)

    def _place_chunk(self, tail: Optional[int], need: int) -> List[Extent]:
        """小对象的一块：末尾游程只有在按策略不比最佳游程差时才原地增长"""
        best = self.run_cache.peek(need, self.fit_policy)
        if best is None:
            return self.run_cache.allocate(need, self.fit_policy)
        if tail is not None:
            adjacent = self.run_cache.run_at(tail)
            if self.fit_policy == "largest_first":
                preferred = adjacent >= best.length_bytes
            else:
                preferred = adjacent <= best.length_bytes
            if adjacent >= need and preferred:
                best = Extent(tail, adjacent)
        self.run_cache.take_at(best.offset_bytes, need)
        return [Extent(best.offset_bytes, need)]

    def _extend_sequential(self, tail: Optional[int], need: int, want: int) -> List[Extent]:
        """
        大文件顺序追加

        原地最多取 want 字节；不够 need 时，剩余预分配量跳到能整段放下它的游程，
        没有这样的游程就取最长游程，再不行才贪心拼凑。
        """
        pieces = []
        got = self.run_cache.take_at(tail, want) if tail is not None else 0
        if got:
            pieces.append(Extent(tail, got))
        if got >= need:
            return pieces
        need -= got
        want -= got
        target = self.run_cache.peek(want, self.fit_policy) or self.run_cache.peek(need, "largest_first")
        if target is None:
            return pieces + self.run_cache.allocate(need, self.fit_policy)
        take = min(target.length_bytes, want)
        self.run_cache.take_at(target.offset_bytes, take)
        return pieces + [Extent(target.offset_bytes, take)]

    def _write_logical(self, extents: Tuple[Extent, ...], logical: int, data: bytes) -> None:
        """把 data 写到对象逻辑偏移 logical 处"""
        base = 0
        pos = 0
        for ext in extents:
            if pos >= len(data):
                break
            if logical + pos < base + ext.length_bytes:
                inner = logical + pos - base
                n = min(ext.length_bytes - inner, len(data) - pos)
                self._image.write(ext.offset_bytes + inner, data[pos:pos + n])
                pos += n
            base += ext.length_bytes

    @staticmethod
    def _split(extents: Tuple[Extent, ...], size: int) -> Tuple[Tuple[Extent, ...], List[Extent]]:
        """按 size 切分区段：前 size 字节的放置，以及之后多分配的区段"""
        kept = []
        excess = []
        remaining = size
        for ext in extents:
            if remaining <= 0:
                excess.append(ext)
            elif ext.length_bytes > remaining:
                kept.append(Extent(ext.offset_bytes, remaining))
                excess.append(Extent(ext.offset_bytes + remaining, ext.length_bytes - remaining))
            else:
                kept.append(ext)
            remaining -= ext.length_bytes
        return tuple(kept), excess

    def put(self, obj_id: int, payload: Payload, write_buffer_bytes: int) -> BlobRecord:
        old = self._records.get(obj_id)
        generation = old.generation + 1 if old else 1
        blob = BlobRecord(obj_id, 0, (), generation)
        try:
            for chunk in iter_chunks(payload, write_buffer_bytes):
                written = blob.size_bytes
                blob = self.append_extend(blob, len(chunk))
                self._write_logical(blob.placement, written, chunk)
                self.stats.bytes_written += len(chunk)
        except VolumeFullError:
            for ext in blob.placement:
                self.run_cache.free(ext)
            self.commit_frees()
            self.logger.warning(f"写入失败（卷已满）: id={obj_id}")
            raise
        if blob.size_bytes == 0:
            raise StoreError(f"负载不能为空: id={obj_id}")

        allocated, excess = self._split(blob.placement, align_up(blob.size_bytes, self.cluster_bytes))
        for ext in excess:
            self.run_cache.free(ext)
        placement, _ = self._split(allocated, blob.size_bytes)
        record = BlobRecord(obj_id, blob.size_bytes, placement, generation)
        self._records[obj_id] = record
        if old is not None:
            self.free(old)
        self.stats.puts += 1
        return record

    def free(self, record: BlobRecord) -> None:
        """把对象占用的区段放入 pending"""
        for ext in self._allocated(record.placement):
            self.run_cache.free(ext)

    def commit_frees(self) -> int:
        self._appends_since_commit = 0
        return self.run_cache.commit_frees()

    def get(self, obj_id: int) -> bytes:
        record = self._require(self._records, obj_id)
        data = b"".join(self._image.read(e.offset_bytes, e.length_bytes) for e in record.placement)
        self.stats.bytes_read += len(data)
        return data

    def delete(self, obj_id: int) -> None:
        record = self._require(self._records, obj_id)
        del self._records[obj_id]
        self.free(record)

    def list(self) -> Set[int]:
        return set(self._records)

    def record(self, obj_id: int) -> BlobRecord:
        return self._require(self._records, obj_id)

    def free_bytes(self) -> int:
        return self.run_cache.total_free

    def fragments(self, obj_id: int) -> Optional[int]:
        return extent_fragments(self._require(self._records, obj_id).placement)

    def ground_truth(self) -> Dict[int, int]:
        return {obj_id: extent_fragments(rec.placement) for obj_id, rec in self._records.items()}

    def internal_fragmentation_bytes(self) -> int:
        return sum(
            align_up(rec.size_bytes, self.cluster_bytes) - rec.size_bytes
            for rec in self._records.values()
        )

    def image(self) -> VolumeImage:
        return self._image

    def audit(self) -> AuditReport:
        """
        全卷审计：存活放置、空闲游程、pending、预留区段两两不相交且恰好覆盖数据区

        Raises:
            InvariantViolation: 任何重叠、空洞或缓存不变量失败
        """
        self.run_cache.check_invariants()
        pieces: List[Tuple[int, int, str]] = []
        live = 0
        for rec in self._records.values():
            for ext in self._allocated(rec.placement):
                pieces.append((ext.offset_bytes, ext.end, f"blob {rec.id}"))
                live += ext.length_bytes
        for ext in self.run_cache.runs():
            pieces.append((ext.offset_bytes, ext.end, "free"))
        for ext in self.run_cache.pending:
            pieces.append((ext.offset_bytes, ext.end, "pending"))
        for ext in self._ballast:
            pieces.append((ext.offset_bytes, ext.end, "reserved"))
        pieces.sort()

        cursor = 0
        for start, end, owner in pieces:
            if start < cursor:
                raise InvariantViolation(f"放置重叠: {owner} 起始于 {start}，前一段结束于 {cursor}")
            if start > cursor:
                raise InvariantViolation(f"空间泄漏: [{cursor}, {start}) 无归属")
            cursor = end
        if cursor != self._image.capacity_bytes:
            raise InvariantViolation(f"空间泄漏: [{cursor}, {self._image.capacity_bytes}) 无归属")

        return AuditReport(
            capacity_bytes=self._image.capacity_bytes,
            live_bytes=live,
            free_bytes=self.run_cache.total_free,
            pending_bytes=self.run_cache.pending_bytes,
            reserved_bytes=sum(e.length_bytes for e in self._ballast),
        )

    def shatter(self, stride_bytes: int) -> int:
        """
        在空卷上每隔 stride_bytes 钉住一个簇，制造病态的碎片化空闲空间

        Returns:
            钉住的簇数

        Raises:
            ConfigurationError: 卷非空或 stride 不合法
        """
        if self._records:
            raise ConfigurationError("只能在空卷上制造初始碎片")
        if stride_bytes % self.cluster_bytes != 0 or stride_bytes <= self.cluster_bytes:
            raise ConfigurationError(
                f"stride_bytes 必须是簇大小的整数倍且大于一个簇: {stride_bytes}"
            )
        for offset in range(stride_bytes - self.cluster_bytes, self._image.capacity_bytes, stride_bytes):
            self.run_cache.carve(offset, self.cluster_bytes)
            self._ballast.append(Extent(offset, self.cluster_bytes))
        self.logger.info(f"制造初始碎片: 间隔={stride_bytes}, 钉住簇数={len(self._ballast)}")
        return len(self._ballast)

    def release_ballast(self) -> int:
        """释放 shatter() 钉住的簇"""
        count = len(self._ballast)
        for ext in self._ballast:
            self.run_cache.free(ext)
        self._ballast.clear()
        self.commit_frees()
        self.logger.info(f"释放钉住的簇: {count}")
        return count

    def relocate(self, obj_id: int) -> bool:
        """
        把对象整体搬到一个足够长的单一游程

        旧位置在搬迁后清零，避免旧副本的标记被扫描器当作存活数据。

        Returns:
            是否搬迁成功
        """
        record = self._require(self._records, obj_id)
        target = self.run_cache.allocate_single(
            align_up(record.size_bytes, self.cluster_bytes), self.fit_policy
        )
        if target is None:
            return False
        data = self.get(obj_id)
        self._image.write(target.offset_bytes, data)
        self.stats.bytes_written += len(data)
        for ext in record.placement:
            self._image.write(ext.offset_bytes, bytes(ext.length_bytes))
        self._records[obj_id] = BlobRecord(
            obj_id, record.size_bytes, (Extent(target.offset_bytes, record.size_bytes),), record.generation
        )
        self.free(record)
        self.commit_frees()
        return True

    def flush(self) -> None:
        blob = encode_metadata(
            (self._records[k] for k in sorted(self._records)), self._ballast
        )
        self._image.write_metadata(blob)
        self._image.flush()

    def close(self) -> None:
        self.flush()
        self._image.close()


def defragment_extent(store: ExtentStore) -> int:
    """
    尽力整理 extent 后端

    碎片数最多的对象先处理，每个对象尝试搬到单个游程；找不到足够长的
    游程就跳过并在日志中报告。

    Returns:
        搬迁的对象数
    """
    logger = get_logger(__name__)
    truth = store.ground_truth()
    candidates = sorted(
        ((frags, obj_id) for obj_id, frags in truth.items() if frags > 1),
        key=lambda t: (-t[0], t[1]),
    )
    relocated = 0
    unfixed = []
    for _, obj_id in candidates:
        if store.relocate(obj_id):
            relocated += 1
        else:
            unfixed.append(obj_id)
    logger.info(f"extent 整理完成: 搬迁={relocated}, 未处理={len(unfixed)}")
    if unfixed:
        logger.warning(f"没有足够长的空闲游程，未整理的对象: {unfixed[:20]}")
    return relocated
