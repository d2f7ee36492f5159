"""page_store.py 的单元测试"""

import numpy as np
import pytest

from blobbench.config import ConfigurationError, VolumeGeometry
from blobbench.page_store import (
    PAGE_MAGIC,
    DefragRefused,
    PageAllocator,
    PageStore,
    defragment_by_copy,
)
from blobbench.store import (
    BlobNotFoundError,
    CrashInjected,
    InvariantViolation,
    VolumeFullError,
    VolumeImage,
    decode_metadata,
)
from blobbench.utils import KB, MB
from blobbench.wal import WalKind, WriteAheadLog

USABLE = 8192 - 96


def payload(size: int, seed: int = 0) -> bytes:
    return np.random.default_rng(seed).bytes(size)


def new_store(wal_path=None) -> PageStore:
    image = VolumeImage.create(VolumeGeometry(capacity_bytes=MB), "page")
    return PageStore(image, WriteAheadLog(wal_path))


@pytest.fixture
def store():
    return new_store()


class TestPageAllocator:
    """测试页分配器"""

    def test_lowest_free_pages(self):
        alloc = PageAllocator(16)
        assert alloc.page_alloc(3) == [0, 1, 2]
        alloc.free([1])
        assert alloc.page_alloc(2) == [1, 3]
        assert alloc.free_count == 12

    def test_cursor_skips_used_prefix(self):
        alloc = PageAllocator(8)
        alloc.page_alloc(4)
        assert alloc.cursor == 4
        alloc.free([2])
        assert alloc.cursor == 2

    def test_deferred_free_waits_for_commit(self):
        alloc = PageAllocator(8)
        alloc.page_alloc(4)
        alloc.free([1], deferred=True)
        assert alloc.page_alloc(1) == [4]
        assert alloc.pending_count == 1
        with pytest.raises(InvariantViolation, match="重复释放"):
            alloc.free([1])
        assert alloc.commit_frees() == 1
        assert alloc.cursor == 1
        assert alloc.page_alloc(1) == [1]
        assert alloc.commit_frees() == 0

    def test_volume_full_leaves_bitmap(self):
        alloc = PageAllocator(4)
        alloc.page_alloc(3)
        with pytest.raises(VolumeFullError):
            alloc.page_alloc(2)
        assert alloc.free_count == 1

    def test_double_free(self):
        alloc = PageAllocator(4)
        alloc.page_alloc(2)
        alloc.free([0])
        with pytest.raises(InvariantViolation, match="重复释放"):
            alloc.free([0])

    def test_overlapping_chains(self):
        alloc = PageAllocator(4)
        alloc.mark_used([0, 1])
        with pytest.raises(InvariantViolation):
            alloc.mark_used([1, 2])

    def test_invalid_request(self):
        with pytest.raises(InvariantViolation):
            PageAllocator(4).page_alloc(0)


class TestPutGet:
    """测试写入与读取"""

    def test_chain_length(self, store):
        assert store.chain_length(10 * KB) == 2
        assert store.chain_length(USABLE) == 1
        assert store.chain_length(USABLE + 1) == 2
        assert store.chain_length(256 * KB) == 33

    def test_round_trip(self, store):
        data = payload(20000)
        record = store.put(1, data, 4 * KB)
        assert record.placement == (0, 1, 2)
        assert record.generation == 1
        assert store.get(1) == data
        assert store.fragments(1) == 1

    def test_each_page_written_once(self, store):
        """数据页只写一次，写入字节数 = 页数 × 页大小"""
        store.put(1, payload(20000), 4 * KB)
        assert store.data_bytes_written == 3 * 8192

    def test_page_header_on_image(self, store):
        store.put(1, payload(2000), 64 * KB)
        assert store.image().read(0, 8) == PAGE_MAGIC

    def test_wal_holds_no_object_bytes(self, tmp_path):
        store = new_store(tmp_path / "meta.wal")
        data = payload(200 * KB, seed=3)
        store.put(1, data, 64 * KB)
        raw = (tmp_path / "meta.wal").read_bytes()
        assert store.wal.bytes_appended == len(raw)
        assert len(raw) < 1024
        assert data[:64] not in raw
        assert data[-64:] not in raw

    def test_log_order(self, store):
        store.put(1, payload(20000), 64 * KB)
        store.put(1, payload(20000, 1), 64 * KB)
        kinds = [r.kind for r in store.wal.records()]
        assert kinds == [
            WalKind.ALLOC_PAGES,
            WalKind.COMMIT_BLOB,
            WalKind.ALLOC_PAGES,
            WalKind.COMMIT_BLOB,
            WalKind.FREE_PAGES,
        ]

    def test_safe_write_replaces(self, store):
        store.put(1, payload(20000), 64 * KB)
        record = store.put(1, payload(20000, 1), 64 * KB)
        assert record.generation == 2
        assert record.placement == (3, 4, 5)
        assert store.get(1) == payload(20000, 1)
        # 旧链进入 pending，提交后才回到空闲位图
        assert store.allocator.free_count == 128 - 6
        assert store.allocator.pending_count == 3
        store.commit_frees()
        assert store.allocator.free_count == 128 - 3

    def test_freed_pages_wait_for_commit(self, store):
        store.put(1, payload(USABLE), 64 * KB)
        store.put(2, payload(USABLE), 64 * KB)
        store.delete(1)
        record = store.put(3, payload(2 * USABLE, 3), 64 * KB)
        assert record.placement == (2, 3)
        assert store.audit().pending_bytes == 8192
        assert store.leaked_pages() == 0

    def test_reuse_after_commit(self, store):
        store.put(1, payload(USABLE), 64 * KB)
        store.put(2, payload(USABLE), 64 * KB)
        store.delete(1)
        store.commit_frees()
        record = store.put(3, payload(2 * USABLE, 3), 64 * KB)
        assert record.placement == (0, 2)
        assert store.fragments(3) == 2

    def test_small_tail_page_folded(self, store):
        """尾页负载不足 1KB 时不计入可观测碎片"""
        store.put(1, payload(USABLE), 64 * KB)
        store.put(2, payload(USABLE), 64 * KB)
        store.delete(1)
        store.commit_frees()
        store.put(3, payload(USABLE + 500), 64 * KB)
        assert store.record(3).placement == (0, 2)
        assert store.fragments(3) == 1
        assert store.page_runs()[3] == 2

    def test_missing(self, store):
        with pytest.raises(BlobNotFoundError):
            store.get(9)

    def test_volume_full_keeps_old_version(self, store):
        data = payload(70 * USABLE)
        store.put(1, data, 64 * KB)
        with pytest.raises(VolumeFullError):
            store.put(1, payload(70 * USABLE, 1), 64 * KB)
        assert store.get(1) == data
        assert store.allocator.free_count == 128 - 70
        assert store.leaked_pages() == 0
        store.audit()

    def test_internal_fragmentation(self, store):
        store.put(1, payload(20000), 64 * KB)
        assert store.internal_fragmentation_bytes() == 3 * 8192 - 20000

    def test_corrupt_page_detected(self, store):
        store.put(1, payload(20000), 64 * KB)
        store.image().write(8192, bytes(8))
        with pytest.raises(InvariantViolation, match="页头不匹配"):
            store.get(1)


class TestCheckpointAndRecovery:
    """测试检查点与恢复"""

    def test_checkpoint_truncates_log(self, store):
        for i in range(1, 5):
            store.put(i, payload(20000, i), 64 * KB)
        store.checkpoint()
        records = store.wal.records()
        assert [r.kind for r in records] == [WalKind.CHECKPOINT]
        decoded, _ = decode_metadata(store.image().read_metadata(), "page")
        assert set(decoded) == {1, 2, 3, 4}

    def test_checkpoint_commits_freed_pages(self, store):
        store.put(1, payload(20000, 1), 64 * KB)
        store.put(1, payload(20000, 2), 64 * KB)
        assert store.allocator.pending_count == 3
        store.checkpoint()
        assert store.allocator.pending_count == 0
        record = store.put(2, payload(20000, 3), 64 * KB)
        assert record.placement == (0, 1, 2)

    def test_recover_rebuilds_state(self, tmp_path):
        store = new_store(tmp_path / "meta.wal")
        for i in range(1, 5):
            store.put(i, payload(20000, i), 64 * KB)
        store.delete(2)
        store.put(3, payload(20000, 33), 64 * KB)

        recovered = PageStore.recover(store.image(), WriteAheadLog(tmp_path / "meta.wal"))
        assert recovered.list() == {1, 3, 4}
        assert recovered.record(3).generation == 2
        assert recovered.get(3) == payload(20000, 33)
        # 恢复时日志中已释放的页都视为空闲
        assert recovered.allocator.free_count == store.allocator.free_count + store.allocator.pending_count
        recovered.audit()

    def test_recover_is_idempotent(self, tmp_path):
        store = new_store(tmp_path / "meta.wal")
        for i in range(1, 4):
            store.put(i, payload(20000, i), 64 * KB)
        first = PageStore.recover(store.image(), WriteAheadLog(tmp_path / "meta.wal"))
        second = PageStore.recover(store.image(), WriteAheadLog(tmp_path / "meta.wal"))
        assert first.list() == second.list()
        assert {i: first.record(i) for i in first.list()} == {i: second.record(i) for i in second.list()}
        assert np.array_equal(first.allocator.free_map, second.allocator.free_map)

    @pytest.mark.parametrize(
        "cut_point, visible",
        [
            ("after-alloc-log", 1),
            ("after-chunk-write", 1),
            ("before-commit-log", 1),
            ("mid-commit-log", 1),
            ("after-commit-log", 2),
            ("after-free-log", 2),
        ],
    )
    def test_crash_leaves_old_or_new(self, tmp_path, cut_point, visible):
        store = new_store(tmp_path / "meta.wal")
        old, new = payload(20000, 1), payload(20000, 2)
        store.put(1, old, 64 * KB)
        store.injector.arm(cut_point)
        with pytest.raises(CrashInjected):
            store.put(1, new, 64 * KB)

        recovered = PageStore.recover(store.image(), WriteAheadLog(tmp_path / "meta.wal"))
        assert recovered.get(1) == (old if visible == 1 else new)
        assert recovered.record(1).generation == visible
        assert recovered.leaked_pages() == 0

    def test_crash_before_checkpoint_replace(self, tmp_path):
        store = new_store(tmp_path / "meta.wal")
        store.put(1, payload(20000, 1), 64 * KB)
        store.injector.arm("before-checkpoint-replace")
        with pytest.raises(CrashInjected):
            store.checkpoint()
        recovered = PageStore.recover(store.image(), WriteAheadLog(tmp_path / "meta.wal"))
        assert recovered.get(1) == payload(20000, 1)
        assert not (tmp_path / "meta.wal.ckpt-tmp").exists()

    def test_read_only_replay(self, tmp_path):
        store = new_store(tmp_path / "meta.wal")
        store.put(1, payload(20000, 1), 64 * KB)
        size = (tmp_path / "meta.wal").stat().st_size
        recovered = PageStore.recover(store.image(), WriteAheadLog(tmp_path / "meta.wal"), repair=False)
        assert recovered.list() == {1}
        assert (tmp_path / "meta.wal").stat().st_size == size


class TestDefragment:
    """测试整理复制"""

    def test_copy_removes_fragmentation(self, store):
        for i in range(1, 9):
            store.put(i, payload(USABLE, i), 64 * KB)
        for i in (1, 3, 5, 7):
            store.delete(i)
        store.commit_frees()
        store.put(9, payload(3 * USABLE, 9), 64 * KB)
        store.put(2, payload(USABLE, 22), 64 * KB)
        assert max(store.ground_truth().values()) > 1

        target = defragment_by_copy(store)
        assert set(target.ground_truth().values()) == {1}
        assert target.list() == store.list()
        for obj_id in target.list():
            assert target.get(obj_id) == store.get(obj_id)
            assert target.record(obj_id).generation == store.record(obj_id).generation
        pages = sum(len(store.record(i).placement) for i in store.list())
        assert target.data_bytes_written == pages * 8192

    def test_refused_without_room(self, store):
        store.put(1, payload(60 * USABLE, 1), 64 * KB)
        store.put(2, payload(60 * USABLE, 2), 64 * KB)
        with pytest.raises(DefragRefused) as exc:
            defragment_by_copy(store)
        estimate = exc.value.estimate
        assert estimate.required_bytes == 60 * 8192
        assert estimate.available_bytes == 8 * 8192
        assert estimate.shortfall_bytes == 52 * 8192


class TestCommitCadence:
    """测试释放页的提交节奏"""

    def test_pages_reused_after_interval(self):
        image = VolumeImage.create(VolumeGeometry(capacity_bytes=MB), "page")
        store = PageStore(image, WriteAheadLog(None), commit_interval=3)
        store.put(1, payload(USABLE), 64 * KB)
        store.put(2, payload(USABLE), 64 * KB)
        store.delete(1)
        record = store.put(3, payload(USABLE, 3), 64 * KB)
        assert record.placement == (0,)
        store.audit()

    def test_short_of_pages_forces_commit(self):
        image = VolumeImage.create(VolumeGeometry(capacity_bytes=MB), "page")
        store = PageStore(image, WriteAheadLog(None), commit_interval=1000)
        store.put(1, payload(100 * USABLE, 1), 64 * KB)
        data = payload(100 * USABLE, 2)
        store.delete(1)
        store.put(2, data, 64 * KB)
        assert store.get(2) == data
        assert store.leaked_pages() == 0
        store.audit()

    def test_invalid_interval(self):
        image = VolumeImage.create(VolumeGeometry(capacity_bytes=MB), "page")
        with pytest.raises(ConfigurationError):
            PageStore(image, WriteAheadLog(None), commit_interval=0)
