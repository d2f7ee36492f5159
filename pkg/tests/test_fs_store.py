"""fs_store.py 的单元测试"""

from unittest.mock import patch

import pytest

from blobbench.fs_store import (
    CUT_POINTS,
    FsStore,
    FsStoreConfig,
    blob_path,
    recover_sweep,
)
from blobbench.store import BlobNotFoundError, CrashInjected, StoreError
from blobbench.utils import KB


@pytest.fixture
def store(tmp_path):
    return FsStore(FsStoreConfig(root_directory=str(tmp_path / "objects")))


class TestFsStoreConfig:
    """测试后端配置"""

    def test_creates_directory(self, tmp_path):
        config = FsStoreConfig(root_directory=str(tmp_path / "a" / "b"))
        assert (tmp_path / "a" / "b").is_dir()
        assert config.fsync_policy == "flush_before_rename"

    def test_invalid_policy(self, tmp_path):
        with pytest.raises(ValueError):
            FsStoreConfig(root_directory=str(tmp_path), fsync_policy="sometimes")


class TestFsStore:
    """测试文件系统后端"""

    def test_put_get_delete(self, store):
        record = store.put(1, b"a" * 10 * KB, 4 * KB)
        assert record.size_bytes == 10 * KB
        assert store.get(1) == b"a" * 10 * KB
        assert store.list() == {1}
        assert blob_path(store.root, 1).exists()
        assert store.stats.append_requests == 3

        store.delete(1)
        assert store.list() == set()
        with pytest.raises(BlobNotFoundError):
            store.get(1)
        with pytest.raises(KeyError):
            store.delete(1)

    def test_overwrite(self, store):
        store.put(1, b"old", 4 * KB)
        record = store.put(1, b"new!", 4 * KB)
        assert record.generation == 2
        assert store.get(1) == b"new!"
        assert store.temp_files() == 0

    def test_no_ground_truth(self, store):
        store.put(1, b"x" * KB, 4 * KB)
        assert store.ground_truth() is None
        assert store.fragments(1) is None
        assert store.read_cost(1) == (KB, 1)
        assert store.audit() is None
        assert store.image() is None

    def test_empty_payload(self, store):
        with pytest.raises(StoreError):
            store.put(1, b"", 4 * KB)
        assert store.temp_files() == 0

    def test_reopen_sees_objects(self, store):
        store.put(5, b"z" * 100, 4 * KB)
        reopened = FsStore(store.config)
        assert reopened.list() == {5}
        assert reopened.get(5) == b"z" * 100


class TestSafeWrite:
    """测试安全写协议"""

    @pytest.mark.parametrize("cut_point", ["after-create", "after-write", "after-flush"])
    def test_crash_before_rename_keeps_old(self, store, cut_point):
        store.put(1, b"old" * KB, 4 * KB)
        store.injector.arm(cut_point)
        with pytest.raises(CrashInjected):
            store.put(1, b"new" * KB, 4 * KB)
        assert store.temp_files() == 1

        assert recover_sweep(store.root) == 1
        recovered = FsStore(store.config)
        assert recovered.get(1) == b"old" * KB
        assert recovered.temp_files() == 0

    def test_crash_after_rename_shows_new(self, store):
        store.put(1, b"old" * KB, 4 * KB)
        store.injector.arm("after-rename")
        with pytest.raises(CrashInjected):
            store.put(1, b"new" * KB, 4 * KB)
        assert recover_sweep(store.root) == 0
        assert FsStore(store.config).get(1) == b"new" * KB

    def test_cut_points(self):
        assert CUT_POINTS == ("after-create", "after-write", "after-flush", "after-rename")

    def test_write_error_removes_temp(self, store):
        store.put(1, b"old", 4 * KB)
        with patch.object(FsStore, "_write_all", side_effect=OSError("磁盘错误")):
            with pytest.raises(OSError):
                store.put(1, b"new", 4 * KB)
        assert store.temp_files() == 0
        assert store.get(1) == b"old"

    def test_rename_error_removes_temp(self, store):
        store.put(1, b"old", 4 * KB)
        with patch("blobbench.fs_store.os.replace", side_effect=OSError("重命名失败")):
            with pytest.raises(OSError):
                store.put(1, b"new", 4 * KB)
        assert store.temp_files() == 0
        assert store.get(1) == b"old"

    def test_flush_before_rename(self, store):
        """刷盘策略下文件和目录各 fsync 一次"""
        with patch("blobbench.fs_store.os.fsync") as fsync:
            store.put(1, b"x" * KB, 4 * KB)
        assert fsync.call_count == 2

    def test_no_flush(self, tmp_path):
        store = FsStore(FsStoreConfig(root_directory=str(tmp_path), fsync_policy="no_flush"))
        with patch("blobbench.fs_store.os.fsync") as fsync:
            store.put(1, b"x" * KB, 4 * KB)
        fsync.assert_not_called()
        assert store.get(1) == b"x" * KB
