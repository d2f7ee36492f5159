"""文件系统后端

每个对象一个文件，全部放在同一目录下，用安全写协议更新：
创建临时文件 → 按写缓冲追加 → 刷盘 → 原子替换正式文件名。
"""

import os
import re
import shutil
from pathlib import Path
from typing import Dict, Literal, Optional, Set

from pydantic import BaseModel, Field, field_validator

from blobbench.logger import get_logger
from blobbench.store import (
    BlobNotFoundError,
    BlobRecord,
    BlobStore,
    CrashInjected,
    Payload,
    StoreError,
    iter_chunks,
)

CUT_POINTS = ("after-create", "after-write", "after-flush", "after-rename")

BLOB_SUFFIX = ".blob"
TEMP_MARK = ".tmp-"

_BLOB_NAME = re.compile(r"^([0-9a-f]{16})\.blob$")
_TEMP_NAME = re.compile(r"^[0-9a-f]{16}\.blob\.tmp-\d+$")


class FsStoreConfig(BaseModel):
    """文件系统后端配置"""

    root_directory: str = Field(..., description="对象文件所在目录")
    fsync_policy: Literal["flush_before_rename", "no_flush"] = Field(default="flush_before_rename")

    @field_validator("root_directory")
    @classmethod
    def ensure_directory(cls, v: str) -> str:
        """目录不存在时创建，并检查可写"""
        path = Path(v).expanduser()
        path.mkdir(parents=True, exist_ok=True)
        if not os.access(path, os.W_OK):
            raise ValueError(f"目录不可写: {path}")
        return str(path.absolute())


def blob_path(root: Path, obj_id: int) -> Path:
    return root / f"{obj_id:016x}{BLOB_SUFFIX}"


def temp_path(root: Path, obj_id: int, generation: int) -> Path:
    return root / f"{obj_id:016x}{BLOB_SUFFIX}{TEMP_MARK}{generation}"


def fsync_directory(directory: Path) -> bool:
    """
    刷新目录项

    Returns:
        平台支持并成功时返回 True
    """
    try:
        fd = os.open(directory, os.O_RDONLY)
    except OSError:
        return False
    try:
        os.fsync(fd)
        return True
    except OSError:
        return False
    finally:
        os.close(fd)


def recover_sweep(root) -> int:
    """
    删除目录中所有残留的临时文件

    Args:
        root: 对象目录

    Returns:
        删除的临时文件数

    Raises:
        OSError: 目录无法读取
    """
    logger = get_logger(__name__)
    root = Path(root)
    removed = 0
    for entry in os.scandir(root):
        if _TEMP_NAME.match(entry.name):
            os.unlink(entry.path)
            removed += 1
    if removed:
        fsync_directory(root)
        logger.info(f"清理残留临时文件: 目录={root}, 数量={removed}")
    return removed


class FsStore(BlobStore):
    """文件系统后端"""

    backend_name = "fs"
    cut_points = CUT_POINTS

    def __init__(self, config: FsStoreConfig):
        super().__init__()
        self.config = config
        self.root = Path(config.root_directory)
        self._generations: Dict[int, int] = {}
        self._sizes: Dict[int, int] = {}
        self.logger = get_logger(__name__)
        for obj_id in self._scan_ids():
            self._generations[obj_id] = 0
            self._sizes[obj_id] = blob_path(self.root, obj_id).stat().st_size
        self.logger.info(
            f"文件系统后端初始化: 目录={self.root}, 已有对象={len(self._sizes)}, "
            f"刷盘策略={config.fsync_policy}"
        )

    def _scan_ids(self) -> Set[int]:
        ids = set()
        for entry in os.scandir(self.root):
            match = _BLOB_NAME.match(entry.name)
            if match:
                ids.add(int(match.group(1), 16))
        return ids

    def _write_all(self, fd: int, data: bytes) -> None:
        view = memoryview(data)
        while view:
            n = os.write(fd, view)
            view = view[n:]

    def safe_write(self, obj_id: int, payload: Payload, buffer_bytes: int) -> BlobRecord:
        """
        安全写

        步骤依次为：(1) 创建临时文件 (2) 按 buffer_bytes 追加 (3) 刷盘
        (4) 原子替换正式文件名。任何时刻正式文件名要么是完整旧版本，要么是完整新版本。

        Raises:
            StoreError: 负载为空
            CrashInjected: 故障注入（临时文件留给 recover_sweep）
            OSError: I/O 失败（临时文件已删除，正式文件不变）
        """
        generation = self._generations.get(obj_id, 0) + 1
        final = blob_path(self.root, obj_id)
        tmp = temp_path(self.root, obj_id, generation)
        flush = self.config.fsync_policy == "flush_before_rename"

        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        size = 0
        try:
            self.injector.check("after-create")
            for chunk in iter_chunks(payload, buffer_bytes):
                self.stats.append_requests += 1
                self._write_all(fd, chunk)
                size += len(chunk)
                self.injector.check("after-write")
            if size == 0:
                raise StoreError(f"负载不能为空: id={obj_id}")
            if flush:
                os.fsync(fd)
            self.injector.check("after-flush")
        except CrashInjected:
            os.close(fd)
            raise
        except BaseException:
            os.close(fd)
            tmp.unlink(missing_ok=True)
            raise
        os.close(fd)

        try:
            os.replace(tmp, final)
        except OSError:
            tmp.unlink(missing_ok=True)
            raise
        if flush:
            fsync_directory(self.root)
        self._generations[obj_id] = generation
        self._sizes[obj_id] = size
        self.stats.bytes_written += size
        self.stats.puts += 1
        self.injector.check("after-rename")
        return BlobRecord(obj_id, size, (), generation)

    def put(self, obj_id: int, payload: Payload, write_buffer_bytes: int) -> BlobRecord:
        return self.safe_write(obj_id, payload, write_buffer_bytes)

    def get(self, obj_id: int) -> bytes:
        path = blob_path(self.root, obj_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise BlobNotFoundError(f"对象不存在: {obj_id}")
        self.stats.bytes_read += len(data)
        return data

    def delete(self, obj_id: int) -> None:
        self._require_live(obj_id)
        os.unlink(blob_path(self.root, obj_id))
        if self.config.fsync_policy == "flush_before_rename":
            fsync_directory(self.root)
        self._sizes.pop(obj_id, None)
        self._generations.pop(obj_id, None)

    def _require_live(self, obj_id: int) -> None:
        if not blob_path(self.root, obj_id).exists():
            raise BlobNotFoundError(f"对象不存在: {obj_id}")

    def list(self) -> Set[int]:
        return self._scan_ids()

    def free_bytes(self) -> int:
        return shutil.disk_usage(self.root).free

    def ground_truth(self) -> Optional[Dict[int, int]]:
        return None

    def temp_files(self) -> int:
        """目录中残留的临时文件数"""
        return sum(1 for entry in os.scandir(self.root) if _TEMP_NAME.match(entry.name))

    def drop_caches(self) -> None:
        """让内核丢弃对象文件的页缓存（平台不支持时跳过）"""
        if not hasattr(os, "posix_fadvise"):
            return
        for obj_id in self._scan_ids():
            fd = os.open(blob_path(self.root, obj_id), os.O_RDONLY)
            try:
                os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
            finally:
                os.close(fd)
