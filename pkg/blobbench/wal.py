"""预写日志模块

page 后端的元数据日志。日志只记录页号列表和对象元数据，从不包含对象内容。

记录格式（小端）：

    u32 body_len | body | u32 crc32(body)
    body = u64 lsn | u8 kind | payload

页号列表在 payload 中编码为 (u32 起始页, u32 页数) 游程。
读取时遇到不完整或校验失败的记录即视为日志尾部损坏，恢复时截断到最后一条完整记录。
"""

import os
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from blobbench.logger import get_logger

_LEN = struct.Struct("<I")
_BODY_HEAD = struct.Struct("<QB")
_CRC = struct.Struct("<I")
_PAGES_HEAD = struct.Struct("<QII")  # blob id, generation, 游程数
_COMMIT_HEAD = struct.Struct("<QQII")  # blob id, size, generation, 游程数
_SNAPSHOT_HEAD = struct.Struct("<I")
_RUN = struct.Struct("<II")

CHECKPOINT_TMP_SUFFIX = ".ckpt-tmp"


class WalKind(IntEnum):
    ALLOC_PAGES = 1
    FREE_PAGES = 2
    COMMIT_BLOB = 3
    CHECKPOINT = 4


class WalCorruptError(ValueError):
    """日志记录无法解析"""
    pass


@dataclass(frozen=True)
class WalRecord:
    lsn: int
    kind: WalKind
    payload: bytes


@dataclass(frozen=True)
class PageListEntry:
    """AllocPages / FreePages 的内容"""

    blob_id: int
    generation: int
    pages: Tuple[int, ...]


@dataclass(frozen=True)
class CommitEntry:
    """CommitBlob 的内容；Checkpoint 是一组 CommitEntry"""

    blob_id: int
    size_bytes: int
    generation: int
    pages: Tuple[int, ...]


def _encode_runs(pages: Sequence[int]) -> Tuple[int, bytes]:
    runs: List[List[int]] = []
    for page in pages:
        if runs and runs[-1][0] + runs[-1][1] == page:
            runs[-1][1] += 1
        else:
            runs.append([page, 1])
    return len(runs), b"".join(_RUN.pack(s, c) for s, c in runs)


def _decode_runs(buf: bytes, pos: int, n_runs: int) -> Tuple[Tuple[int, ...], int]:
    pages: List[int] = []
    for _ in range(n_runs):
        start, count = _RUN.unpack_from(buf, pos)
        pos += _RUN.size
        pages.extend(range(start, start + count))
    return tuple(pages), pos


def encode_page_list(entry: PageListEntry) -> bytes:
    n_runs, runs = _encode_runs(entry.pages)
    return _PAGES_HEAD.pack(entry.blob_id, entry.generation, n_runs) + runs


def decode_page_list(payload: bytes) -> PageListEntry:
    try:
        blob_id, generation, n_runs = _PAGES_HEAD.unpack_from(payload, 0)
        pages, _ = _decode_runs(payload, _PAGES_HEAD.size, n_runs)
    except struct.error as e:
        raise WalCorruptError(f"页号列表记录损坏: {e}")
    return PageListEntry(blob_id, generation, pages)


def _encode_commit(entry: CommitEntry) -> bytes:
    n_runs, runs = _encode_runs(entry.pages)
    return _COMMIT_HEAD.pack(entry.blob_id, entry.size_bytes, entry.generation, n_runs) + runs


def _decode_commit_at(payload: bytes, pos: int) -> Tuple[CommitEntry, int]:
    blob_id, size, generation, n_runs = _COMMIT_HEAD.unpack_from(payload, pos)
    pages, pos = _decode_runs(payload, pos + _COMMIT_HEAD.size, n_runs)
    return CommitEntry(blob_id, size, generation, pages), pos


def encode_commit(entry: CommitEntry) -> bytes:
    return _encode_commit(entry)


def decode_commit(payload: bytes) -> CommitEntry:
    try:
        entry, _ = _decode_commit_at(payload, 0)
    except struct.error as e:
        raise WalCorruptError(f"提交记录损坏: {e}")
    return entry


def encode_snapshot(entries: Sequence[CommitEntry]) -> bytes:
    return _SNAPSHOT_HEAD.pack(len(entries)) + b"".join(_encode_commit(e) for e in entries)


def decode_snapshot(payload: bytes) -> List[CommitEntry]:
    try:
        (count,) = _SNAPSHOT_HEAD.unpack_from(payload, 0)
        pos = _SNAPSHOT_HEAD.size
        entries = []
        for _ in range(count):
            entry, pos = _decode_commit_at(payload, pos)
            entries.append(entry)
    except struct.error as e:
        raise WalCorruptError(f"检查点记录损坏: {e}")
    return entries


def frame_record(lsn: int, kind: WalKind, payload: bytes) -> bytes:
    """把一条记录编码成带长度前缀和 CRC 的帧"""
    body = _BODY_HEAD.pack(lsn, int(kind)) + payload
    return _LEN.pack(len(body)) + body + _CRC.pack(zlib.crc32(body))


def parse_records(raw: bytes) -> Tuple[List[WalRecord], int]:
    """
    解析日志字节

    Returns:
        (有效记录列表, 有效前缀的字节长度)；遇到损坏的尾部时在其之前停止
    """
    records: List[WalRecord] = []
    pos = 0
    last_lsn = -1
    while pos + _LEN.size <= len(raw):
        (body_len,) = _LEN.unpack_from(raw, pos)
        end = pos + _LEN.size + body_len + _CRC.size
        if body_len < _BODY_HEAD.size or end > len(raw):
            break
        body = raw[pos + _LEN.size:pos + _LEN.size + body_len]
        (crc,) = _CRC.unpack_from(raw, end - _CRC.size)
        if zlib.crc32(body) != crc:
            break
        lsn, kind = _BODY_HEAD.unpack_from(body, 0)
        if lsn <= last_lsn or kind not in WalKind._value2member_map_:
            break
        records.append(WalRecord(lsn, WalKind(kind), bytes(body[_BODY_HEAD.size:])))
        last_lsn = lsn
        pos = end
    return records, pos


class WriteAheadLog:
    """
    追加写的元数据日志

    path 为 None 时日志保存在内存中（桌面规模基准使用）；否则每次追加后
    flush + fsync。检查点把当前已提交状态写成单条 Checkpoint 记录，
    通过临时文件 + os.replace 原子地替换整个日志（即日志截断）。
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, sync: bool = True):
        self.path = Path(path) if path is not None else None
        self.sync = sync
        self._mem = bytearray()
        self.bytes_appended = 0
        self.checkpoints = 0
        self.truncated_bytes = 0
        self.logger = get_logger(__name__)

        raw = self._read_raw()
        records, valid = parse_records(raw)
        self.next_lsn = records[-1].lsn + 1 if records else 1
        self._valid_length = valid

    def _read_raw(self) -> bytes:
        if self.path is None:
            return bytes(self._mem)
        if not self.path.exists():
            return b""
        return self.path.read_bytes()

    @property
    def size_bytes(self) -> int:
        if self.path is None:
            return len(self._mem)
        return self.path.stat().st_size if self.path.exists() else 0

    def _write(self, data: bytes) -> None:
        if self.path is None:
            self._mem += data
            return
        with open(self.path, "ab") as f:
            f.write(data)
            f.flush()
            if self.sync:
                os.fsync(f.fileno())

    def append(self, kind: WalKind, payload: bytes) -> int:
        """
        追加一条记录

        Returns:
            分配给该记录的 LSN
        """
        lsn = self.next_lsn
        frame = frame_record(lsn, kind, payload)
        self._write(frame)
        self.next_lsn += 1
        self.bytes_appended += len(frame)
        return lsn

    def append_torn(self, kind: WalKind, payload: bytes) -> None:
        """只写入记录帧的前一半（模拟写到一半断电）"""
        frame = frame_record(self.next_lsn, kind, payload)
        self._write(frame[:len(frame) // 2])

    def records(self) -> List[WalRecord]:
        """当前日志中的有效记录"""
        records, _ = parse_records(self._read_raw())
        return records

    def repair(self) -> int:
        """
        截断损坏的尾部

        Returns:
            被截掉的字节数
        """
        raw = self._read_raw()
        records, valid = parse_records(raw)
        dropped = len(raw) - valid
        if dropped:
            if self.path is None:
                del self._mem[valid:]
            else:
                with open(self.path, "r+b") as f:
                    f.truncate(valid)
                    f.flush()
                    if self.sync:
                        os.fsync(f.fileno())
            self.truncated_bytes += dropped
            self.logger.warning(f"日志尾部损坏，已截断 {dropped} 字节")
        self.next_lsn = records[-1].lsn + 1 if records else 1
        tmp = self._tmp_path()
        if tmp is not None and tmp.exists():
            tmp.unlink()
            self.logger.warning(f"删除未完成的检查点临时文件: {tmp}")
        return dropped

    def _tmp_path(self) -> Optional[Path]:
        if self.path is None:
            return None
        return self.path.with_name(self.path.name + CHECKPOINT_TMP_SUFFIX)

    def checkpoint(self, entries: Sequence[CommitEntry], before_replace=None) -> int:
        """
        写检查点并截断日志

        Args:
            entries: 当前全部已提交对象
            before_replace: 临时文件写好、替换之前调用的回调（故障注入用）

        Returns:
            检查点记录的 LSN
        """
        lsn = self.next_lsn
        frame = frame_record(lsn, WalKind.CHECKPOINT, encode_snapshot(entries))
        if self.path is None:
            if before_replace is not None:
                before_replace()
            self._mem = bytearray(frame)
        else:
            tmp = self._tmp_path()
            with open(tmp, "wb") as f:
                f.write(frame)
                f.flush()
                if self.sync:
                    os.fsync(f.fileno())
            if before_replace is not None:
                before_replace()
            os.replace(tmp, self.path)
            _fsync_dir(self.path.parent)
        self.next_lsn += 1
        self.bytes_appended += len(frame)
        self.checkpoints += 1
        self.logger.debug(f"检查点: lsn={lsn}, 对象数={len(entries)}, 日志大小={len(frame)}")
        return lsn


def replay(records: Sequence[WalRecord]) -> Dict[int, CommitEntry]:
    """
    由日志重建已提交状态

    从最后一个检查点开始：CommitBlob 使新版本可见；FreePages 只有在其
    generation 等于当前可见版本时才表示删除。AllocPages 不影响结果，
    未提交的分配因此自然回滚。
    """
    state: Dict[int, CommitEntry] = {}
    start = 0
    for i, rec in enumerate(records):
        if rec.kind == WalKind.CHECKPOINT:
            start = i
    for rec in records[start:]:
        if rec.kind == WalKind.CHECKPOINT:
            state = {e.blob_id: e for e in decode_snapshot(rec.payload)}
        elif rec.kind == WalKind.COMMIT_BLOB:
            entry = decode_commit(rec.payload)
            state[entry.blob_id] = entry
        elif rec.kind == WalKind.FREE_PAGES:
            freed = decode_page_list(rec.payload)
            current = state.get(freed.blob_id)
            if current is not None and current.generation == freed.generation:
                del state[freed.blob_id]
    return state


def _fsync_dir(directory: Path) -> None:
    """fsync 目录项（平台不支持时忽略）"""
    try:
        fd = os.open(directory, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)
