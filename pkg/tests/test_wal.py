"""wal.py 的单元测试"""

import pytest

from blobbench.wal import (
    CHECKPOINT_TMP_SUFFIX,
    CommitEntry,
    PageListEntry,
    WalCorruptError,
    WalKind,
    WriteAheadLog,
    decode_commit,
    decode_page_list,
    encode_commit,
    encode_page_list,
    encode_snapshot,
    frame_record,
    parse_records,
    replay,
)


def commit(blob_id: int, generation: int, pages=(0, 1)) -> bytes:
    return encode_commit(CommitEntry(blob_id, len(pages) * 8000, generation, tuple(pages)))


def free(blob_id: int, generation: int, pages=(0, 1)) -> bytes:
    return encode_page_list(PageListEntry(blob_id, generation, tuple(pages)))


class TestEncoding:
    """测试记录编码"""

    def test_page_list_runs(self):
        entry = PageListEntry(3, 2, (10, 11, 12, 4, 5, 40))
        payload = encode_page_list(entry)
        # 头 16 字节 + 3 个游程
        assert len(payload) == 16 + 3 * 8
        assert decode_page_list(payload) == entry

    def test_commit_entry(self):
        entry = CommitEntry(9, 20000, 4, (7, 8, 9))
        assert decode_commit(encode_commit(entry)) == entry

    def test_truncated_payload(self):
        with pytest.raises(WalCorruptError):
            decode_commit(encode_commit(CommitEntry(9, 20000, 4, (7, 9)))[:-3])

    def test_parse_stops_at_corruption(self):
        raw = frame_record(1, WalKind.COMMIT_BLOB, commit(1, 1)) + frame_record(2, WalKind.COMMIT_BLOB, commit(2, 1))
        records, valid = parse_records(raw)
        assert [r.lsn for r in records] == [1, 2]
        assert valid == len(raw)

        damaged = bytearray(raw)
        damaged[-6] ^= 0xFF
        records, valid = parse_records(bytes(damaged))
        assert [r.lsn for r in records] == [1]
        assert valid == len(frame_record(1, WalKind.COMMIT_BLOB, commit(1, 1)))

    def test_non_increasing_lsn_ends_log(self):
        raw = frame_record(5, WalKind.COMMIT_BLOB, commit(1, 1)) + frame_record(5, WalKind.COMMIT_BLOB, commit(2, 1))
        records, _ = parse_records(raw)
        assert len(records) == 1


class TestWriteAheadLog:
    """测试日志文件"""

    def test_memory_log(self):
        wal = WriteAheadLog()
        assert wal.append(WalKind.ALLOC_PAGES, free(1, 1)) == 1
        assert wal.append(WalKind.COMMIT_BLOB, commit(1, 1)) == 2
        assert [r.kind for r in wal.records()] == [WalKind.ALLOC_PAGES, WalKind.COMMIT_BLOB]
        assert wal.bytes_appended == wal.size_bytes

    def test_reopen_continues_lsn(self, tmp_path):
        path = tmp_path / "meta.wal"
        wal = WriteAheadLog(path)
        wal.append(WalKind.COMMIT_BLOB, commit(1, 1))
        wal.append(WalKind.COMMIT_BLOB, commit(2, 1))

        reopened = WriteAheadLog(path)
        assert reopened.next_lsn == 3
        assert len(reopened.records()) == 2

    def test_torn_tail_repair(self, tmp_path):
        path = tmp_path / "meta.wal"
        wal = WriteAheadLog(path)
        wal.append(WalKind.COMMIT_BLOB, commit(1, 1))
        good_size = path.stat().st_size
        wal.append_torn(WalKind.COMMIT_BLOB, commit(2, 1))
        assert path.stat().st_size > good_size
        assert len(wal.records()) == 1

        reopened = WriteAheadLog(path)
        dropped = reopened.repair()
        assert dropped > 0
        assert path.stat().st_size == good_size
        assert reopened.append(WalKind.COMMIT_BLOB, commit(2, 1)) == 2
        assert [r.lsn for r in reopened.records()] == [1, 2]

    def test_repair_clean_log(self):
        wal = WriteAheadLog()
        wal.append(WalKind.COMMIT_BLOB, commit(1, 1))
        assert wal.repair() == 0

    def test_checkpoint_truncates(self, tmp_path):
        path = tmp_path / "meta.wal"
        wal = WriteAheadLog(path)
        for i in range(1, 6):
            wal.append(WalKind.COMMIT_BLOB, commit(i, 1))
        size_before = wal.size_bytes
        lsn = wal.checkpoint([CommitEntry(1, 16000, 1, (0, 1))])
        records = wal.records()
        assert len(records) == 1
        assert records[0].kind == WalKind.CHECKPOINT
        assert records[0].lsn == lsn == 6
        assert wal.size_bytes < size_before
        assert wal.checkpoints == 1
        assert not (tmp_path / ("meta.wal" + CHECKPOINT_TMP_SUFFIX)).exists()

    def test_crash_before_replace_keeps_old_log(self, tmp_path):
        """替换前崩溃时旧日志完整，临时文件在修复时删除"""
        path = tmp_path / "meta.wal"
        wal = WriteAheadLog(path)
        wal.append(WalKind.COMMIT_BLOB, commit(1, 1))

        def crash():
            raise RuntimeError("断电")

        with pytest.raises(RuntimeError):
            wal.checkpoint([CommitEntry(1, 16000, 1, (0, 1))], before_replace=crash)
        tmp = tmp_path / ("meta.wal" + CHECKPOINT_TMP_SUFFIX)
        assert tmp.exists()
        assert [r.kind for r in wal.records()] == [WalKind.COMMIT_BLOB]

        WriteAheadLog(path).repair()
        assert not tmp.exists()


class TestReplay:
    """测试日志重放"""

    def _records(self, *items):
        raw = b"".join(frame_record(i + 1, kind, payload) for i, (kind, payload) in enumerate(items))
        records, _ = parse_records(raw)
        return records

    def test_commit_makes_visible(self):
        state = replay(self._records((WalKind.ALLOC_PAGES, free(1, 1)), (WalKind.COMMIT_BLOB, commit(1, 1))))
        assert set(state) == {1}

    def test_uncommitted_alloc_rolls_back(self):
        state = replay(self._records((WalKind.ALLOC_PAGES, free(1, 1))))
        assert state == {}

    def test_free_matches_generation(self):
        """只有 generation 与可见版本一致的 FreePages 才表示删除"""
        state = replay(self._records(
            (WalKind.COMMIT_BLOB, commit(1, 1)),
            (WalKind.COMMIT_BLOB, commit(1, 2, pages=(5, 6))),
            (WalKind.FREE_PAGES, free(1, 1)),
        ))
        assert state[1].generation == 2
        assert state[1].pages == (5, 6)

        state = replay(self._records(
            (WalKind.COMMIT_BLOB, commit(1, 1)),
            (WalKind.FREE_PAGES, free(1, 1)),
        ))
        assert state == {}

    def test_starts_from_last_checkpoint(self):
        snapshot = encode_snapshot([CommitEntry(7, 8000, 3, (9,))])
        state = replay(self._records(
            (WalKind.COMMIT_BLOB, commit(1, 1)),
            (WalKind.CHECKPOINT, snapshot),
            (WalKind.COMMIT_BLOB, commit(2, 1, pages=(3,))),
        ))
        assert set(state) == {7, 2}
        assert state[7].generation == 3
