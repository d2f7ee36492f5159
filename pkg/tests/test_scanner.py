"""scanner.py 的单元测试"""

import json

import pytest

from blobbench.config import ConfigurationError, VolumeGeometry
from blobbench.extent_store import ExtentStore
from blobbench.page_store import PageStore
from blobbench.scanner import (
    FRAG_COLUMNS,
    FRAG_SCHEMA,
    MAGIC,
    LiveObject,
    ScanMismatchError,
    find_markers,
    make_payload,
    marker_object_field,
    read_live_csv,
    scan_image,
    validate_against_ntfs_style_report,
    write_frag_csv,
    write_frag_json,
    write_live_csv,
)
from blobbench.store import VolumeImage
from blobbench.utils import KB, MB
from blobbench.wal import WriteAheadLog


def place(size: int, *pieces) -> bytes:
    """按 (偏移, 字节) 把若干片段放进一块全零区域"""
    buf = bytearray(size)
    for offset, data in pieces:
        buf[offset:offset + len(data)] = data
    return bytes(buf)


class TestPayload:
    """测试带标记负载的生成"""

    def test_one_marker_per_kb(self):
        data = make_payload(1, KB, seed=0)
        assert len(data) == KB
        assert data[:8] == MAGIC
        assert len(find_markers(memoryview(data))) == 1

    def test_ten_megabyte_object(self):
        data = make_payload(3, 10 * MB, seed=5)
        hits = find_markers(memoryview(data))
        assert len(hits) == 10240
        assert sorted(int(s) for s in hits[:, 1]) == list(range(10240))

    def test_deterministic(self):
        assert make_payload(1, 4 * KB, seed=9) == make_payload(1, 4 * KB, seed=9)
        assert make_payload(1, 4 * KB, seed=9) != make_payload(1, 4 * KB, seed=9, version=2)
        assert make_payload(1, 4 * KB, seed=9) != make_payload(2, 4 * KB, seed=9)

    def test_version_in_object_field(self):
        field = marker_object_field(7, 3)
        hits = find_markers(memoryview(make_payload(7, KB, seed=0, version=3)))
        assert int(hits[0, 0]) == field
        assert field & ((1 << 48) - 1) == 7
        assert field >> 48 == 3

    def test_size_must_be_aligned(self):
        with pytest.raises(ConfigurationError):
            make_payload(1, 1000, seed=0)
        with pytest.raises(ConfigurationError):
            make_payload(1, 0, seed=0)

    def test_corrupt_marker_ignored(self):
        data = bytearray(make_payload(1, 2 * KB, seed=0))
        data[KB + 12] ^= 0xFF
        assert len(find_markers(memoryview(bytes(data)))) == 1


class TestScan:
    """测试碎片统计"""

    def test_contiguous_object(self):
        data = make_payload(1, 16 * KB, seed=0)
        report = scan_image(place(64 * KB, (4 * KB, data)))
        assert report.fragments() == {1: 1}
        assert report.objects[1].expected_markers == 16
        assert report.objects[1].recovered_markers == 16

    def test_split_object(self):
        data = make_payload(1, 16 * KB, seed=0)
        report = scan_image(place(128 * KB, (0, data[:8 * KB]), (64 * KB, data[8 * KB:])))
        assert report.fragments() == {1: 2}

    def test_reversed_pieces(self):
        """后半段物理位置在前也算断开"""
        data = make_payload(1, 16 * KB, seed=0)
        report = scan_image(place(64 * KB, (0, data[8 * KB:]), (8 * KB, data[:8 * KB])))
        assert report.fragments() == {1: 2}

    def test_small_gap_absorbed(self):
        data = make_payload(1, 16 * KB, seed=0)
        image = place(64 * KB, (0, data[:8 * KB]), (8 * KB + 96, data[8 * KB:]))
        assert scan_image(image).fragments() == {1: 1}

    def test_gap_beyond_allowance(self):
        data = make_payload(1, 16 * KB, seed=0)
        image = place(64 * KB, (0, data[:8 * KB]), (9 * KB, data[8 * KB:]))
        assert scan_image(image).fragments() == {1: 2}
        assert scan_image(image, gap_allowance=1024).fragments() == {1: 1}

    def test_missing_sequence_breaks(self):
        data = make_payload(1, 4 * KB, seed=0)
        image = place(16 * KB, (0, data[:2 * KB]), (3 * KB, data[3 * KB:]))
        report = scan_image(image, [LiveObject(1, 0, 4 * KB)])
        assert report.objects[1].recovered_markers == 3
        assert report.objects[1].expected_markers == 4
        assert report.fragments() == {1: 2}

    def test_stale_versions_filtered(self):
        old = make_payload(1, 8 * KB, seed=0, version=1)
        new = make_payload(1, 8 * KB, seed=0, version=2)
        image = place(64 * KB, (0, old[:4 * KB]), (16 * KB, new), (40 * KB, old[4 * KB:]))
        report = scan_image(image, [LiveObject(1, 2, 8 * KB)])
        assert report.fragments() == {1: 1}
        assert report.objects[1].recovered_markers == 8

    def test_without_live_list_prefers_most_markers(self):
        old = make_payload(1, 4 * KB, seed=0, version=1)
        new = make_payload(1, 8 * KB, seed=0, version=2)
        report = scan_image(place(64 * KB, (0, old), (16 * KB, new)))
        assert report.objects[1].recovered_markers == 8

    def test_empty_image_warns(self):
        report = scan_image(bytes(64 * KB))
        assert report.objects == {}
        assert report.warnings
        assert report.mean_fragments == 0.0

        report = scan_image(bytes(64 * KB), [LiveObject(4, 1, 8 * KB)])
        assert report.objects[4].recovered_markers == 0
        assert report.objects[4].expected_markers == 8

    def test_summary_metrics(self):
        a = make_payload(1, 64 * KB, seed=0)
        b = make_payload(2, 64 * KB, seed=0)
        image = place(256 * KB, (0, a), (64 * KB, b[:32 * KB]), (192 * KB, b[32 * KB:]))
        report = scan_image(image, storage_age="2")
        assert report.mean_fragments == 1.5
        assert report.fragments_per_64kb == 1.5
        summary = report.summary()
        assert summary["schema"] == FRAG_SCHEMA
        assert summary["storage_age"] == "2"
        assert summary["expected_markers"] == 128


class TestBackendsAgree:
    """扫描结果与分配器真值逐对象一致"""

    def test_extent_backend(self):
        store = ExtentStore(VolumeImage.create(VolumeGeometry(capacity_bytes=MB), "extent"))
        for obj_id in range(1, 5):
            store.put(obj_id, make_payload(obj_id, 8 * KB, seed=1, version=1), 64 * KB)
        store.delete(1)
        store.delete(3)
        store.commit_frees()
        store.put(5, make_payload(5, 16 * KB, seed=1, version=1), 4 * KB)

        live = [LiveObject(i, 1, store.record(i).size_bytes) for i in store.list()]
        report = scan_image(store.image(), live)
        assert report.fragments()[5] == 2
        assert validate_against_ntfs_style_report(report, store.ground_truth()).empty

    def test_page_headers_absorbed(self):
        store = PageStore(VolumeImage.create(VolumeGeometry(capacity_bytes=MB), "page"), WriteAheadLog())
        store.put(1, make_payload(1, 40 * KB, seed=1, version=1), 64 * KB)
        store.put(2, make_payload(2, 8 * KB, seed=1, version=1), 64 * KB)
        store.delete(1)
        store.commit_frees()
        store.put(3, make_payload(3, 60 * KB, seed=1, version=1), 64 * KB)

        live = [LiveObject(i, 1, store.record(i).size_bytes) for i in store.list()]
        report = scan_image(store.image(), live)
        assert report.fragments()[2] == 1
        assert report.fragments()[3] == 2
        assert validate_against_ntfs_style_report(report, store.ground_truth()).empty


class TestValidate:
    """测试与真值的比对"""

    def _report(self):
        return scan_image(place(32 * KB, (0, make_payload(1, 8 * KB, seed=0))))

    def test_off_by_one(self):
        diff = validate_against_ntfs_style_report(self._report(), {1: 2})
        assert diff.differences == {1: -1}
        assert not diff.empty

    def test_informational(self):
        diff = validate_against_ntfs_style_report(self._report(), None)
        assert diff.empty
        assert diff.informational

    def test_object_sets_differ(self):
        with pytest.raises(ScanMismatchError):
            validate_against_ntfs_style_report(self._report(), {1: 1, 2: 1})


class TestFiles:
    """测试输出文件"""

    def test_frag_csv(self, tmp_path):
        report = scan_image(place(32 * KB, (0, make_payload(1, 8 * KB, seed=0))))
        path = write_frag_csv(report, tmp_path / "out" / "frag.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == f"#schema={FRAG_SCHEMA}"
        assert lines[1] == ",".join(FRAG_COLUMNS)
        assert lines[2] == "1,8,8,1"

    def test_frag_json(self, tmp_path):
        report = scan_image(place(32 * KB, (0, make_payload(1, 8 * KB, seed=0))))
        path = write_frag_json(report, tmp_path / "frag.json")
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["objects"] == 1
        assert data["mean_fragments"] == 1.0

    def test_live_csv(self, tmp_path):
        objects = [LiveObject(2, 1, 8 * KB), LiveObject(1, 3, 4 * KB)]
        path = write_live_csv(objects, tmp_path / "live.csv")
        assert read_live_csv(path) == sorted(objects)

    def test_live_csv_ids_only(self, tmp_path):
        path = tmp_path / "live.csv"
        path.write_text("object_id\n5\n9\n", encoding="utf-8")
        assert read_live_csv(path) == [LiveObject(5), LiveObject(9)]
