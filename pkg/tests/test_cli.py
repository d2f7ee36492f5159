"""cli.py 的单元测试"""

import json

import pytest
import yaml

from blobbench.cli import build_parser, run
from blobbench.extent_store import ExtentStore
from blobbench.logger import setup_logger
from blobbench.page_store import PageStore
from blobbench.scanner import make_payload
from blobbench.store import VolumeImage
from blobbench.utils import KB, MB
from blobbench.wal import WriteAheadLog


@pytest.fixture(autouse=True)
def home(tmp_path, monkeypatch):
    """日志与默认配置写到临时目录"""
    monkeypatch.setenv("HOME", str(tmp_path / "home"))
    monkeypatch.delenv("BLOBBENCH_RESULTS", raising=False)
    setup_logger(str(tmp_path / "logs"), force=True)
    return tmp_path / "home"


def last_json(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


def init_image(tmp_path, backend: str, capacity: int = MB):
    path = tmp_path / f"{backend}.img"
    assert run(["init", "--image", str(path), "--backend", backend, "--capacity", str(capacity)]) == 0
    return path


class TestParser:
    """测试参数解析"""

    def test_missing_subcommand(self):
        assert run([]) == 2

    def test_missing_required(self):
        assert run(["scan"]) == 2

    def test_bad_choice(self):
        assert run(["init", "--image", "x.img", "--backend", "zfs"]) == 2

    def test_seed_range(self):
        assert run(["bench", "--seed", str(2**64)]) == 2
        args = build_parser().parse_args(["bench", "--seed", "0xff"])
        assert args.seed == 255

    def test_version(self, capsys):
        assert run(["--version"]) == 0
        assert "blobbench" in capsys.readouterr().out


class TestInitAndScan:
    """测试格式化与扫描"""

    def test_init(self, tmp_path, capsys):
        path = init_image(tmp_path, "extent")
        out = last_json(capsys.readouterr().out)
        assert out["backend"] == "extent"
        assert out["capacity_bytes"] == MB
        assert path.stat().st_size == out["file_bytes"]

    def test_init_bad_geometry(self, tmp_path, capsys):
        code = run(["init", "--image", str(tmp_path / "x.img"), "--backend", "page", "--capacity", "1000"])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigurationError"

    def test_scan(self, tmp_path, capsys):
        path = init_image(tmp_path, "extent")
        store = ExtentStore(VolumeImage.open(path))
        store.put(1, make_payload(1, 64 * KB, 0, 1), 64 * KB)
        store.put(2, make_payload(2, 32 * KB, 0, 1), 64 * KB)
        store.close()
        capsys.readouterr()

        out_dir = tmp_path / "scan"
        assert run(["scan", "--image", str(path), "--out", str(out_dir)]) == 0
        out = last_json(capsys.readouterr().out)
        assert out["objects"] == 2
        assert out["mean_fragments"] == 1.0
        assert (out_dir / "frag.csv").exists()
        assert (out_dir / "frag.json").exists()

    def test_scan_with_live_list(self, tmp_path, capsys):
        path = init_image(tmp_path, "extent")
        store = ExtentStore(VolumeImage.open(path))
        store.put(1, make_payload(1, 16 * KB, 0, 1), 64 * KB)
        store.close()
        live = tmp_path / "live.csv"
        live.write_text("object_id,version,size_bytes\n1,1,16384\n", encoding="utf-8")
        capsys.readouterr()

        assert run(["scan", "--image", str(path), "--live", str(live), "--out", str(tmp_path)]) == 0
        out = last_json(capsys.readouterr().out)
        assert out["expected_markers"] == 16

    def test_scan_unformatted(self, tmp_path, capsys):
        path = init_image(tmp_path, "page")
        capsys.readouterr()
        assert run(["scan", "--image", str(path), "--out", str(tmp_path)]) == 0
        out = last_json(capsys.readouterr().out)
        assert out["objects"] == 0
        assert out["warnings"]

    def test_scan_not_an_image(self, tmp_path, capsys):
        junk = tmp_path / "junk.img"
        junk.write_bytes(b"\0" * 100)
        assert run(["scan", "--image", str(junk)]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ImageFormatError"


class TestDefrag:
    """测试整理子命令"""

    def test_extent(self, tmp_path, capsys):
        path = init_image(tmp_path, "extent")
        store = ExtentStore(VolumeImage.open(path))
        for obj_id in range(1, 5):
            store.put(obj_id, make_payload(obj_id, 8 * KB, 0, 1), 64 * KB)
        store.delete(1)
        store.delete(3)
        store.commit_frees()
        store.put(5, make_payload(5, 16 * KB, 0, 1), 4 * KB)
        store.close()
        capsys.readouterr()

        assert run(["defrag", "--image", str(path), "--backend", "extent"]) == 0
        out = last_json(capsys.readouterr().out)
        assert out["relocated"] == 1
        assert out["mean_fragments_after"] == 1.0
        assert out["mean_fragments_before"] > 1.0

    def test_page_copy(self, tmp_path, capsys):
        path = init_image(tmp_path, "page")
        store = PageStore(VolumeImage.open(path), WriteAheadLog(path.with_suffix(".wal")))
        for obj_id in range(1, 5):
            store.put(obj_id, make_payload(obj_id, 7 * KB, 0, 1), 64 * KB)
        store.delete(1)
        store.delete(3)
        store.commit_frees()
        store.put(5, make_payload(5, 15 * KB, 0, 1), 64 * KB)
        store.close()
        capsys.readouterr()

        assert run(["defrag", "--image", str(path), "--backend", "page"]) == 0
        out = last_json(capsys.readouterr().out)
        assert out["objects"] == 3
        assert out["mean_fragments_after"] == 1.0
        assert (tmp_path / "page.img.defrag").exists()
        assert (tmp_path / "page.img.defrag.wal").exists()

    def test_page_refused(self, tmp_path, capsys):
        path = init_image(tmp_path, "page")
        store = PageStore(VolumeImage.open(path), WriteAheadLog(path.with_suffix(".wal")))
        store.put(1, make_payload(1, 480 * KB, 0, 1), 64 * KB)
        store.put(2, make_payload(2, 480 * KB, 0, 1), 64 * KB)
        store.close()
        capsys.readouterr()

        assert run(["defrag", "--image", str(path), "--backend", "page"]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "DefragRefused"
        assert err["shortfall_bytes"] > 0
        assert not (tmp_path / "page.img.defrag").exists()

    def test_backend_mismatch(self, tmp_path, capsys):
        path = init_image(tmp_path, "extent")
        capsys.readouterr()
        assert run(["defrag", "--image", str(path), "--backend", "page"]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigurationError"


class TestBenchAndReport:
    """测试基准与图表子命令"""

    def _config(self, tmp_path):
        cell = {
            "seed": 1,
            "size_mean_bytes": 256 * KB,
            "volume_capacity_bytes": 16 * MB,
            "measurement_ages": [0, 1],
            "read_sample_count": 10,
        }
        config = {
            "results_dir": str(tmp_path / "ignored"),
            "cells": [
                dict(cell, name="extent-small", backend="extent"),
                dict(cell, name="page-small", backend="page"),
            ],
        }
        path = tmp_path / "experiment.yaml"
        path.write_text(yaml.safe_dump(config), encoding="utf-8")
        return path

    def test_bench_then_report(self, tmp_path, capsys):
        config = self._config(tmp_path)
        results = tmp_path / "results"
        assert run(["bench", "--config", str(config), "--out", str(results)]) == 0
        out = last_json(capsys.readouterr().out)
        assert set(out["cells"]) == {"extent-small", "page-small"}
        assert out["cells"]["page-small"]["mean_fragments"]["0"] == 1.0
        assert (results / "extent-small" / "phases.csv").exists()
        assert not (tmp_path / "ignored").exists()

        assert run(["report", "--in", str(results), "--fig", "frag-vs-age"]) == 0
        out = last_json(capsys.readouterr().out)
        assert out["figures"] == [str(results / "figures" / "frag-vs-age.svg")]

    def test_bench_seed_override(self, tmp_path, capsys):
        config = self._config(tmp_path)
        run(["bench", "--config", str(config), "--out", str(tmp_path / "a")])
        first = last_json(capsys.readouterr().out)
        run(["bench", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "99"])
        second = last_json(capsys.readouterr().out)
        assert first["cells"]["extent-small"]["stream_digest"] != second["cells"]["extent-small"]["stream_digest"]

    def test_bench_missing_config(self, tmp_path, capsys):
        assert run(["bench", "--config", str(tmp_path / "nope.yaml")]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "FileNotFoundError"

    def test_report_without_results(self, tmp_path, capsys):
        assert run(["report", "--in", str(tmp_path)]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ReportError"
        assert "phases.csv" in err["message"]


class TestCrashtest:
    """测试崩溃注入子命令"""

    def test_fs(self, tmp_path, capsys):
        code = run(["crashtest", "--backend", "fs", "--seeds", "2", "--workdir", str(tmp_path)])
        assert code == 0
        out = last_json(capsys.readouterr().out)
        assert out["violations"] == 0
        assert out["backends"]["fs"]["runs"] == 8
