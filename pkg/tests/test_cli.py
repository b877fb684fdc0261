import json

import numpy as np
import pytest

from lidarlines.cli import main
from lidarlines.fileio import read_ply, read_segments_jsonl, save_checkpoint, write_ply
from lidarlines.geometry import PointCloud
from lidarlines.net import MicroNet, NetConfig
from lidarlines.synth import registration_pair


@pytest.fixture
def labeled_scan(tmp_path):
    p = tmp_path / "scan.ply"
    write_ply(p, registration_pair(3).target.cloud, binary=True)
    return p


def test_dump_config(capsys):
    assert main(["--dump-config"]) == 0
    assert "solver:" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["register", str(tmp_path / "missing.ply"), str(tmp_path / "x.ply"),
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("nope: 1\n")
    assert main(["eval", "--config", str(bad), "--pairs", "1", "--out", str(tmp_path)]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_register_identical_scans(labeled_scan, tmp_path):
    out = tmp_path / "reg"
    assert main(["register", str(labeled_scan), str(labeled_scan), "--out", str(out)]) == 0
    report = json.loads((out / "registration.json").read_text())
    np.testing.assert_allclose(report["pose"], np.eye(4), atol=1e-6)


def test_register_failure_exits_one(tmp_path):
    cloud = PointCloud(np.random.default_rng(0).random((100, 3)), labels=np.zeros(100, np.uint8))
    p = tmp_path / "flat.ply"
    write_ply(p, cloud)
    assert main(["register", str(p), str(p), "--out", str(tmp_path)]) == 1


def test_eval_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["eval", "--pairs", "3", "--seed", "5", "--out", str(a)]) == 0
    assert main(["eval", "--pairs", "3", "--seed", "5", "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert json.loads((a / "report.json").read_text())["pairs"] == 3


def test_gen_and_extract(tmp_path):
    assert main(["gen", "--n", "2", "--seed", "1", "--out", str(tmp_path / "g")]) == 0
    scene = tmp_path / "g" / "scene_0000.ply"
    assert read_ply(scene).cloud.labels.any()
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 2
    # a whole scan's labels are one primitive; extraction keeps or rejects it
    assert main(["extract", str(scene), "--out", str(tmp_path / "x")]) == 0
    read_segments_jsonl(tmp_path / "x" / "scene_0000.lines.jsonl")


def test_label_writes_one_checkpoint_per_iteration(tmp_path):
    data = tmp_path / "scans"
    rng = np.random.default_rng(2)
    for i in range(2):
        write_ply(data / f"s{i}.ply", PointCloud(rng.normal(size=(60, 3))))
    ckpt = tmp_path / "init.ckpt"
    save_checkpoint(ckpt, MicroNet(NetConfig(k=4, stride=1, channels=4, d=4)))
    cfg = tmp_path / "c.yaml"
    cfg.write_text("adapt:\n  n_perturbations: 2\n")
    out = tmp_path / "lab"
    assert main(["label", "--checkpoint", str(ckpt), "--data", str(data), "--iterations", "3",
                 "--epochs", "1", "--config", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.ckpt")) == [
        "label_iter_1.ckpt", "label_iter_2.ckpt", "label_iter_3.ckpt"]
    assert (out / "s0.labeled.ply").exists()


def test_pretrain_small(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("synth:\n  n_clouds: 4\n  n_primitive_points: 100\n  n_background_chunks: 1\n"
                   "  points_per_chunk: 50\n  total_points: 120\n"
                   "net:\n  k: 4\n  stride: 1\n  channels: 4\n  d: 4\n")
    out = tmp_path / "pre"
    assert main(["pretrain", "--epochs", "1", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "pretrain.json").read_text())
    assert 0 <= summary["heldout_accuracy"] <= 1 and len(summary["loss"]) == 1
