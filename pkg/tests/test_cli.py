import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from hsdiff import artifacts, evaluate, hsio
from hsdiff.cli import main

TINY = {
    "preprocess": {"components": 3, "patch_size": 8},
    "model": {"base_channels": 8, "stage_multipliers": [1, 2], "time_embed_dim": 16, "groups_per_norm": 4},
    "pretrain": {"steps": 20, "batch_size": 4, "lr": 1e-3, "T": 50},
    "extract": {"m": 2},
    "purify": {"K": 8, "train_fraction": 0.25},
    "train": {"E": 2, "epochs": 2, "batch_size": 8, "hidden": [8, 4], "lr": 1e-3},
    "seeds": [0, 1],
}


def _write_config(path: Path, scene: Path, **extra) -> Path:
    doc = {"data": {"cube": str(scene / "cube.json"), "labels": str(scene / "labels.json")}, **TINY, **extra}
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["oracle", "scene", "--out", str(out), "--size", "16", "--classes", "2", "--bands", "8"]) == 0
    return out


@pytest.fixture(scope="module")
def built(scene, tmp_path_factory):
    """A complete tiny run, produced stage by stage through the CLI."""
    base = tmp_path_factory.mktemp("run")
    cfg = _write_config(base / "tiny.yaml", scene)
    run = base / "run"
    common = ["-c", str(cfg), "--run-dir", str(run)]
    for stage in ("pretrain", "extract", "purify", "train", "predict", "report"):
        assert main([stage, *common]) == 0, stage
    return cfg, run


def _copy(built, tmp_path):
    cfg, run = built
    dst = tmp_path / "run"
    shutil.copytree(run, dst)
    return ["-c", str(cfg), "--run-dir", str(dst)], dst


# --------------------------------------------------------------------------- convert


def test_convert_text_cube_roundtrip(tmp_path, rng):
    data = rng.standard_normal((3, 4, 5)).astype(np.float32)
    np.savetxt(tmp_path / "cube.txt", data.reshape(-1, 5), fmt="%.9g")
    assert main(["convert", str(tmp_path / "cube.txt"), str(tmp_path / "a" / "cube.json"), "--height", "3", "--width", "4"]) == 0
    np.testing.assert_array_equal(hsio.load_cube(tmp_path / "a" / "cube.json").data, data)
    assert main(["convert", str(tmp_path / "a" / "cube.json"), str(tmp_path / "back.txt")]) == 0
    assert main(["convert", str(tmp_path / "back.txt"), str(tmp_path / "b" / "cube.json"), "--height", "3", "--width", "4"]) == 0
    a, b = sorted((tmp_path / "a").iterdir()), sorted((tmp_path / "b").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    assert (tmp_path / "cube.txt").read_text() == (tmp_path / "back.txt").read_text()


def test_convert_raw_and_npy(tmp_path, rng):
    data = rng.standard_normal((2, 3, 4)).astype(np.float32)
    data.transpose(2, 0, 1).tofile(tmp_path / "cube.bsq")
    assert main(["convert", str(tmp_path / "cube.bsq"), str(tmp_path / "r.json"), "--height", "2", "--width", "3", "--bands", "4"]) == 0
    np.testing.assert_array_equal(hsio.load_cube(tmp_path / "r.json").data, data)
    np.save(tmp_path / "lab.npy", np.array([[0, 1], [2, 1]]))
    assert main(["convert", str(tmp_path / "lab.npy"), str(tmp_path / "lab.json"), "--kind", "labels", "--num-classes", "3"]) == 0
    lab = hsio.load_labels(tmp_path / "lab.json")
    assert lab.num_classes == 3 and lab.labels.tolist() == [[0, 1], [2, 1]]


def test_convert_rejects_bad_labels(tmp_path, capsys):
    np.savetxt(tmp_path / "lab.txt", np.array([[0, 1], [5, 1]]), fmt="%d")
    assert main(["convert", str(tmp_path / "lab.txt"), str(tmp_path / "lab.json"), "--kind", "labels", "--num-classes", "4"]) == 2
    assert "exceeds" in capsys.readouterr().err
    assert main(["convert", str(tmp_path / "missing.npy"), str(tmp_path / "x.json")]) == 2
    np.savetxt(tmp_path / "cube.txt", np.zeros((6, 2)))
    assert main(["convert", str(tmp_path / "cube.txt"), str(tmp_path / "c.json")]) == 2


# --------------------------------------------------------------------------- stage chain


def test_stage_chain_outputs(built):
    _, run = built
    for stage in ("pretrain", "extract", "report"):
        assert (run / stage / "manifest.json").exists()
    for s in (0, 1):
        for stage in ("purify", "train", "predict"):
            man = json.loads((run / stage / f"seed_{s:03d}" / "manifest.json").read_text())
            assert man["stage"] == stage and man["upstream"]
    assert (run / "predict" / "seed_000" / "data" / "map.ppm").exists()
    img = evaluate.read_ppm(run / "predict" / "seed_000" / "data" / "map.ppm")
    assert img.shape == (16, 16, 3)


def test_rerun_purify_is_byte_identical(built, tmp_path):
    args, run = _copy(built, tmp_path)
    index = run / "purify" / "seed_000" / "data" / "index.json"
    before = index.read_bytes()
    digest = artifacts.dir_digest(run / "purify" / "seed_000" / "data")
    assert main(["purify", *args, "--seed", "0"]) == 0
    assert index.read_bytes() == before
    assert artifacts.dir_digest(run / "purify" / "seed_000" / "data") == digest


def test_tampered_upstream_is_detected(built, tmp_path, capsys):
    args, run = _copy(built, tmp_path)
    blob = run / "extract" / "data" / "banks" / "center.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    assert main(["train", *args, "--seed", "0"]) == 3
    assert "digest" in capsys.readouterr().err.lower()


def test_stale_chain_is_detected(built, tmp_path):
    args, run = _copy(built, tmp_path)
    # re-extracting with another noise seed leaves every purify result stale
    assert main(["extract", *args, "--set", "extract.seed=9"]) == 0
    assert main(["train", *args, "--set", "extract.seed=9", "--seed", "0"]) == 3


def test_config_errors(built, tmp_path, scene):
    cfg, run = built
    assert main(["report", "-c", str(cfg), "--run-dir", str(run), "--set", "train.nope=1"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {base_channels: 8, stage_multipliers: [1, 2, 4]}\npreprocess: {patch_size: 10}\n")
    assert main(["pretrain", "-c", str(bad), "--run-dir", str(tmp_path / "r")]) == 2
    assert main(["predict", "-c", str(cfg), "--run-dir", str(tmp_path / "empty"), "--seed", "0"]) == 2
    changed = ["-c", str(cfg), "--run-dir", str(run), "--set", "train.epochs=3", "--seed", "0"]
    assert main(["predict", *changed]) == 2


def test_report_text(built, capsys):
    cfg, run = built
    assert main(["report", "-c", str(cfg), "--run-dir", str(run)]) == 0
    out = capsys.readouterr().out
    assert "mean" in out and "OA (%)" in out and "kappa" in out
    rep = evaluate.MetricsReport.from_dict(json.loads((run / "report" / "data" / "report.json").read_text()))
    assert rep.runs == 2 and rep.seeds == [0, 1]


def test_oracle_subcommands(built, capsys):
    cfg, run = built
    common = ["-c", str(cfg), "--run-dir", str(run)]
    assert main(["oracle", "scores", *common]) == 0
    assert main(["oracle", "metrics", *common]) == 0
    assert main(["oracle", "schedule", "--T", "1000"]) == 0
    out = capsys.readouterr().out
    assert "top-K matches" in out and "max gap" in out


def test_ablation_sweep(built, tmp_path, capsys):
    args, run = _copy(built, tmp_path)
    assert main(["sweep", *args, "--ablation", "fusion", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    doc = json.loads((run / "sweep" / "ablation_fusion" / "data" / "ablation.json").read_text())
    assert sorted(doc["rows"]) == ["average", "manual", "selective", "selective_noguide"]
    assert len(doc["ordering"]) == 4
    assert "Ordering:" in out and "Average fusion" in out
    assert main(["sweep", *args]) == 2


def test_run_root_env_and_locking(scene, tmp_path, monkeypatch):
    cfg = _write_config(tmp_path / "envcfg.yaml", scene)
    monkeypatch.delenv("HSDIFF_RUN_ROOT", raising=False)
    assert main(["pretrain", "-c", str(cfg)]) == 2
    monkeypatch.setenv("HSDIFF_RUN_ROOT", str(tmp_path / "root"))
    root = tmp_path / "root" / "envcfg"
    root.mkdir(parents=True)
    (root / ".lock-pretrain").write_text("123")
    assert main(["pretrain", "-c", str(cfg)]) == 2
    (root / ".lock-pretrain").unlink()
    assert main(["pretrain", "-c", str(cfg)]) == 0
    assert (root / "pretrain" / "manifest.json").exists()
