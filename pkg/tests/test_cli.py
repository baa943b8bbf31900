import json
import subprocess
import sys

import numpy as np
import pytest

from rfclip.cli import OUTPUT_ENV, main
from rfclip.fixtures import random_tensors, tiny_model_config
from rfclip.model_io import read_segmentation, save_checkpoint


def common(fx):
    return ["--config", str(fx.config), "--checkpoint", str(fx.checkpoint)]


def test_segment_writes_map_and_sidecar(fixture_dir, tmp_path):
    out = tmp_path / "seg.png"
    rc = main(["segment", str(fixture_dir.images[1]), *common(fixture_dir), "--classes", str(fixture_dir.classes),
               "-o", str(out), "--beta", "0.5", "--layers-range", "1-2", "--tau", "5/d"])
    assert rc == 0
    seg = read_segmentation(out)
    assert seg.labels.shape == (36, 48)
    model = seg.provenance["run"]["model"]
    assert model["beta"] == 0.5 and model["redistribution_layers"] == [1, 2] and model["tau"] == 5 / 16


def test_segment_is_byte_deterministic(fixture_dir, tmp_path):
    files = []
    for k in range(2):
        out = tmp_path / f"s{k}.pgm"
        main(["segment", str(fixture_dir.images[0]), *common(fixture_dir), "--classes", str(fixture_dir.classes),
              "-o", str(out)])
        files.append(out)
    assert files[0].read_bytes() == files[1].read_bytes()
    assert (tmp_path / "s0.pgm.json").read_bytes() == (tmp_path / "s1.pgm.json").read_bytes()


def test_evaluate_env_output_dir(fixture_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env_out"))
    rc = main(["evaluate", *common(fixture_dir), "--classes", str(fixture_dir.classes),
               "--manifest", str(fixture_dir.manifest), "--limit", "2"])
    assert rc == 0
    report = json.loads((tmp_path / "env_out" / "report.json").read_text())
    assert report["num_images"] == 2 and 0 <= report["miou"] <= 1
    # an explicit flag beats the environment
    main(["evaluate", *common(fixture_dir), "--classes", str(fixture_dir.classes),
          "--manifest", str(fixture_dir.manifest), "--limit", "1", "--output-dir", str(tmp_path / "flag")])
    assert (tmp_path / "flag" / "report.json").exists()


def test_analyze_and_sweep(fixture_dir, tmp_path):
    out = tmp_path / "o"
    assert main(["analyze", str(fixture_dir.images[2]), *common(fixture_dir), "--query", "4",
                 "--output-dir", str(out)]) == 0
    assert (out / "analysis" / "scene2" / "scatter.csv").exists()
    assert main(["sweep", "--param", "threshold_rule", "--values", "mean", "otsu", *common(fixture_dir),
                 "--classes", str(fixture_dir.classes), "--manifest", str(fixture_dir.manifest), "--limit", "1",
                 "--output-dir", str(out)]) == 0
    assert len((out / "sweep_threshold_rule.csv").read_text().splitlines()) == 3


def test_make_fixture(tmp_path, capsys):
    assert main(["make-fixture", str(tmp_path / "fx")]) == 0
    assert (tmp_path / "fx" / "manifest.json").exists()


def test_exit_codes(fixture_dir, tmp_path):
    # config error
    assert main(["evaluate", "--checkpoint", str(fixture_dir.checkpoint), "--classes", str(fixture_dir.classes),
                 "--manifest", str(fixture_dir.manifest)]) == 2
    assert main(["segment", str(fixture_dir.images[0]), *common(fixture_dir), "--classes",
                 str(fixture_dir.classes), "--beta", "1.5"]) == 2
    assert main(["sweep", "--param", "gamma", "--values", "1", *common(fixture_dir), "--classes",
                 str(fixture_dir.classes), "--manifest", str(fixture_dir.manifest)]) == 2
    # data error
    assert main(["evaluate", *common(fixture_dir), "--classes", str(fixture_dir.classes),
                 "--manifest", str(tmp_path / "nope.json")]) == 3
    # numeric error
    cfg = tiny_model_config()
    t = random_tensors(cfg)
    t["layer0.mlp.W_out"][:] = np.inf
    save_checkpoint(tmp_path / "bad.safetensors", t)
    assert main(["segment", str(fixture_dir.images[0]), "--config", str(fixture_dir.config),
                 "--checkpoint", str(tmp_path / "bad.safetensors"), "--classes", str(fixture_dir.classes),
                 "--mode", "plain_clip", "-o", str(tmp_path / "x.png")]) == 4


def test_console_entry_point(fixture_dir):
    res = subprocess.run([sys.executable, "-m", "rfclip.cli", "segment", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--similarity-source" in res.stdout
    res = subprocess.run([sys.executable, "-m", "rfclip.cli", "segment"], capture_output=True, text=True)
    assert res.returncode == 2
