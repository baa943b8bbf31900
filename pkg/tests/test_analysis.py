import csv

import numpy as np

from rfclip.analysis import analyze, embedding_weight_histogram
from rfclip.fixtures import tiny_checkpoint, tiny_run_config
from rfclip.model_io import read_netpbm


def test_histogram_single_spike_peak(rng):
    layers = [rng.uniform(0.5, 1.5, (49, 32)) for _ in range(3)]
    for f in layers:
        f[:, 13] += 5.0
    hist = embedding_weight_histogram(layers)
    assert np.argmax(hist) == 13
    assert np.sum(hist >= hist[13] * 0.5) == 1


def test_bundle_files(tmp_path):
    run = tiny_run_config()
    img = np.random.default_rng(0).random((40, 30, 3)).astype(np.float32)
    bundle = analyze(img, tiny_checkpoint(), run, query=4, out_dir=tmp_path)
    assert len(bundle.heatmaps) == run.model.layers
    for hm in bundle.heatmaps:
        assert hm.shape == (3, 3)
    assert read_netpbm(tmp_path / "heatmaps" / "layer_01.pgm").shape == (3, 3)
    assert read_netpbm(tmp_path / "masks" / "layer_01.pgm").shape == (3, 3)
    with open(tmp_path / "scatter.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "omega", "phi", "is_distraction"]
    assert len(rows) == 1 + run.model.num_patches
    with open(tmp_path / "histogram.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + run.model.width
    # planted tokens show up in the first-layer mask
    assert sorted(np.flatnonzero(bundle.masks[0].ravel())) == [1, 6]


def test_heatmap_rows_are_attention_rows():
    run = tiny_run_config(mode="kk_proxy_baseline")
    img = np.zeros((24, 24, 3), np.float32)
    bundle = analyze(img, tiny_checkpoint(), run, query=None)
    assert all(np.all(h >= 0) for h in bundle.heatmaps)
    assert all(h.sum() <= 1.0 + 1e-6 for h in bundle.heatmaps)
