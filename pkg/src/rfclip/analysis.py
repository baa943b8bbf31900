"""Diagnostic exports: per-layer attention heatmaps, embedding-weight histogram,
attention-vs-embedding-weight scatter and per-layer distraction masks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ParameterError
from .model_io.checkpoint import CheckpointStore
from .model_io.images import normalize_image, write_netpbm
from .numerics import bilinear_resize
from .refocus import DENOM_EPS, column_mass, localize_distractors, make_hook, max_embedding_weight
from .vit import VisionTower


@dataclass
class AnalysisBundle:
    heatmaps: list[np.ndarray]  # per layer, (g, g)
    masks: list[np.ndarray]  # per layer, (g, g) bool
    histogram: np.ndarray  # (d,) mean embedding weight per dimension
    omega: np.ndarray  # (N,)
    phi: np.ndarray  # (N,)
    is_distraction: np.ndarray  # (N,) bool
    query: int | None = None
    files: list[Path] = field(default_factory=list)


def normalized_weights(patches: np.ndarray) -> np.ndarray:
    """f_i / sum_k f_i[k] per row; rows with |sum| < 1e-8 become NaN."""
    f = np.asarray(patches, dtype=np.float64)
    total = f.sum(axis=1, keepdims=True)
    out = np.full_like(f, np.nan)
    ok = np.abs(total[:, 0]) >= DENOM_EPS
    out[ok] = f[ok] / total[ok]
    return out


def embedding_weight_histogram(layers_patches) -> np.ndarray:
    """Per-dimension mean of normalized embedding weights over layers and tokens."""
    per_layer = np.stack([normalized_weights(p) for p in layers_patches])  # (L, N, d)
    return np.nanmean(per_layer, axis=(0, 1))


def mean_normalized_weights(layers_patches) -> np.ndarray:
    """(N, d) layer-mean of the normalized embedding weights of each token."""
    return np.nanmean(np.stack([normalized_weights(p) for p in layers_patches]), axis=0)


def query_heatmap(attn: np.ndarray, query: int | None, grid: int) -> np.ndarray:
    """Attention row of patch ``query`` (or the mean patch row) over patch columns."""
    a = np.asarray(attn, dtype=np.float64)
    row = a[1:, 1:].mean(axis=0) if query is None else a[query + 1, 1:]
    return row.reshape(grid, grid)


def to_gray(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(np.nanmin(plane)), float(np.nanmax(plane))
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255).astype(np.uint8)


def analyze(image: np.ndarray, ckpt: CheckpointStore, run: RunConfig, query: int | None = None,
            out_dir: str | Path | None = None) -> AnalysisBundle:
    """Run one window (the whole image resized to the window) and collect diagnostics."""
    cfg = ckpt.config
    if query is not None and not 0 <= query < cfg.num_patches:
        raise ParameterError(f"query {query} outside 0..{cfg.num_patches - 1}")
    win = run.window
    window = normalize_image(bilinear_resize(np.asarray(image, dtype=np.float32), (win, win)), run.mean, run.std)
    tower = VisionTower(ckpt, debug=run.debug)
    final = "plain" if run.mode == "plain_clip" else run.final_attention
    out = tower.forward(window, make_hook(run), final, keep_states=True)
    g = cfg.grid
    stack = out.stack

    heatmaps = [query_heatmap(a, query, g) for a in stack.used]
    masks = []
    qk_sum = None
    for layer in range(1, cfg.layers + 1):
        qk = stack.layer_mean("qk", layer)
        qk_sum = qk if qk_sum is None else qk_sum + qk
        omega_l = column_mass(qk_sum / layer)
        prof = localize_distractors(out.states[layer - 1], cfg, omega_l, layer)
        m = np.zeros(cfg.num_patches, dtype=bool)
        m[prof.t_dis] = True
        masks.append(m.reshape(g, g))

    inputs = [s.patches for s in out.states[: cfg.layers]]
    hist = embedding_weight_histogram(inputs)
    fbar = mean_normalized_weights(inputs)
    dims = np.asarray(cfg.distraction_dims, dtype=np.intp)
    phi = fbar[:, dims].max(axis=1) if dims.size else np.full(cfg.num_patches, np.nan)
    omega = column_mass(stack.cum_avg("qk"))
    with np.errstate(invalid="ignore"):
        hit = phi > cfg.tau
    if cfg.joint_rule:
        hit &= omega > cfg.attn_weight_floor
    bundle = AnalysisBundle(heatmaps, masks, hist, omega, phi, hit, query)
    if out_dir is not None:
        write_bundle(bundle, out_dir)
    return bundle


def write_bundle(bundle: AnalysisBundle, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    files = []
    for layer, (hm, mask) in enumerate(zip(bundle.heatmaps, bundle.masks), start=1):
        stem = f"layer_{layer:02d}"
        p = out / "heatmaps" / f"{stem}.pgm"
        write_netpbm(p, to_gray(hm))
        np.savetxt(out / "heatmaps" / f"{stem}.csv", hm, delimiter=",", fmt="%.9g")
        files += [p, out / "heatmaps" / f"{stem}.csv"]
        p = out / "masks" / f"{stem}.pgm"
        write_netpbm(p, mask.astype(np.uint8) * 255)
        files.append(p)
    p = out / "histogram.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "mean_weight"])
        w.writerows((j, f"{v:.9g}") for j, v in enumerate(bundle.histogram))
    files.append(p)
    p = out / "scatter.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "omega", "phi", "is_distraction"])
        for i, (o, f, d) in enumerate(zip(bundle.omega, bundle.phi, bundle.is_distraction)):
            w.writerow([i, f"{o:.9g}", f"{f:.9g}", int(d)])
    files.append(p)
    p = out / "summary.json"
    p.write_text(json.dumps({
        "query": bundle.query,
        "layers": len(bundle.heatmaps),
        "grid": int(bundle.heatmaps[0].shape[0]) if bundle.heatmaps else 0,
        "distraction_tokens": np.flatnonzero(bundle.is_distraction).tolist(),
        "peak_dim": int(np.nanargmax(bundle.histogram)) if np.isfinite(bundle.histogram).any() else None,
    }, indent=2) + "\n")
    files.append(p)
    bundle.files = files
    return files
