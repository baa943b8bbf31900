"""Sliding-window segmentation, mIoU evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .config import RunConfig
from .dense_head import argmax_labels, classify_patches, upsample_logits
from .errors import ParameterError, ShapeError
from .model_io.checkpoint import CheckpointStore
from .model_io.classes import ClassEmbeddingSet
from .model_io.images import load_image, load_label_map, normalize_image
from .model_io.manifest import DatasetManifest
from .model_io.segmentation import SegmentationMap
from .numerics import bilinear_resize
from .refocus import make_hook
from .vit import VisionTower

log = logging.getLogger(__name__)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is flush with the edge."""
    if length <= window:
        return [0]
    n = math.ceil((length - window) / stride) + 1
    return [min(i * stride, length - window) for i in range(n)]


def enumerate_windows(h: int, w: int, window: int, stride: int) -> list[tuple[int, int]]:
    return [(r, c) for r in window_starts(h, window, stride) for c in window_starts(w, window, stride)]


def resize_short_side(img: np.ndarray, short_side: int) -> np.ndarray:
    h, w = img.shape[:2]
    scale = short_side / min(h, w)
    return bilinear_resize(img, (max(1, round(h * scale)), max(1, round(w * scale))))


class Segmenter:
    """Holds the tower and class embeddings for repeated window inference."""

    def __init__(self, ckpt: CheckpointStore, classes: ClassEmbeddingSet, run: RunConfig):
        if classes.width != ckpt.config.output_dim:
            raise ShapeError(f"class embedding width {classes.width} != model output width {ckpt.config.output_dim}")
        if ckpt.config.image_size != run.window:
            raise ParameterError("run config and checkpoint disagree on the window size")
        self.ckpt = ckpt
        self.classes = classes
        self.run = run
        self.tower = VisionTower(ckpt, debug=run.debug)

    @property
    def final_attention(self) -> str:
        return "plain" if self.run.mode == "plain_clip" else self.run.final_attention

    def window_scores(self, window: np.ndarray) -> np.ndarray:
        """(win, win, N_c) upsampled cosine scores for one normalized window."""
        out = self.tower.forward(window, make_hook(self.run), self.final_attention)
        logits = classify_patches(out.features[1:], self.classes)
        win = self.run.window
        return upsample_logits(logits, (win, win))

    def merged_scores(self, image: np.ndarray) -> np.ndarray:
        """Resize, tile, run windows and average overlapping logits.

        ``image`` is RGB in [0, 1]. Returns scores at the original resolution.
        """
        run = self.run
        h0, w0 = image.shape[:2]
        img = normalize_image(resize_short_side(np.asarray(image, dtype=np.float32), run.short_side),
                              run.mean, run.std)
        h, w = img.shape[:2]
        win = run.window
        if h < win or w < win:
            log.warning("resized image %dx%d smaller than window %d; reflect-padding", h, w, win)
            pad = ((0, max(0, win - h)), (0, max(0, win - w)), (0, 0))
            mode = "reflect" if (h > win - h and w > win - w) else "symmetric"
            img = np.pad(img, pad, mode=mode)
        H, W = img.shape[:2]
        offsets = enumerate_windows(H, W, win, run.stride)
        crops = [img[r : r + win, c : c + win] for r, c in offsets]
        if run.workers > 1:
            with ThreadPoolExecutor(run.workers) as pool:
                scores = list(pool.map(self.window_scores, crops))
        else:
            scores = [self.window_scores(c) for c in crops]
        canvas = np.zeros((H, W, len(self.classes)), dtype=np.float64)
        count = np.zeros((H, W), dtype=np.int64)
        for (r, c), s in zip(offsets, scores):
            canvas[r : r + win, c : c + win] += s
            count[r : r + win, c : c + win] += 1
        canvas /= count[..., None]
        canvas = canvas[:h, :w]
        return bilinear_resize(canvas, (h0, w0))

    def segment(self, image: np.ndarray) -> SegmentationMap:
        labels = argmax_labels(self.merged_scores(image))
        return SegmentationMap(labels, self.classes.names, self.provenance())

    def provenance(self) -> dict[str, Any]:
        return {"run": self.run.to_dict(), "checkpoint_sha256": self.ckpt.checksum}


def segment_image(image: np.ndarray, ckpt: CheckpointStore, classes: ClassEmbeddingSet, run: RunConfig
                  ) -> SegmentationMap:
    return Segmenter(ckpt, classes, run).segment(image)


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore_index: int = 255) -> np.ndarray:
    """(num_classes, num_classes) counts, rows = ground truth, cols = prediction."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ShapeError("ground truth and prediction differ in size")
    keep = (gt != ignore_index) & (gt >= 0) & (gt < num_classes)
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray
    ignored_pixels: int = 0
    num_images: int = 0
    config: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, Any] = field(default_factory=dict)

    @property
    def gt_pixels(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def pred_pixels(self) -> np.ndarray:
        return self.confusion.sum(axis=0)

    def _iou_fractions(self) -> list[Fraction | None]:
        tp = np.diag(self.confusion)
        out = []
        for c in range(len(self.class_names)):
            if self.gt_pixels[c] == 0:
                out.append(None)
            else:
                out.append(Fraction(int(tp[c]), int(self.gt_pixels[c] + self.pred_pixels[c] - tp[c])))
        return out

    @property
    def iou(self) -> list[float | None]:
        return [None if v is None else float(v) for v in self._iou_fractions()]

    @property
    def empty(self) -> bool:
        return int(self.gt_pixels.sum()) == 0

    @property
    def miou(self) -> float | None:
        present = [v for v in self._iou_fractions() if v is not None]
        if not present:
            return None
        return float(sum(present) / len(present))

    def to_dict(self) -> dict[str, Any]:
        return {
            "miou": self.miou,
            "empty": self.empty,
            "per_class": [
                {"class": name, "iou": iou, "gt_pixels": int(g), "pred_pixels": int(p)}
                for name, iou, g, p in zip(self.class_names, self.iou, self.gt_pixels, self.pred_pixels)
            ],
            "evaluated_pixels": int(self.confusion.sum()),
            "ignored_pixels": int(self.ignored_pixels),
            "num_images": self.num_images,
            "config": self.config,
            "timing": self.timing,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate(manifest: DatasetManifest, ckpt: CheckpointStore, classes: ClassEmbeddingSet, run: RunConfig,
             limit: int | None = None) -> EvalReport:
    if tuple(manifest.class_names) != tuple(classes.names):
        raise ParameterError("manifest class table does not match the class embedding names")
    manifest = manifest.subset(limit)
    nc = len(classes)
    seg = Segmenter(ckpt, classes, run)

    def one(item):
        img_path, gt_path = item
        t0 = time.perf_counter()
        pred = seg.segment(load_image(img_path)).labels
        gt = load_label_map(gt_path)
        if gt.shape != pred.shape:
            raise ShapeError(f"{gt_path}: label map {gt.shape} vs image {pred.shape}")
        ignored = int(np.sum(gt == manifest.ignore_index))
        return confusion_matrix(gt, pred, nc, manifest.ignore_index), ignored, time.perf_counter() - t0

    items = list(manifest.items)
    if run.workers > 1 and len(items) > 1:
        # windows stay serial inside each image when images run in parallel
        seg.run = run.replace(workers=1)
        with ThreadPoolExecutor(run.workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    conf = np.zeros((nc, nc), dtype=np.int64)
    ignored = 0
    seconds = []
    for c, ig, dt in results:
        conf += c
        ignored += ig
        seconds.append(dt)
    cfg = run.to_dict()
    cfg.pop("workers", None)
    cfg.pop("output_dir", None)
    cfg["checkpoint_sha256"] = ckpt.checksum
    report = EvalReport(classes.names, conf, ignored, len(items), cfg,
                        {"per_image_seconds": seconds, "total_seconds": float(sum(seconds))})
    if report.empty:
        log.warning("evaluation found no labelled pixels; mIoU undefined")
    return report


SWEEP_PARAMS = ("tau", "beta", "similarity_source", "threshold_rule", "receptive_field", "layer_range",
                "final_attention")


def parse_tau(value, width: int) -> float:
    """``0.0065``, ``"5/d"`` or ``"5/768"`` -> float."""
    if isinstance(value, (int, float)):
        return float(value)
    s = str(value).strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / (width if den.strip() == "d" else float(den))
    return float(s)


def parse_layer_range(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    s = str(value)
    if "-" in s:
        lo, hi = s.split("-", 1)
        return int(lo), int(hi)
    return int(s), int(s)


def default_sweep_values(param: str, run: RunConfig) -> list:
    L = run.model.layers
    return {
        "tau": [f"{k}/d" for k in (3, 4, 5, 6, 7)],
        "beta": [round(0.1 * k, 1) for k in range(1, 10)],
        "similarity_source": ["qk", "qq", "kk", "kk_cum_avg"],
        "threshold_rule": ["otsu", "mean"],
        "receptive_field": [3, 5, 7],
        "layer_range": [str(k) for k in range(max(1, L // 2), L + 1)] + [f"{max(1, L // 2)}-{L}", f"1-{L}"],
        "final_attention": ["qq_last", "kk_last", "qq_avg", "kk_avg"],
    }[param]


def apply_sweep_value(run: RunConfig, param: str, value) -> RunConfig:
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"unknown sweep parameter {param!r}")
    if param == "tau":
        return run.replace(tau=parse_tau(value, run.model.width))
    if param == "beta":
        return run.replace(beta=float(value))
    if param == "receptive_field":
        return run.replace(receptive_field=int(value))
    if param == "layer_range":
        return run.replace(redistribution_layers=parse_layer_range(value))
    return run.replace(**{param: str(value)})


def sweep(param: str, values: Iterable | None, manifest: DatasetManifest, ckpt: CheckpointStore,
          classes: ClassEmbeddingSet, run: RunConfig, limit: int | None = None,
          csv_path: str | Path | None = None) -> list[dict[str, Any]]:
    """One evaluation per value of ``param``; everything else held fixed."""
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"unknown sweep parameter {param!r}")
    values = list(values) if values is not None else default_sweep_values(param, run)
    rows = []
    for value in values:
        report = evaluate(manifest, ckpt, classes, apply_sweep_value(run, param, value), limit)
        rows.append({"param": param, "value": value, "miou": report.miou})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["param", "value", "miou"])
            w.writeheader()
            w.writerows(rows)
    return rows
