"""Segmentation maps: indexed PNG / PGM label image plus a JSON sidecar."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ContractError, DataError
from .images import load_label_map, write_netpbm


@dataclass
class SegmentationMap:
    labels: np.ndarray  # (H, W) class indices
    class_names: tuple[str, ...]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.class_names = tuple(self.class_names)

    def validate(self) -> None:
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise ContractError(f"segmentation map must be a nonempty 2-D array, got {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ContractError(
                f"class index range [{self.labels.min()}, {self.labels.max()}] outside table of {len(self.class_names)}")


def _palette(n: int) -> list[int]:
    # PASCAL-style bit-interleaved colour map
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_segmentation(seg: SegmentationMap, path: str | Path) -> None:
    seg.validate()
    path = Path(path)
    wide = len(seg.class_names) > 256
    labels = seg.labels.astype(np.uint16 if wide else np.uint8)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            if wide:
                Image.fromarray(labels, mode="I;16").save(path)
            else:
                im = Image.fromarray(labels, mode="P")
                im.putpalette(_palette(len(seg.class_names)))
                im.save(path)
        else:
            write_netpbm(path, labels)
        sidecar = {
            "classes": list(seg.class_names),
            "shape": list(seg.labels.shape),
            "sha256": hashlib.sha256(np.ascontiguousarray(seg.labels, dtype="<i4").tobytes()).hexdigest(),
            "config": seg.provenance,
        }
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write segmentation to {path}: {exc}") from exc


def read_segmentation(path: str | Path) -> SegmentationMap:
    path = Path(path)
    labels = load_label_map(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"missing or unreadable sidecar for {path}: {exc}") from exc
    return SegmentationMap(labels, tuple(meta["classes"]), meta.get("config", {}))
