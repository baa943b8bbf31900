"""Dataset manifests: JSON listing image / ground-truth pairs.

::

    {"classes": ["background", "cat", ...],
     "ignore_index": 255,
     "items": [{"image": "img/0001.png", "label": "gt/0001.png"}, ...]}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, DecodeError, ShapeError
from .images import image_size, load_label_map


@dataclass(frozen=True)
class DatasetManifest:
    items: tuple[tuple[Path, Path], ...]
    class_names: tuple[str, ...]
    ignore_index: int = 255

    def subset(self, n: int | None) -> "DatasetManifest":
        if n is None:
            return self
        return DatasetManifest(self.items[:n], self.class_names, self.ignore_index)

    def reordered(self, order) -> "DatasetManifest":
        return DatasetManifest(tuple(self.items[i] for i in order), self.class_names, self.ignore_index)


def load_manifest(path: str | Path, check_labels: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DecodeError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    classes = tuple(str(c) for c in data.get("classes", ()))
    if not classes:
        raise DataError(f"{path}: manifest has no class table")
    ignore = int(data.get("ignore_index", 255))
    items = []
    for entry in data.get("items", ()):
        img = (root / entry["image"]).resolve()
        lab = (root / entry["label"]).resolve()
        for p in (img, lab):
            if not p.exists():
                raise DataError(f"{path}: referenced file {p} does not exist")
        if check_labels:
            labels = load_label_map(lab)
            if labels.shape != image_size(img):
                raise ShapeError(f"{path}: label map {lab.name} is {labels.shape}, image {img.name} is {image_size(img)}")
            bad = np.unique(labels[(labels != ignore) & ((labels < 0) | (labels >= len(classes)))])
            if bad.size:
                raise DataError(f"{path}: label map {lab.name} has values {bad.tolist()} outside the class table")
        items.append((img, lab))
    return DatasetManifest(tuple(items), classes, ignore)


def save_manifest(path: str | Path, items, class_names, ignore_index: int = 255) -> None:
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    data = {
        "classes": list(class_names),
        "ignore_index": ignore_index,
        "items": [{"image": rel(i), "label": rel(lab)} for i, lab in items],
    }
    path.write_text(json.dumps(data, indent=2) + "\n")
