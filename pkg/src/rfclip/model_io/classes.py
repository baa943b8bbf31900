"""Precomputed class text embeddings.

Binary layout mirrors the checkpoint container: u64 LE header length, JSON
header ``{"names": [...], "width": w, "dtype": "float32", "note": "..."}``,
then an ``N_c x w`` little-endian float32 payload. Small fixtures may use CSV
instead, one ``name,v0,v1,...`` row per class.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DecodeError, ParameterError, ShapeError


@dataclass(frozen=True)
class ClassEmbeddingSet:
    names: tuple[str, ...]
    embeddings: np.ndarray  # (N_c, d_shared), unit rows
    note: str = ""

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.names) < 1:
            raise ParameterError("class embedding set needs at least one class")
        if emb.ndim != 2 or emb.shape[0] != len(self.names):
            raise ShapeError(f"embeddings shape {emb.shape} does not match {len(self.names)} class names")
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(emb)):
            raise ParameterError("class embeddings must be finite with nonzero norm")
        emb = (emb / norms).astype(np.float32)
        emb.flags.writeable = False
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "embeddings", emb)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.names)


def save_class_embeddings(path: str | Path, names, embeddings, note: str = "") -> None:
    path = Path(path)
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for name, row in zip(names, emb):
                w.writerow([name, *(repr(float(v)) for v in row)])
        return
    header = json.dumps({"names": list(names), "width": int(emb.shape[1]), "dtype": "float32", "note": note}).encode()
    header += b" " * (-len(header) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(emb.tobytes())


def load_class_embeddings(path: str | Path, expected_width: int | None = None) -> ClassEmbeddingSet:
    path = Path(path)
    try:
        if path.suffix.lower() == ".csv":
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
            names = [r[0] for r in rows]
            emb = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
            if not rows:
                emb = np.zeros((0, 0))
            note = ""
        else:
            data = path.read_bytes()
            (n,) = struct.unpack("<Q", data[:8])
            header = json.loads(data[8 : 8 + n])
            names = list(header["names"])
            width = int(header["width"])
            emb = np.frombuffer(data[8 + n :], dtype="<f4")
            if emb.size != len(names) * width:
                raise DecodeError(f"{path}: payload holds {emb.size} values, expected {len(names)} x {width}")
            emb = emb.reshape(len(names), width)
            note = header.get("note", "")
    except (OSError, struct.error, KeyError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot read class embeddings: {exc}") from exc
    if not names:
        raise ParameterError(f"{path}: empty class list")
    if expected_width is not None and emb.shape[1] != expected_width:
        raise ShapeError(f"{path}: embedding width {emb.shape[1]} does not match model output width {expected_width}")
    return ClassEmbeddingSet(tuple(names), emb, note)
