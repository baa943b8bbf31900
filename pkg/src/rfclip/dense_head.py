"""Patch classification against class text embeddings and logit upsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .model_io.classes import ClassEmbeddingSet
from .numerics import bilinear_resize
from .vit import AttentionStack

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class LogitsMap:
    scores: np.ndarray  # (N, N_c) cosine similarities
    grid: int

    def planes(self) -> np.ndarray:
        """(g, g, N_c) view of the scores."""
        return self.scores.reshape(self.grid, self.grid, -1)


def layer_averaged_kk(stack: AttentionStack, layers: int | None = None) -> np.ndarray:
    """(1 / (L H)) sum over layers and heads of the key-key attention maps."""
    if layers is not None and stack.depth != layers:
        raise ContractError(f"attention stack holds {stack.depth} layers, expected {layers}")
    return stack.cum_avg("kk")


def classify_patches(features: np.ndarray, classes: ClassEmbeddingSet) -> LogitsMap:
    """Cosine similarity of each patch feature (rows) against every class."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != classes.width:
        raise ShapeError(f"feature width {f.shape[-1]} does not match class embedding width {classes.width}")
    g = int(round(np.sqrt(f.shape[0])))
    if g * g != f.shape[0]:
        raise ShapeError(f"{f.shape[0]} patch features do not form a square grid")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    if np.any(norms < NORM_EPS):
        log.warning("%d zero-norm patch feature(s); scored by raw dot product", int(np.sum(norms < NORM_EPS)))
    f = f / np.maximum(norms, NORM_EPS)
    scores = np.clip(f @ classes.embeddings.astype(np.float64).T, -1.0, 1.0)
    return LogitsMap(scores, g)


def upsample_logits(logits: LogitsMap, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling of every class plane to (H, W, N_c)."""
    g = logits.grid
    if target[0] < g or target[1] < g:
        raise ShapeError(f"upsample target {target} smaller than the {g}x{g} grid")
    return bilinear_resize(logits.planes(), target)


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Class index per pixel; equal scores resolve to the lowest index."""
    return np.argmax(scores, axis=-1)
