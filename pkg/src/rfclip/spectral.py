"""Normalized-cut bipartition of the patch-token similarity graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGraphError, NumericError, ParameterError, ShapeError
from .numerics import sym_eigen_smallest

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class SimilarityGraph:
    W: np.ndarray  # (N, N) symmetric, nonnegative
    degrees: np.ndarray
    source: str = "kk_cum_avg"


@dataclass
class PartitionResult:
    fiedler: np.ndarray
    eigenvalue: float
    t_def: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    threshold: float = float("nan")
    orientation: int = 1  # +1: selected y > thr; -1: selected -y > thr(-y)
    fallback: bool = False


def build_graph(attn: np.ndarray, source: str = "kk_cum_avg") -> SimilarityGraph:
    """Symmetrize an (N, N) patch-token attention map into ncut weights."""
    A = np.asarray(attn, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"similarity input must be square, got {A.shape}")
    if np.any(A < 0) or not np.all(np.isfinite(A)):
        raise DegenerateGraphError("similarity weights must be finite and nonnegative")
    W = (A + A.T) * 0.5
    degrees = W.sum(axis=1)
    if np.any(degrees <= 1e-12):
        raise DegenerateGraphError(f"graph has {int(np.sum(degrees <= 1e-12))} isolated node(s)")
    return SimilarityGraph(W, degrees, source)


def fiedler(graph: SimilarityGraph) -> PartitionResult:
    """Second-smallest solution of (D - W) y = lambda D y.

    Solved through the normalized Laplacian I - D^-1/2 W D^-1/2 with
    y = D^-1/2 z. ``y`` is made exactly D-orthogonal to the constant vector.
    """
    W, deg = graph.W, graph.degrees
    n = W.shape[0]
    if n < 2:
        raise DegenerateGraphError("need at least two nodes for a bipartition")
    dinv = 1.0 / np.sqrt(deg)
    lap = -(dinv[:, None] * W * dinv[None, :])
    lap = (lap + lap.T) * 0.5
    lap[np.diag_indices(n)] += 1.0
    pairs = sym_eigen_smallest(lap, 2)
    lam = pairs[1].eigenvalue
    z = pairs[1].eigenvector
    trivial = np.sqrt(deg) / np.sqrt(deg.sum())
    z = z - (z @ trivial) * trivial
    z /= np.linalg.norm(z)
    y = dinv * z
    resid = np.max(np.abs((deg * y - W @ y) - lam * deg * y))
    if resid > RESIDUAL_TOL * (1.0 + np.max(np.abs(y))):
        raise NumericError(
            f"Fiedler residual {resid:.3e} too large (lambda={lam:.3e}, degree range "
            f"[{deg.min():.3e}, {deg.max():.3e}], eigen gap {pairs[1].eigenvalue - pairs[0].eigenvalue:.3e})")
    return PartitionResult(y, float(lam))


def otsu_threshold(values: np.ndarray) -> float:
    """Split point maximizing between-class variance (exact, over sorted values)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    if n < 2 or v[0] == v[-1]:
        return float(v[0]) if n else 0.0
    csum = np.cumsum(v)
    k = np.arange(1, n)
    mu0 = csum[:-1] / k
    mu1 = (csum[-1] - csum[:-1]) / (n - k)
    between = (k / n) * ((n - k) / n) * (mu0 - mu1) ** 2
    between[v[1:] == v[:-1]] = -1.0  # not a real split
    best = int(np.argmax(between))
    return float((v[best] + v[best + 1]) * 0.5)


def _threshold(v: np.ndarray, rule: str) -> float:
    if rule == "mean":
        return float(np.mean(v))
    if rule == "otsu":
        return otsu_threshold(v)
    raise ParameterError(f"unknown threshold rule {rule!r}")


def _side(v: np.ndarray, rule: str):
    thr = _threshold(v, rule)
    sel = v > thr
    fallback = False
    if (not sel.any() or sel.all()) and v.size > 1:
        # median split by rank, so ties (even a constant vector) still split
        thr = float(np.median(v))
        sel = np.zeros(v.size, dtype=bool)
        sel[np.argsort(-v, kind="stable")[: v.size // 2]] = True
        fallback = True
    return sel, thr, fallback


def select_defocused(y: np.ndarray, rule: str = "mean", t_dis=(), column_mass: np.ndarray | None = None
                     ) -> PartitionResult:
    """Pick the attention-poor side of the Fiedler split as defocused tokens.

    Each orientation of ``y`` is thresholded; the side whose mean column mass
    is lower wins (ties and missing ``column_mass`` go to the positive side).
    Distraction tokens are removed from the result.
    """
    y = np.asarray(y, dtype=np.float64)
    pos, thr_pos, fb_pos = _side(y, rule)
    neg, thr_neg, fb_neg = _side(-y, rule)
    s = 1
    if column_mass is not None:
        w = np.asarray(column_mass, dtype=np.float64)
        m_pos = w[pos].mean() if pos.any() else np.inf
        m_neg = w[neg].mean() if neg.any() else np.inf
        if m_neg < m_pos:
            s = -1
    sel, thr, fb = (pos, thr_pos, fb_pos) if s == 1 else (neg, thr_neg, fb_neg)
    if fb:
        log.info("defocus threshold put every token on one side; fell back to a median split")
    candidates = np.flatnonzero(sel)
    t_def = np.setdiff1d(candidates, np.asarray(list(t_dis), dtype=np.intp))
    return PartitionResult(y, float("nan"), t_def, candidates, thr, s, fb)


def defocus_partition(similarity: np.ndarray, t_dis=(), column_mass=None, rule: str = "mean",
                      source: str = "kk_cum_avg") -> PartitionResult:
    part = fiedler(build_graph(similarity, source))
    sel = select_defocused(part.fiedler, rule, t_dis, column_mass)
    sel.eigenvalue = part.eigenvalue
    return sel
