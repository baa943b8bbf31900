"""Distraction-token localization and attention/embedding redistribution.

Token indices in this module are patch indices ``0 .. N-1`` in row-major grid
order. Attention matrices carry the global token in row/column 0, so a patch
index ``i`` is column ``i + 1`` there.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, SUPPRESSION_STRATEGIES
from .errors import ContractError, ParameterError
from .spectral import PartitionResult, defocus_partition
from .vit import AttentionStack, LayerHook, TokenState

log = logging.getLogger(__name__)

DENOM_EPS = 1e-8


@dataclass
class DistractionProfile:
    layer: int
    phi: np.ndarray  # (N,), NaN where the token sum is ~0
    t_dis: np.ndarray  # sorted patch indices
    omega: np.ndarray | None = None  # (N,) column mass of averaged qk attention
    partition: PartitionResult | None = None
    t_def: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


def max_embedding_weight(patches: np.ndarray, dims) -> np.ndarray:
    """phi_i = max_{j in dims} f_i[j] / sum_k f_i[k]; NaN if |sum| < 1e-8."""
    f = np.asarray(patches, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.intp)
    total = f.sum(axis=1)
    phi = np.full(f.shape[0], np.nan)
    if dims.size == 0:
        return phi
    ok = np.abs(total) >= DENOM_EPS
    phi[ok] = (f[ok][:, dims] / total[ok, None]).max(axis=1)
    return phi


def column_mass(attn: np.ndarray) -> np.ndarray:
    """Patch-token column sums of an (N+1, N+1) attention map, over all query rows."""
    return np.asarray(attn, dtype=np.float64).sum(axis=0)[1:]


def localize_distractors(state: TokenState | np.ndarray, config, omega: np.ndarray | None = None,
                         layer: int | None = None) -> DistractionProfile:
    """Threshold rule on phi (joint with the column-mass floor when configured).

    ``state`` may be a TokenState (global row skipped) or an (N, d) array of
    patch embeddings.
    """
    if isinstance(state, TokenState):
        patches, layer = state.patches, state.layer if layer is None else layer
    else:
        patches = np.asarray(state)
    phi = max_embedding_weight(patches, config.distraction_dims)
    with np.errstate(invalid="ignore"):
        hit = phi > config.tau
    if config.joint_rule:
        if omega is None:
            raise ContractError("joint distractor rule needs attention column mass")
        hit &= np.asarray(omega) > config.attn_weight_floor
    return DistractionProfile(layer or 0, phi, np.flatnonzero(hit), omega)


def redistribute_attention(attn: np.ndarray, t_dis, t_def, beta: float) -> np.ndarray:
    """Move a fraction ``beta`` of every row's mass on ``t_dis`` columns onto ``t_def``.

    Indices are column indices of ``attn`` (shape (..., n, n)). The budget is
    shared among ``t_def`` columns in proportion to their current weights.
    Rows with no mass on ``t_def`` are left as they were.
    """
    attn = np.asarray(attn)
    dis = np.unique(np.asarray(list(t_dis), dtype=np.intp))
    dfc = np.unique(np.asarray(list(t_def), dtype=np.intp))
    if dis.size == 0 or dfc.size == 0:
        return attn.copy()
    if np.intersect1d(dis, dfc).size:
        raise ContractError("distraction and defocus sets overlap")
    if not 0 < beta < 1:
        raise ParameterError(f"beta must lie in (0, 1), got {beta}")
    work = attn.astype(np.float64, copy=False)
    dis_vals = work[..., dis]
    def_vals = work[..., dfc]
    budget = beta * dis_vals.sum(axis=-1, keepdims=True)
    def_mass = def_vals.sum(axis=-1, keepdims=True)
    live = def_mass > 0
    share = np.divide(def_vals, def_mass, out=np.zeros_like(def_vals), where=live)
    out = attn.copy()
    out[..., dis] = np.where(live, (1.0 - beta) * dis_vals, dis_vals)
    out[..., dfc] = np.where(live, def_vals + budget * share, def_vals)
    return out


def _neighbors(i: int, grid: int, radius: int) -> np.ndarray:
    r, c = divmod(i, grid)
    rows = np.arange(max(r - radius, 0), min(r + radius, grid - 1) + 1)
    cols = np.arange(max(c - radius, 0), min(c + radius, grid - 1) + 1)
    idx = (rows[:, None] * grid + cols[None, :]).ravel()
    return idx[idx != i]


def neighborhood_filter(patches: np.ndarray, tokens, grid: int, dims=None, size: int = 3,
                        reducer: str = "mean") -> np.ndarray:
    """Replace ``patches[i, dims]`` for each token by its spatial neighbours' mean/median.

    The neighbourhood is the ``size x size`` window minus the centre,
    clipped at the grid border (so border tokens use fewer neighbours). All
    replacements read the unmodified input.
    """
    src = np.asarray(patches)
    out = src.copy()
    reduce = {"mean": np.mean, "median": np.median}[reducer]
    cols = slice(None) if dims is None else np.asarray(dims, dtype=np.intp)
    radius = size // 2
    for i in np.asarray(list(tokens), dtype=np.intp):
        nb = _neighbors(int(i), grid, radius)
        if nb.size == 0:
            continue
        vals = src[nb][:, cols].astype(np.float64)
        out[i, cols] = reduce(vals, axis=0)
    return out


def redistribute_embeddings(state: TokenState | np.ndarray, t_dis, dims, grid: int | None = None,
                            size: int = 3):
    """Spatial averaging of the distraction dimensions of distraction tokens."""
    if isinstance(state, TokenState):
        return state.with_patches(neighborhood_filter(state.patches, t_dis, state.grid, dims, size))
    return neighborhood_filter(state, t_dis, grid, dims, size)


def mask_columns(attn: np.ndarray, cols) -> np.ndarray:
    """Post-softmax equivalent of setting the logits of ``cols`` to -inf."""
    cols = np.asarray(list(cols), dtype=np.intp)
    if cols.size == 0:
        return np.asarray(attn).copy()
    out = np.asarray(attn, dtype=np.float64).copy()
    out[..., cols] = 0.0
    total = out.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ContractError("masking removed every column of some attention row")
    return (out / total).astype(np.asarray(attn).dtype)


def low_pass(patches: np.ndarray, t_dis, dims, tau: float) -> np.ndarray:
    """Clamp distraction-dimension ratios of ``t_dis`` tokens down to ``tau``."""
    out = np.asarray(patches).copy()
    dims = np.asarray(dims, dtype=np.intp)
    for i in np.asarray(list(t_dis), dtype=np.intp):
        row = out[i].astype(np.float64)
        total = row.sum()
        if abs(total) < DENOM_EPS:
            continue
        over = row[dims] / total > tau
        out[i, dims[over]] = tau * total
    return out


def apply_suppression(patches: np.ndarray, t_dis, strategy: str, grid: int, dims=(), tau: float = 0.0,
                      attention: np.ndarray | None = None):
    """One of the four suppression baselines. Returns (patches, attention).

    ``neg_inf_mask`` acts on ``attention`` (patch ``i`` is column ``i + 1``);
    the other strategies act on the patch embeddings.
    """
    if strategy not in SUPPRESSION_STRATEGIES:
        raise ParameterError(f"unknown suppression strategy {strategy!r}")
    patches = np.asarray(patches)
    if strategy == "neg_inf_mask":
        if attention is None:
            raise ParameterError("neg_inf_mask needs the attention maps")
        return patches, mask_columns(attention, np.asarray(list(t_dis), dtype=np.intp) + 1)
    if strategy == "low_pass":
        return low_pass(patches, t_dis, dims, tau), attention
    reducer = "mean" if strategy == "mean_filter" else "median"
    return neighborhood_filter(patches, t_dis, grid, None, 3, reducer), attention


class RefocusHook(LayerHook):
    """Per-layer distractor localization, defocus localization and redistribution."""

    def __init__(self, run: RunConfig):
        self.run = run
        self.cfg = run.model
        self.profiles: dict[int, DistractionProfile] = {}
        self._pending: dict[int, np.ndarray] = {}

    def active(self, layer: int) -> bool:
        lo, hi = self.cfg.layer_range
        return lo <= layer <= hi

    def _similarity(self, layer: int, stack: AttentionStack) -> np.ndarray:
        src = self.run.similarity_source
        full = stack.cum_avg("kk") if src == "kk_cum_avg" else stack.layer_mean(src, layer)
        return full[1:, 1:]

    def attention(self, layer, state, q, k, v, attn, stack):
        if not self.active(layer):
            return attn
        omega = column_mass(stack.cum_avg("qk"))
        profile = localize_distractors(state, self.cfg, omega, layer)
        self.profiles[layer] = profile
        self._pending[layer] = profile.t_dis
        if profile.t_dis.size == 0 or not self.run.attention_redistribution:
            return attn
        target = self.run.budget_target
        if target == "cls":
            cols = np.array([0])
        elif target == "non_distraction":
            cols = np.setdiff1d(np.arange(profile.phi.size), profile.t_dis) + 1
        else:
            part = defocus_partition(self._similarity(layer, stack), profile.t_dis, omega,
                                     self.run.threshold_rule, self.run.similarity_source)
            profile.partition = part
            profile.t_def = part.t_def
            cols = part.t_def + 1
        return redistribute_attention(attn, profile.t_dis + 1, cols, self.cfg.beta).astype(attn.dtype, copy=False)

    def post_layer(self, layer, state):
        t_dis = self._pending.pop(layer, None)
        if t_dis is None or t_dis.size == 0 or not self.run.embedding_redistribution:
            return state
        return redistribute_embeddings(state, t_dis, self.cfg.distraction_dims, size=self.run.receptive_field)


class SuppressionHook(LayerHook):
    """Suppression baselines applied at every layer in the redistribution range."""

    def __init__(self, run: RunConfig, strategy: str):
        if strategy not in SUPPRESSION_STRATEGIES:
            raise ParameterError(f"unknown suppression strategy {strategy!r}")
        self.run = run
        self.cfg = run.model
        self.strategy = strategy
        self.profiles: dict[int, DistractionProfile] = {}
        self._pending: dict[int, np.ndarray] = {}

    def attention(self, layer, state, q, k, v, attn, stack):
        lo, hi = self.cfg.layer_range
        if not lo <= layer <= hi:
            return attn
        profile = localize_distractors(state, self.cfg, column_mass(stack.cum_avg("qk")), layer)
        self.profiles[layer] = profile
        self._pending[layer] = profile.t_dis
        if self.strategy == "neg_inf_mask" and profile.t_dis.size:
            _, attn = apply_suppression(state.patches, profile.t_dis, self.strategy, state.grid, attention=attn)
        return attn

    def post_layer(self, layer, state):
        t_dis = self._pending.pop(layer, None)
        if t_dis is None or t_dis.size == 0 or self.strategy == "neg_inf_mask":
            return state
        patches, _ = apply_suppression(state.patches, t_dis, self.strategy, state.grid,
                                       self.cfg.distraction_dims, self.cfg.tau)
        return state.with_patches(patches)


def make_hook(run: RunConfig) -> LayerHook | None:
    if run.mode == "refocus":
        return RefocusHook(run)
    if run.suppression:
        return SuppressionHook(run, run.suppression)
    return None
