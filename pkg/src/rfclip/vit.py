"""CLIP visual tower forward pass with a per-layer attention/embedding hook.

Layer numbering is 1-based. A ``TokenState`` with ``layer == l`` holds the
residual stream after ``l`` residual layers (``0`` is the patch embedding).
Layers ``1 .. L-1`` run as ordinary residual blocks; layer ``L`` follows the
last-layer rule: its self-attention output alone, with the attention matrix
swapped for a proxy (layer-averaged key-key by default), is the dense output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .model_io.checkpoint import CheckpointStore, LayerWeights
from .numerics import ACTIVATIONS, layernorm, softmax_rows

STOCHASTIC_TOL = 1e-5


@dataclass
class TokenState:
    layer: int
    f: np.ndarray  # (N + 1, d); row 0 is the global token

    def __post_init__(self):
        n = self.f.shape[0] - 1
        g = math.isqrt(n)
        if g * g != n:
            raise ShapeError(f"{n} patch tokens do not form a square grid")

    @property
    def grid(self) -> int:
        return math.isqrt(self.f.shape[0] - 1)

    @property
    def patches(self) -> np.ndarray:
        return self.f[1:]

    def with_patches(self, patches: np.ndarray) -> "TokenState":
        f = self.f.copy()
        f[1:] = patches
        return TokenState(self.layer, f)


def check_row_stochastic(attn: np.ndarray, what: str = "attention", tol: float = STOCHASTIC_TOL) -> None:
    a = np.asarray(attn)
    if not np.all(np.isfinite(a)) or a.min() < -tol:
        raise ContractError(f"{what} has negative or non-finite entries")
    dev = np.max(np.abs(a.sum(axis=-1, dtype=np.float64) - 1.0))
    if dev > tol:
        raise ContractError(f"{what} rows deviate from 1 by {dev:.2e}")


class AttentionStack:
    """Per-layer attention record and running head-averaged sums.

    ``push`` takes per-head softmax maps for one layer: the query-key map
    (before any hook rewrites it), plus key-key and query-query maps.
    """

    KINDS = ("qk", "kk", "qq")

    def __init__(self, keep_heads: bool = True):
        self.keep_heads = keep_heads
        self.means: dict[str, list[np.ndarray]] = {k: [] for k in self.KINDS}
        self.heads: dict[str, list[np.ndarray]] = {k: [] for k in self.KINDS}
        self.used: list[np.ndarray] = []  # head-mean attention actually applied (post-hook)
        self._sums: dict[str, np.ndarray | None] = {k: None for k in self.KINDS}

    @property
    def depth(self) -> int:
        return len(self.means["kk"])

    def push(self, qk: np.ndarray, kk: np.ndarray, qq: np.ndarray) -> None:
        for kind, maps in (("qk", qk), ("kk", kk), ("qq", qq)):
            mean = maps.astype(np.float64).mean(axis=0)
            self.means[kind].append(mean)
            if self.keep_heads:
                self.heads[kind].append(maps)
            s = self._sums[kind]
            self._sums[kind] = mean.copy() if s is None else s + mean

    def record_used(self, attn: np.ndarray) -> None:
        self.used.append(attn.astype(np.float64).mean(axis=0))

    def cum_avg(self, kind: str = "kk") -> np.ndarray:
        """Mean over all pushed layers and heads, i.e. (1 / (l H)) sum_{i<=l, h}."""
        if self.depth == 0:
            raise ContractError("attention stack is empty")
        return self._sums[kind] / self.depth

    def layer_mean(self, kind: str, layer: int) -> np.ndarray:
        return self.means[kind][layer - 1]


class LayerHook:
    """No-op hook. Subclasses rewrite attention and/or the layer output.

    ``attention`` receives per-head maps ``attn`` of shape (H, N+1, N+1) and
    must return row-stochastic maps of the same shape. ``post_layer`` gets the
    residual stream after the MLP block and may return a modified copy.
    """

    def attention(self, layer: int, state: TokenState, q, k, v, attn: np.ndarray,
                  stack: AttentionStack) -> np.ndarray:
        return attn

    def post_layer(self, layer: int, state: TokenState) -> TokenState:
        return state


IDENTITY_HOOK = LayerHook()


@dataclass
class TowerOutput:
    features: np.ndarray  # (N + 1, output_dim) in the shared space
    stack: AttentionStack
    states: list[TokenState] = field(default_factory=list)
    final_attention: np.ndarray | None = None


def _linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = x.astype(np.float64) @ W.astype(np.float64)
    if b is not None:
        y += b
    return y.astype(np.float32)


class VisionTower:
    def __init__(self, ckpt: CheckpointStore, debug: bool = False):
        self.ckpt = ckpt
        self.config = ckpt.config
        self.debug = debug
        cfg = self.config
        self.scale = 1.0 / math.sqrt(cfg.head_dim if cfg.attn_scale == "head" else cfg.width)
        self.act = ACTIVATIONS[cfg.activation]
        d, p = cfg.width, cfg.patch_size
        self._patch_kernel = ckpt["patch_embed.weight"].reshape(d, 3 * p * p).T  # (3 p p, d)

    def embed_patches(self, window: np.ndarray) -> TokenState:
        cfg = self.config
        window = np.asarray(window, dtype=np.float32)
        s, p, g = cfg.image_size, cfg.patch_size, cfg.grid
        if window.shape != (s, s, 3):
            raise ShapeError(f"window must be ({s}, {s}, 3), got {window.shape}")
        # (g, p, g, p, C) -> (g, g, C, p, p) to match the (d, C, p, p) conv kernel layout
        cols = window.reshape(g, p, g, p, 3).transpose(0, 2, 4, 1, 3).reshape(g * g, 3 * p * p)
        tokens = _linear(cols, self._patch_kernel)
        f = np.concatenate([self.ckpt["class_token"][None, :], tokens], axis=0)
        f = (f.astype(np.float64) + self.ckpt["pos_embed"]).astype(np.float32)
        if self.ckpt.get("ln_pre.gain") is not None:
            f = layernorm(f, self.ckpt["ln_pre.gain"], self.ckpt["ln_pre.bias"], cfg.ln_eps)
        return TokenState(0, f)

    def _qkv(self, state: TokenState, w: LayerWeights):
        cfg = self.config
        x = layernorm(state.f, w.ln1_gain, w.ln1_bias, cfg.ln_eps)
        n, H, dh = x.shape[0], cfg.heads, cfg.head_dim

        def heads(t):
            return t.reshape(n, H, dh).transpose(1, 0, 2)

        return heads(_linear(x, w.W_q, w.b_q)), heads(_linear(x, w.W_k, w.b_k)), heads(_linear(x, w.W_v, w.b_v))

    def _maps(self, q: np.ndarray, k: np.ndarray):
        q64 = q.astype(np.float64)
        k64 = k.astype(np.float64)
        qk = softmax_rows(q64 @ k64.transpose(0, 2, 1), self.scale).astype(np.float32)
        kk = softmax_rows(k64 @ k64.transpose(0, 2, 1), self.scale).astype(np.float32)
        qq = softmax_rows(q64 @ q64.transpose(0, 2, 1), self.scale).astype(np.float32)
        return qk, kk, qq

    def attention_layer(self, state: TokenState, layer: int, hook: LayerHook | None = None,
                        stack: AttentionStack | None = None) -> tuple[TokenState, np.ndarray]:
        """Run residual layer ``layer`` (1-based) on ``state``.

        Returns the new state and the per-head attention that was applied.
        """
        cfg = self.config
        if not 1 <= layer <= cfg.layers:
            raise ShapeError(f"layer {layer} outside 1..{cfg.layers}")
        hook = hook or IDENTITY_HOOK
        stack = stack if stack is not None else AttentionStack(keep_heads=False)
        w = self.ckpt.layer_weights[layer - 1]
        q, k, v = self._qkv(state, w)
        qk, kk, qq = self._maps(q, k)
        stack.push(qk, kk, qq)
        attn = hook.attention(layer, state, q, k, v, qk, stack)
        if attn is not qk and self.debug:
            check_row_stochastic(attn, f"hook attention at layer {layer}")
        stack.record_used(attn)
        n = state.f.shape[0]
        heads_out = attn.astype(np.float64) @ v.astype(np.float64)  # (H, n, dh)
        merged = heads_out.transpose(1, 0, 2).reshape(n, cfg.width).astype(np.float32)
        f = (state.f.astype(np.float64) + _linear(merged, w.W_o, w.b_o)).astype(np.float32)
        x2 = layernorm(f, w.ln2_gain, w.ln2_bias, cfg.ln_eps)
        hidden = self.act(_linear(x2, w.W_in, w.b_in))
        f = (f.astype(np.float64) + _linear(hidden, w.W_out, w.b_out)).astype(np.float32)
        out = hook.post_layer(layer, TokenState(layer, f))
        if not np.all(np.isfinite(out.f)):
            raise NumericError(f"non-finite embeddings after layer {layer}")
        return out, attn

    def project(self, f: np.ndarray) -> np.ndarray:
        f = layernorm(f, self.ckpt["ln_post.gain"], self.ckpt["ln_post.bias"], self.config.ln_eps)
        return _linear(f, self.ckpt["proj"])

    def final_layer(self, state: TokenState, attn: np.ndarray) -> np.ndarray:
        """Dense output of the last layer: attn . V, output projection, ln_post, proj.

        No residual connection and no MLP. ``attn`` is one (N+1, N+1) map
        shared by every head.
        """
        cfg = self.config
        n = state.f.shape[0]
        attn = np.asarray(attn)
        if attn.shape != (n, n):
            raise ShapeError(f"final attention must be ({n}, {n}), got {attn.shape}")
        check_row_stochastic(attn, "final-layer attention")
        w = self.ckpt.layer_weights[cfg.layers - 1]
        x = layernorm(state.f, w.ln1_gain, w.ln1_bias, cfg.ln_eps)
        v = _linear(x, w.W_v, w.b_v)
        mixed = (attn.astype(np.float64) @ v.astype(np.float64)).astype(np.float32)
        return self.project(_linear(mixed, w.W_o, w.b_o))

    def forward(self, window: np.ndarray, hook: LayerHook | None = None, final_attention: str = "kk_avg",
                keep_heads: bool = False, keep_states: bool = False) -> TowerOutput:
        """Full tower over one window.

        ``final_attention`` is ``"plain"`` for the unmodified CLIP last layer
        (residual and MLP kept) or one of ``kk_avg``, ``qq_avg``, ``kk_last``,
        ``qq_last`` for the proxy last layer.
        """
        cfg = self.config
        stack = AttentionStack(keep_heads=keep_heads)
        state = self.embed_patches(window)
        states = [state] if keep_states else []
        for layer in range(1, cfg.layers):
            state, _ = self.attention_layer(state, layer, hook, stack)
            if keep_states:
                states.append(state)
        if final_attention == "plain":
            state, _ = self.attention_layer(state, cfg.layers, None, stack)
            if keep_states:
                states.append(state)
            return TowerOutput(self.project(state.f), stack, states, None)
        q, k, _ = self._qkv(state, self.ckpt.layer_weights[cfg.layers - 1])
        qk, kk, qq = self._maps(q, k)
        stack.push(qk, kk, qq)
        kind, which = final_attention.split("_")
        attn = stack.cum_avg(kind) if which == "avg" else stack.layer_mean(kind, cfg.layers)
        stack.record_used(attn[None])
        return TowerOutput(self.final_layer(state, attn), stack, states, attn)
