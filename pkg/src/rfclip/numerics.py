"""Dense kernels shared by the encoder, the refocus hooks and the spectral cut.

Matrices are plain 2-D numpy arrays. Reductions accumulate in float64 and the
result is cast back to the storage dtype (float32 unless asked otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class EigenPair:
    eigenvalue: float
    eigenvector: np.ndarray


def matmul(a: np.ndarray, b: np.ndarray, out_dtype=None) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if out_dtype is None:
        out_dtype = np.result_type(a.dtype, b.dtype, np.float32)
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(out_dtype, copy=False)


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * m`` over the last axis.

    Works on stacks of matrices too (any leading batch axes). Entries equal
    to ``-inf`` in ``m`` receive exactly zero probability.
    """
    m = np.asarray(m)
    out_dtype = m.dtype if np.issubdtype(m.dtype, np.floating) else np.float64
    z = m.astype(np.float64) * scale
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z.astype(out_dtype, copy=False)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis, then scale and shift."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layernorm width mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ParameterError("layernorm eps must be positive")
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    y = xc / np.sqrt(var + eps)
    return (y * gain + bias).astype(out_dtype, copy=False)


def quick_gelu(x: np.ndarray) -> np.ndarray:
    # CLIP's sigmoid approximation
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 / (1.0 + np.exp(-1.702 * x64))).astype(np.asarray(x).dtype, copy=False)


def gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    x64 = np.asarray(x, dtype=np.float64)
    return (0.5 * x64 * (1.0 + erf(x64 / math.sqrt(2.0)))).astype(np.asarray(x).dtype, copy=False)


ACTIVATIONS = {"quick_gelu": quick_gelu, "gelu": gelu}


def _resize_axis_weights(n_in: int, n_out: int):
    # half-pixel centers, edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def bilinear_resize(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W (x C) array with align_corners=False."""
    img = np.asarray(img)
    th, tw = int(target[0]), int(target[1])
    if th <= 0 or tw <= 0:
        raise ParameterError(f"resize target must be positive, got {target}")
    if img.ndim not in (2, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"bilinear_resize expects H x W (x C) with H, W >= 1, got {img.shape}")
    h, w = img.shape[:2]
    if (h, w) == (th, tw):
        return img.copy()
    out_dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32
    src = img.astype(np.float64)
    r0, r1, wr = _resize_axis_weights(h, th)
    c0, c1, wc = _resize_axis_weights(w, tw)
    extra = (1,) * (img.ndim - 2)
    wr = wr.reshape((-1, 1) + extra)
    rows = src[r0] * (1.0 - wr) + src[r1] * wr
    wc = wc.reshape((1, -1) + extra)
    out = rows[:, c0] * (1.0 - wc) + rows[:, c1] * wc
    return out.astype(out_dtype, copy=False)


@numba.njit(cache=True)
def _tred2(V, d, e):
    # Householder reduction to tridiagonal form (EISPACK tred2 ordering).
    n = V.shape[0]
    for j in range(n):
        d[j] = V[n - 1, j]
    for i in range(n - 1, 0, -1):
        scale = 0.0
        h = 0.0
        for k in range(i):
            scale += abs(d[k])
        if scale == 0.0:
            e[i] = d[i - 1]
            for j in range(i):
                d[j] = V[i - 1, j]
                V[i, j] = 0.0
                V[j, i] = 0.0
        else:
            for k in range(i):
                d[k] /= scale
                h += d[k] * d[k]
            f = d[i - 1]
            g = math.sqrt(h)
            if f > 0:
                g = -g
            e[i] = scale * g
            h = h - f * g
            d[i - 1] = f - g
            for j in range(i):
                e[j] = 0.0
            for j in range(i):
                f = d[j]
                V[j, i] = f
                g = e[j] + V[j, j] * f
                for k in range(j + 1, i):
                    g += V[k, j] * d[k]
                    e[k] += V[k, j] * f
                e[j] = g
            f = 0.0
            for j in range(i):
                e[j] /= h
                f += e[j] * d[j]
            hh = f / (h + h)
            for j in range(i):
                e[j] -= hh * d[j]
            for j in range(i):
                f = d[j]
                g = e[j]
                for k in range(j, i):
                    V[k, j] -= f * e[k] + g * d[k]
                d[j] = V[i - 1, j]
                V[i, j] = 0.0
        d[i] = h
    # accumulate transformations
    for i in range(n - 1):
        V[n - 1, i] = V[i, i]
        V[i, i] = 1.0
        h = d[i + 1]
        if h != 0.0:
            for k in range(i + 1):
                d[k] = V[k, i + 1] / h
            for j in range(i + 1):
                g = 0.0
                for k in range(i + 1):
                    g += V[k, i + 1] * V[k, j]
                for k in range(i + 1):
                    V[k, j] -= g * d[k]
        for k in range(i + 1):
            V[k, i + 1] = 0.0
    for j in range(n):
        d[j] = V[n - 1, j]
        V[n - 1, j] = 0.0
    V[n - 1, n - 1] = 1.0
    e[0] = 0.0


@numba.njit(cache=True)
def _tql2(V, d, e, max_iter):
    # Implicit-shift QL on the tridiagonal (d, e); rotations accumulate into V.
    # Returns False if some eigenvalue fails to converge.
    n = V.shape[0]
    for i in range(1, n):
        e[i - 1] = e[i]
    e[n - 1] = 0.0
    f = 0.0
    tst1 = 0.0
    eps = 2.0 ** -52
    for l in range(n):
        tst1 = max(tst1, abs(d[l]) + abs(e[l]))
        m = l
        while m < n - 1:
            if abs(e[m]) <= eps * tst1:
                break
            m += 1
        if m > l:
            it = 0
            while True:
                it += 1
                if it > max_iter:
                    return False
                g = d[l]
                p = (d[l + 1] - g) / (2.0 * e[l])
                r = math.hypot(p, 1.0)
                if p < 0:
                    r = -r
                d[l] = e[l] / (p + r)
                d[l + 1] = e[l] * (p + r)
                dl1 = d[l + 1]
                h = g - d[l]
                for i in range(l + 2, n):
                    d[i] -= h
                f += h
                p = d[m]
                c = 1.0
                c2 = c
                c3 = c
                el1 = e[l + 1]
                s = 0.0
                s2 = 0.0
                for i in range(m - 1, l - 1, -1):
                    c3 = c2
                    c2 = c
                    s2 = s
                    g = c * e[i]
                    h = c * p
                    r = math.hypot(p, e[i])
                    e[i + 1] = s * r
                    s = e[i] / r
                    c = p / r
                    p = c * d[i] - s * g
                    d[i + 1] = h + s * (c * g + s * d[i])
                    for k in range(n):
                        h = V[k, i + 1]
                        V[k, i + 1] = s * V[k, i] + c * h
                        V[k, i] = c * V[k, i] - s * h
                p = -s * s2 * c3 * el1 * e[l] / dl1
                e[l] = s * p
                d[l] = c * p
                if not abs(e[l]) > eps * tst1:
                    break
        d[l] = d[l] + f
        e[l] = 0.0
    return True


def sym_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full eigendecomposition of a symmetric matrix.

    Returns ascending eigenvalues and the matching unit eigenvectors as
    columns. Each eigenvector's sign is fixed so that its largest-magnitude
    entry (first one on ties) is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    n = a.shape[0]
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > 1e-8 * max(1.0, float(np.max(np.abs(a))) if n else 1.0):
        raise ContractError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    if n == 1:
        return a[0].copy(), np.ones((1, 1))
    V = np.ascontiguousarray((a + a.T) * 0.5)
    d = np.zeros(n)
    e = np.zeros(n)
    _tred2(V, d, e)
    if not _tql2(V, d, e, 60):
        raise NumericError(f"QL iteration failed to converge (n={n}, ||A||_max={np.max(np.abs(a)):.3e})")
    order = np.argsort(d, kind="stable")
    w = d[order]
    V = V[:, order]
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(n)])
    signs[signs == 0] = 1.0
    return w, V * signs


def sym_eigen_smallest(a: np.ndarray, k: int) -> list[EigenPair]:
    a = np.asarray(a, dtype=np.float64)
    if k < 1 or k > a.shape[0]:
        raise ParameterError(f"k must be in [1, {a.shape[0]}], got {k}")
    w, V = sym_eigh(a)
    return [EigenPair(float(w[i]), V[:, i].copy()) for i in range(k)]
