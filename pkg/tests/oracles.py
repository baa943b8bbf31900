"""Slow reference implementations used only by the tests.

Everything here is written with explicit Python loops over floats so that it
shares no code path with the vectorized package.
"""

import math


def mat(a):
    return [[float(v) for v in row] for row in a]


def vec(a):
    return [float(v) for v in a]


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def add_bias(x, b):
    return [[v + b[j] for j, v in enumerate(row)] for row in x]


def layernorm(x, g, b, eps=1e-5):
    out = []
    for row in x:
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out.append([(v - mu) / math.sqrt(var + eps) * g[j] + b[j] for j, v in enumerate(row)])
    return out


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def quick_gelu(v):
    return v / (1.0 + math.exp(-1.702 * v))


def embed(window, t, cfg):
    """Unfold patches then project with the conv kernel, add class token and positions."""
    p, g, d = cfg.patch_size, cfg.grid, cfg.width
    W = t["patch_embed.weight"]
    rows = [vec(t["class_token"])]
    for gi in range(g):
        for gj in range(g):
            tok = []
            for o in range(d):
                s = 0.0
                for c in range(3):
                    for u in range(p):
                        for v in range(p):
                            s += float(window[gi * p + u][gj * p + v][c]) * float(W[o][c][u][v])
                tok.append(s)
            rows.append(tok)
    pos = mat(t["pos_embed"])
    f = [[a + b for a, b in zip(r, pr)] for r, pr in zip(rows, pos)]
    if "ln_pre.gain" in t:
        f = layernorm(f, vec(t["ln_pre.gain"]), vec(t["ln_pre.bias"]))
    return f


def head_maps(x, t, i, cfg, scale_dim=None):
    """Per-head q, k, v and the three softmax maps (qk, kk, qq)."""
    H, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(scale_dim or dh)
    q = add_bias(matmul(x, mat(t[f"layer{i}.W_q"])), vec(t[f"layer{i}.b_q"]))
    k = add_bias(matmul(x, mat(t[f"layer{i}.W_k"])), vec(t[f"layer{i}.b_k"]))
    v = add_bias(matmul(x, mat(t[f"layer{i}.W_v"])), vec(t[f"layer{i}.b_v"]))
    n = len(x)
    heads = []
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        qh = [r[sl] for r in q]
        kh = [r[sl] for r in k]
        vh = [r[sl] for r in v]

        def amap(a, b):
            return [softmax([scale * sum(a[r][c] * b[s][c] for c in range(dh)) for s in range(n)])
                    for r in range(n)]

        heads.append({"q": qh, "k": kh, "v": vh, "qk": amap(qh, kh), "kk": amap(kh, kh), "qq": amap(qh, qh)})
    return heads


def attend(heads, n, d, attn_override=None):
    out = [[0.0] * d for _ in range(n)]
    dh = d // len(heads)
    for h, hd in enumerate(heads):
        A = attn_override if attn_override is not None else hd["qk"]
        for r in range(n):
            for c in range(dh):
                out[r][h * dh + c] = sum(A[r][s] * hd["v"][s][c] for s in range(n))
    return out


def residual_layer(f, t, i, cfg, scale_dim=None):
    n, d = len(f), cfg.width
    x = layernorm(f, vec(t[f"layer{i}.ln1.gain"]), vec(t[f"layer{i}.ln1.bias"]))
    heads = head_maps(x, t, i, cfg, scale_dim)
    o = add_bias(matmul(attend(heads, n, d), mat(t[f"layer{i}.W_o"])), vec(t[f"layer{i}.b_o"]))
    f = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(f, o)]
    x2 = layernorm(f, vec(t[f"layer{i}.ln2.gain"]), vec(t[f"layer{i}.ln2.bias"]))
    hdn = add_bias(matmul(x2, mat(t[f"layer{i}.mlp.W_in"])), vec(t[f"layer{i}.mlp.b_in"]))
    hdn = [[quick_gelu(v) for v in r] for r in hdn]
    m = add_bias(matmul(hdn, mat(t[f"layer{i}.mlp.W_out"])), vec(t[f"layer{i}.mlp.b_out"]))
    return [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(f, m)], heads


def project(f, t):
    return matmul(layernorm(f, vec(t["ln_post.gain"]), vec(t["ln_post.bias"])), mat(t["proj"]))


def forward(window, t, cfg, scale_dim=None):
    """Plain tower: every layer residual. Returns (states, projected tokens, per-layer heads)."""
    f = embed(window, t, cfg)
    states, all_heads = [f], []
    for i in range(cfg.layers):
        f, heads = residual_layer(f, t, i, cfg, scale_dim)
        states.append(f)
        all_heads.append(heads)
    return states, project(f, t), all_heads


def forward_kk_proxy(window, t, cfg):
    """Layers 1..L-1 residual; last layer = layer/head-averaged kk attention times V, no residual/MLP."""
    f = embed(window, t, cfg)
    kk_layers = []
    for i in range(cfg.layers - 1):
        f, heads = residual_layer(f, t, i, cfg)
        kk_layers.append(heads)
    L = cfg.layers - 1
    x = layernorm(f, vec(t[f"layer{L}.ln1.gain"]), vec(t[f"layer{L}.ln1.bias"]))
    heads = head_maps(x, t, L, cfg)
    kk_layers.append(heads)
    n, d = len(f), cfg.width
    count = 0
    A = [[0.0] * n for _ in range(n)]
    for layer in kk_layers:
        for hd in layer:
            count += 1
            for r in range(n):
                for s in range(n):
                    A[r][s] += hd["kk"][r][s]
    A = [[v / count for v in r] for r in A]
    v = add_bias(matmul(x, mat(t[f"layer{L}.W_v"])), vec(t[f"layer{L}.b_v"]))
    mixed = matmul(A, v)
    o = add_bias(matmul(mixed, mat(t[f"layer{L}.W_o"])), vec(t[f"layer{L}.b_o"]))
    return project(o, t), A


def redistribute_row(row, dis, dfc, beta):
    """Eqs. 9-12 on one attention row, written out term by term."""
    out = list(row)
    budget = beta * sum(row[j] for j in dis)
    def_mass = sum(row[j] for j in dfc)
    if not dis or not dfc or def_mass <= 0:
        return out
    for j in dis:
        out[j] = (1 - beta) * row[j]
    for j in dfc:
        out[j] = row[j] + budget * row[j] / def_mass
    return out


def phi(token, dims):
    total = sum(float(v) for v in token)
    if abs(total) < 1e-8:
        return None
    return max(float(token[j]) / total for j in dims)
