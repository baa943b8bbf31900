"""Named-tensor checkpoint container (safetensors layout) and weight validation.

File layout: u64 little-endian header length, a JSON header mapping each
tensor name to ``{"dtype", "shape", "data_offsets"}``, then the raw
little-endian payload. Weights are kept in a canonical naming scheme::

    patch_embed.weight   (d, 3, p, p)
    class_token          (d,)
    pos_embed            (N + 1, d)
    ln_pre.gain/bias     (d,)            optional
    layer{i}.ln1.gain/bias, layer{i}.ln2.gain/bias
    layer{i}.W_q/W_k/W_v/W_o  (d, d)    stored as (in, out): y = x @ W + b
    layer{i}.b_q/b_k/b_v/b_o  (d,)
    layer{i}.mlp.W_in (d, m)  layer{i}.mlp.b_in (m,)
    layer{i}.mlp.W_out (m, d) layer{i}.mlp.b_out (d,)
    ln_post.gain/bias    (d,)
    proj                 (d, output_dim)

Layers are numbered from 0. OpenAI/open_clip (``visual.*``) and Hugging Face
(``vision_model.*``) names are translated on load.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import ModelConfig
from ..errors import DecodeError, ShapeError, TensorAbsentError

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        key = next((k for k, v in _DTYPES.items() if v == arr.dtype.newbyteorder("<")), None)
        if key is None:
            raise ShapeError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw = arr.astype(_DTYPES[key], copy=False).tobytes()
        header[name] = {"dtype": key, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode()
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def _bf16_to_f32(raw: bytes) -> np.ndarray:
    u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
    return (u16 << 16).view(np.float32)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str], str]:
    """Return (tensors, metadata, sha256 of the payload)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 8:
        raise DecodeError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise DecodeError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(data[8 : 8 + n])
    except json.JSONDecodeError as exc:
        raise DecodeError(f"{path}: malformed header: {exc}") from exc
    payload = memoryview(data)[8 + n :]
    metadata = header.pop("__metadata__", {}) or {}
    tensors = {}
    for name, info in header.items():
        begin, end = info["data_offsets"]
        if end > len(payload) or begin > end:
            raise DecodeError(f"{path}: tensor {name} points outside the payload")
        raw = bytes(payload[begin:end])
        dtype = info["dtype"]
        if dtype == "BF16":
            arr = _bf16_to_f32(raw)
        elif dtype in _DTYPES:
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).copy()
        else:
            raise DecodeError(f"{path}: tensor {name} has unsupported dtype {dtype}")
        shape = tuple(info["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise DecodeError(f"{path}: tensor {name} byte size does not match shape {shape}")
        tensors[name] = arr.reshape(shape)
    digest = hashlib.sha256(payload).hexdigest()
    return tensors, metadata, digest


def _translate_openai(t: dict[str, np.ndarray], L: int) -> dict[str, np.ndarray]:
    p = "visual."
    out = {
        "patch_embed.weight": t.get(p + "conv1.weight"),
        "class_token": t.get(p + "class_embedding"),
        "pos_embed": t.get(p + "positional_embedding"),
        "ln_pre.gain": t.get(p + "ln_pre.weight"),
        "ln_pre.bias": t.get(p + "ln_pre.bias"),
        "ln_post.gain": t.get(p + "ln_post.weight"),
        "ln_post.bias": t.get(p + "ln_post.bias"),
        "proj": t.get(p + "proj"),
    }
    for i in range(L):
        b = f"{p}transformer.resblocks.{i}."
        w_in = t.get(b + "attn.in_proj_weight")
        b_in = t.get(b + "attn.in_proj_bias")
        if w_in is not None:
            for k, part in enumerate(np.split(w_in, 3, axis=0)):
                out[f"layer{i}.W_{'qkv'[k]}"] = part.T
        if b_in is not None:
            for k, part in enumerate(np.split(b_in, 3)):
                out[f"layer{i}.b_{'qkv'[k]}"] = part
        simple = {
            "ln1.gain": "ln_1.weight", "ln1.bias": "ln_1.bias",
            "ln2.gain": "ln_2.weight", "ln2.bias": "ln_2.bias",
            "b_o": "attn.out_proj.bias", "mlp.b_in": "mlp.c_fc.bias", "mlp.b_out": "mlp.c_proj.bias",
        }
        for dst, src in simple.items():
            out[f"layer{i}.{dst}"] = t.get(b + src)
        for dst, src in {"W_o": "attn.out_proj.weight", "mlp.W_in": "mlp.c_fc.weight",
                         "mlp.W_out": "mlp.c_proj.weight"}.items():
            w = t.get(b + src)
            out[f"layer{i}.{dst}"] = None if w is None else w.T
    return {k: v for k, v in out.items() if v is not None}


def _translate_hf(t: dict[str, np.ndarray], L: int) -> dict[str, np.ndarray]:
    p = "vision_model."
    proj = t.get("visual_projection.weight")
    out = {
        "patch_embed.weight": t.get(p + "embeddings.patch_embedding.weight"),
        "class_token": t.get(p + "embeddings.class_embedding"),
        "pos_embed": t.get(p + "embeddings.position_embedding.weight"),
        "ln_pre.gain": t.get(p + "pre_layrnorm.weight"),
        "ln_pre.bias": t.get(p + "pre_layrnorm.bias"),
        "ln_post.gain": t.get(p + "post_layernorm.weight"),
        "ln_post.bias": t.get(p + "post_layernorm.bias"),
        "proj": None if proj is None else proj.T,
    }
    for i in range(L):
        b = f"{p}encoder.layers.{i}."
        for k in "qkv":
            w = t.get(b + f"self_attn.{k}_proj.weight")
            out[f"layer{i}.W_{k}"] = None if w is None else w.T
            out[f"layer{i}.b_{k}"] = t.get(b + f"self_attn.{k}_proj.bias")
        w = t.get(b + "self_attn.out_proj.weight")
        out[f"layer{i}.W_o"] = None if w is None else w.T
        out[f"layer{i}.b_o"] = t.get(b + "self_attn.out_proj.bias")
        for dst, src in {"ln1": "layer_norm1", "ln2": "layer_norm2"}.items():
            out[f"layer{i}.{dst}.gain"] = t.get(b + src + ".weight")
            out[f"layer{i}.{dst}.bias"] = t.get(b + src + ".bias")
        for dst, src in {"W_in": "fc1", "W_out": "fc2"}.items():
            w = t.get(b + f"mlp.{src}.weight")
            out[f"layer{i}.mlp.{dst}"] = None if w is None else w.T
        out[f"layer{i}.mlp.b_in"] = t.get(b + "mlp.fc1.bias")
        out[f"layer{i}.mlp.b_out"] = t.get(b + "mlp.fc2.bias")
    return {k: v for k, v in out.items() if v is not None}


def detect_format(names) -> str:
    names = list(names)
    if any(n.startswith("visual.") for n in names):
        return "openai"
    if any(n.startswith("vision_model.") for n in names):
        return "hf"
    return "canonical"


def expected_shapes(config: ModelConfig, mlp_width: int | None = None) -> dict[str, tuple[int, ...]]:
    d, p = config.width, config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3, p, p),
        "class_token": (d,),
        "pos_embed": (config.num_patches + 1, d),
        "ln_post.gain": (d,),
        "ln_post.bias": (d,),
        "proj": (d, config.output_dim),
    }
    m = mlp_width or 4 * d
    for i in range(config.layers):
        for k in "qkvo":
            shapes[f"layer{i}.W_{k}"] = (d, d)
            shapes[f"layer{i}.b_{k}"] = (d,)
        for ln in ("ln1", "ln2"):
            shapes[f"layer{i}.{ln}.gain"] = (d,)
            shapes[f"layer{i}.{ln}.bias"] = (d,)
        shapes[f"layer{i}.mlp.W_in"] = (d, m)
        shapes[f"layer{i}.mlp.b_in"] = (m,)
        shapes[f"layer{i}.mlp.W_out"] = (m, d)
        shapes[f"layer{i}.mlp.b_out"] = (d,)
    return shapes


@dataclass(frozen=True)
class LayerWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    W_q: np.ndarray
    b_q: np.ndarray
    W_k: np.ndarray
    b_k: np.ndarray
    W_v: np.ndarray
    b_v: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    W_in: np.ndarray
    b_in: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray


@dataclass(frozen=True)
class CheckpointStore:
    """Validated, read-only weights in canonical naming (float32)."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    checksum: str
    source_format: str = "canonical"
    layer_weights: tuple[LayerWeights, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.flags.writeable = False
        layers = []
        for i in range(self.config.layers):
            g = lambda k: self.tensors[f"layer{i}.{k}"]  # noqa: E731
            layers.append(LayerWeights(
                g("ln1.gain"), g("ln1.bias"), g("W_q"), g("b_q"), g("W_k"), g("b_k"), g("W_v"), g("b_v"),
                g("W_o"), g("b_o"), g("ln2.gain"), g("ln2.bias"),
                g("mlp.W_in"), g("mlp.b_in"), g("mlp.W_out"), g("mlp.b_out"),
            ))
        object.__setattr__(self, "layer_weights", tuple(layers))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise TensorAbsentError(f"tensor {name!r} absent from checkpoint") from None

    def get(self, name: str, default=None):
        return self.tensors.get(name, default)


def validate_tensors(tensors: dict[str, np.ndarray], config: ModelConfig) -> dict[str, np.ndarray]:
    mlp_w = tensors.get("layer0.mlp.W_in")
    shapes = expected_shapes(config, None if mlp_w is None else mlp_w.shape[-1])
    for name, shape in shapes.items():
        if name not in tensors:
            raise TensorAbsentError(f"tensor {name!r} absent from checkpoint")
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {shape}")
    for opt in ("ln_pre.gain", "ln_pre.bias"):
        if opt in tensors and tuple(tensors[opt].shape) != (config.width,):
            raise ShapeError(f"tensor {opt!r} has shape {tuple(tensors[opt].shape)}, expected ({config.width},)")
    if ("ln_pre.gain" in tensors) != ("ln_pre.bias" in tensors):
        raise TensorAbsentError("ln_pre needs both gain and bias")
    extra = sorted({int(m.group(1)) for n in tensors if (m := re.match(r"layer(\d+)\.", n))})
    if extra and extra[-1] >= config.layers:
        raise ShapeError(f"checkpoint has {extra[-1] + 1} layers, config expects {config.layers}")
    keep = set(shapes) | {"ln_pre.gain", "ln_pre.bias"}
    return {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in tensors.items() if k in keep}


def load_checkpoint(path: str | Path, config: ModelConfig) -> CheckpointStore:
    raw, _meta, digest = read_tensors(path)
    fmt = detect_format(raw)
    if fmt == "openai":
        n_layers = len({m.group(1) for n in raw if (m := re.match(r"visual\.transformer\.resblocks\.(\d+)\.", n))})
        tensors = _translate_openai(raw, max(n_layers, config.layers))
    elif fmt == "hf":
        n_layers = len({m.group(1) for n in raw if (m := re.match(r"vision_model\.encoder\.layers\.(\d+)\.", n))})
        tensors = _translate_hf(raw, max(n_layers, config.layers))
    else:
        tensors = raw
    return CheckpointStore(config, validate_tensors(tensors, config), digest, fmt)


def save_checkpoint(path: str | Path, store_or_tensors, metadata: dict[str, str] | None = None) -> None:
    tensors = store_or_tensors.tensors if isinstance(store_or_tensors, CheckpointStore) else store_or_tensors
    write_tensors(path, tensors, metadata)
