"""Tiny random-weight model and synthetic images for tests and smoke runs.

The tower has 2 layers, 2 heads, width 16, patch 8 and a 24 pixel window
(a 3x3 patch grid). Two positional-embedding rows carry a large value in a
distraction dimension so the localization rule has something to find.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, RunConfig
from .model_io.checkpoint import CheckpointStore, expected_shapes, save_checkpoint, validate_tensors
from .model_io.classes import save_class_embeddings
from .model_io.images import write_netpbm
from .model_io.manifest import save_manifest

CLASS_NAMES = ("background", "disc", "bar")
DISTRACTION_DIMS = (3, 11)
SPIKED_PATCHES = {1: 3, 6: 11}  # patch index -> spiked dimension
SPIKE = 6.0
IMAGE_SHAPES = ((36, 36), (36, 48), (48, 36), (40, 56))


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(layers=2, heads=2, width=16, patch_size=8, image_size=24, output_dim=8,
                distraction_dims=DISTRACTION_DIMS)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_run_config(**overrides) -> RunConfig:
    model = overrides.pop("model", None) or tiny_model_config()
    base = dict(stride=12, short_side=36)
    base.update(overrides)
    return RunConfig(model=model, **base)


def random_tensors(config: ModelConfig, seed: int = 0, spikes: dict[int, int] | None = None,
                   ln_pre: bool = False) -> dict[str, np.ndarray]:
    """Small random weights in canonical naming.

    The residual stream stays dominated by a positive offset in the
    positional embedding, so per-token sums are well away from zero.
    """
    rng = np.random.default_rng(seed)
    spikes = SPIKED_PATCHES if spikes is None else spikes
    t = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gain"):
            t[name] = 1.0 + 0.05 * rng.standard_normal(shape)
        elif name.endswith(".bias") or ".b_" in name:
            t[name] = 0.02 * rng.standard_normal(shape)
        elif name == "patch_embed.weight":
            t[name] = 0.01 * rng.standard_normal(shape)
        elif name in ("class_token", "pos_embed"):
            t[name] = 0.05 * rng.standard_normal(shape)
        else:
            t[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    t["pos_embed"] += 0.5
    for patch, dim in spikes.items():
        t["pos_embed"][patch + 1, dim] += SPIKE
    if ln_pre:
        t["ln_pre.gain"] = np.ones(config.width)
        t["ln_pre.bias"] = np.full(config.width, 0.5)
    # keep the residual updates small relative to the embedding
    for i in range(config.layers):
        t[f"layer{i}.W_o"] *= 0.1
        t[f"layer{i}.mlp.W_out"] *= 0.1
    return {k: np.asarray(v, dtype=np.float32) for k, v in t.items()}


def tiny_checkpoint(seed: int = 0, config: ModelConfig | None = None) -> CheckpointStore:
    config = config or tiny_model_config()
    return CheckpointStore(config, validate_tensors(random_tensors(config, seed), config), f"tiny-seed{seed}")


def class_embeddings(output_dim: int = 8, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed + 1000)
    return rng.standard_normal((len(CLASS_NAMES), output_dim)).astype(np.float32)


def synthetic_scene(h: int, w: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """RGB uint8 image and label map: gray background, red disc, blue bar."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.uint8)
    cy, cx, r = h * rng.uniform(0.3, 0.7), w * rng.uniform(0.3, 0.7), min(h, w) * 0.25
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    x0 = int(rng.integers(0, w // 2))
    labels[: h // 5, x0 : x0 + w // 3] = 2
    colors = np.array([[128, 128, 128], [220, 30, 30], [30, 30, 220]], dtype=np.float64)
    img = colors[labels] + rng.normal(0, 10, (h, w, 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), labels


@dataclass(frozen=True)
class FixturePaths:
    root: Path
    checkpoint: Path
    classes: Path
    manifest: Path
    config: Path
    images: tuple[Path, ...]
    labels: tuple[Path, ...]


def make_fixture(out_dir: str | Path, seed: int = 0) -> FixturePaths:
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    run = tiny_run_config()
    cfg = run.model
    ckpt = root / "tiny.safetensors"
    save_checkpoint(ckpt, random_tensors(cfg, seed), {"note": "random weights, synthetic fixture"})
    cls = root / "classes.bin"
    save_class_embeddings(cls, CLASS_NAMES, class_embeddings(cfg.output_dim, seed), "random fixture embeddings")
    images, labels = [], []
    for k, (h, w) in enumerate(IMAGE_SHAPES):
        img, lab = synthetic_scene(h, w, seed + k)
        if k == 3:
            lab[:, :2] = 255  # a strip of ignore pixels
        ip, lp = root / "images" / f"scene{k}.ppm", root / "labels" / f"scene{k}.pgm"
        write_netpbm(ip, img)
        write_netpbm(lp, lab)
        images.append(ip)
        labels.append(lp)
    manifest = root / "manifest.json"
    save_manifest(manifest, list(zip(images, labels)), CLASS_NAMES)
    config = root / "run.json"
    run.replace(output_dir=str(root / "out")).save(config)
    return FixturePaths(root, ckpt, cls, manifest, config, tuple(images), tuple(labels))
