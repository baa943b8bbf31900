"""Model and run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

B16_DISTRACTION_DIMS = (4, 162, 189, 326, 429, 474, 633, 713)
L14_DISTRACTION_DIMS = (250, 261, 437, 650, 720, 779, 936, 1005)

# OpenAI CLIP preprocessing constants
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

VARIANTS = ("B16", "L14", "custom")
MODES = ("refocus", "kk_proxy_baseline", "plain_clip")
SUPPRESSION_STRATEGIES = ("neg_inf_mask", "low_pass", "mean_filter", "median_filter")
THRESHOLD_RULES = ("mean", "otsu")
SIMILARITY_SOURCES = ("qk", "qq", "kk", "kk_cum_avg")
FINAL_ATTENTIONS = ("kk_avg", "qq_avg", "kk_last", "qq_last")
BUDGET_TARGETS = ("defocused", "non_distraction", "cls")


@dataclass
class ModelConfig:
    """Architecture of the visual tower plus the refocus parameters.

    ``tau=None`` resolves to 5/width (6/width for the L14 joint rule).
    ``redistribution_layers`` is an inclusive, 1-based layer range; ``None``
    means every layer.
    """

    layers: int
    heads: int
    width: int
    patch_size: int
    image_size: int
    output_dim: int
    distraction_dims: tuple[int, ...] = ()
    tau: float | None = None
    beta: float = 0.7
    attn_weight_floor: float = 15.0
    joint_rule: bool | None = None
    redistribution_layers: tuple[int, int] | None = None
    variant: str = "custom"
    attn_scale: str = "head"  # "head": 1/sqrt(d/H); "width": 1/sqrt(d)
    activation: str = "quick_gelu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.distraction_dims = tuple(int(j) for j in self.distraction_dims)
        if self.redistribution_layers is not None:
            self.redistribution_layers = tuple(int(v) for v in self.redistribution_layers)
        if self.joint_rule is None:
            self.joint_rule = self.variant == "L14"
        if self.tau is None:
            self.tau = (6.0 if self.joint_rule else 5.0) / self.width
        self.validate()

    @classmethod
    def b16(cls, **overrides) -> "ModelConfig":
        base = dict(layers=12, heads=12, width=768, patch_size=16, image_size=224, output_dim=512,
                    distraction_dims=B16_DISTRACTION_DIMS, variant="B16")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def l14(cls, **overrides) -> "ModelConfig":
        base = dict(layers=24, heads=16, width=1024, patch_size=14, image_size=224, output_dim=768,
                    distraction_dims=L14_DISTRACTION_DIMS, variant="L14")
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def layer_range(self) -> tuple[int, int]:
        return self.redistribution_layers or (1, self.layers)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("layers", "heads", "width", "patch_size", "image_size", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        # tau >= 1 is allowed: it is how distractor detection gets switched off
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        bad = [j for j in self.distraction_dims if not 0 <= j < self.width]
        if bad:
            raise ConfigError(f"distraction dims {bad} outside [0, {self.width})")
        if self.redistribution_layers is not None:
            lo, hi = self.redistribution_layers
            if not 1 <= lo <= hi <= self.layers:
                raise ConfigError(f"redistribution layer range {lo}-{hi} outside 1-{self.layers}")
        if self.attn_scale not in ("head", "width"):
            raise ConfigError(f"attn_scale must be 'head' or 'width', got {self.attn_scale!r}")
        if self.activation not in ("quick_gelu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["distraction_dims"] = list(self.distraction_dims)
        d["redistribution_layers"] = list(self.layer_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        variant = d.get("variant", "custom")
        if variant in ("B16", "L14") and "layers" not in d:
            factory = cls.b16 if variant == "B16" else cls.l14
            d.pop("variant")
            return factory(**d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    """Everything needed to segment or evaluate: model plus inference protocol."""

    model: ModelConfig
    stride: int = 112
    short_side: int = 336
    mode: str = "refocus"
    threshold_rule: str = "mean"
    similarity_source: str = "kk_cum_avg"
    final_attention: str = "kk_avg"
    budget_target: str = "defocused"
    attention_redistribution: bool = True
    embedding_redistribution: bool = True
    receptive_field: int = 3
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD
    output_dir: str = "out"
    workers: int = 1
    debug: bool = False

    def __post_init__(self):
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        self.validate()

    @property
    def window(self) -> int:
        return self.model.image_size

    @property
    def suppression(self) -> str | None:
        if self.mode.startswith("suppression:"):
            return self.mode.split(":", 1)[1]
        return None

    def validate(self) -> None:
        if self.mode not in MODES and self.suppression not in SUPPRESSION_STRATEGIES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.threshold_rule not in THRESHOLD_RULES:
            raise ConfigError(f"unknown threshold rule {self.threshold_rule!r}")
        if self.similarity_source not in SIMILARITY_SOURCES:
            raise ConfigError(f"unknown similarity source {self.similarity_source!r}")
        if self.final_attention not in FINAL_ATTENTIONS:
            raise ConfigError(f"unknown final attention {self.final_attention!r}")
        if self.budget_target not in BUDGET_TARGETS:
            raise ConfigError(f"unknown budget target {self.budget_target!r}")
        if not 1 <= self.stride <= self.window:
            raise ConfigError(f"stride {self.stride} must be in [1, window={self.window}]")
        if self.short_side < self.window:
            raise ConfigError(f"short side {self.short_side} smaller than window {self.window}")
        if self.receptive_field < 3 or self.receptive_field % 2 == 0:
            raise ConfigError("receptive_field must be an odd size >= 3")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("mean/std must be three values with std > 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def replace(self, **changes) -> "RunConfig":
        model_changes = {k: changes.pop(k) for k in list(changes) if k in _MODEL_FIELDS}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        model = d.pop("model", None)
        if model is None:
            raise ConfigError("run config needs a 'model' section")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(model=ModelConfig.from_dict(model), **d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
