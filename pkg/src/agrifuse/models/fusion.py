"""Fusion Bottleneck Encoder and the end-to-end classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from agrifuse.autodiff import ops
from agrifuse.autodiff.tensor import Tensor, as_tensor
from agrifuse.errors import ConfigError, ShapeError
from agrifuse.models.params import ParamSet
from agrifuse.models.vit import ViTConfig, ViTParams, vit_forward
from agrifuse.models.weather import EncoderConfig, EncoderStackParams, encode_stack, weather_forward

BRANCHES = ("fusion", "image_only", "weather_only")
NEGATIVE, POSITIVE = 0, 1


def fuse(O_W, O_V) -> Tensor:
    """Row-wise concatenation: O_W rows first, then O_V rows."""
    O_W, O_V = as_tensor(O_W), as_tensor(O_V)
    if O_W.shape[-2:] != (14, 14) or O_V.shape[-2:] != (14, 14) or O_W.shape != O_V.shape:
        raise ShapeError(f"fuse expects two (14, 14) embeddings, got {O_W.shape} and {O_V.shape}")
    return ops.concat([O_W, O_V], axis=-2)


FusionParams = EncoderStackParams


def fusion_forward(I_F, p: EncoderStackParams, training: bool = False, rng=None) -> Tensor:
    """[..., rows, 14] embedding -> [..., 2] logits."""
    I_F = as_tensor(I_F)
    flat = I_F.reshape(I_F.shape[:-2] + (I_F.shape[-2] * I_F.shape[-1],))
    return encode_stack(flat, p, training, rng)


def classify(logits) -> Tuple[int, float]:
    """(label, p_positive); ties go to the negative class."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    p_pos = expit(z[1] - z[0])
    return (POSITIVE if z[1] > z[0] else NEGATIVE), float(p_pos)


def classify_batch(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    diff = z[..., 1] - z[..., 0]
    return (diff > 0).astype(int), expit(diff)


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    weather: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: EncoderConfig = field(default_factory=lambda: EncoderConfig(in_features=28 * 14, out_features=2))
    branch: str = "fusion"

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ConfigError(f"unknown branch {self.branch!r}; expected one of {BRANCHES}")
        rows = 28 if self.branch == "fusion" else 14
        if self.fusion.in_features != rows * 14:
            raise ConfigError(f"branch {self.branch} needs fusion in_features={rows * 14}")
        if self.fusion.out_features != 2:
            raise ConfigError("fusion head must emit exactly 2 logits")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vit=ViTConfig(**d["vit"]),
            weather=EncoderConfig(**d["weather"]),
            fusion=EncoderConfig(**d["fusion"]),
            branch=d.get("branch", "fusion"),
        )


class FusionModel(ParamSet):
    """ViT + Weather Attention Encoder + Fusion Bottleneck, trained jointly.

    ``branch`` selects the ablated variants: with ``image_only`` or
    ``weather_only`` the other encoder does not exist and the bottleneck takes
    a (14, 14) input.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        if config.branch != "weather_only":
            self.vit = ViTParams(config.vit, rng)
        if config.branch != "image_only":
            self.weather = EncoderStackParams(config.weather, rng)
        self.fusion = EncoderStackParams(config.fusion, rng)

    def embed(self, images, weather, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        branch = self.config.branch
        if branch == "image_only":
            return vit_forward(images, self.vit)
        o_w = weather_forward(weather, self.weather, training, rng)
        if branch == "weather_only":
            return o_w
        return fuse(o_w, vit_forward(images, self.vit))

    def __call__(self, images, weather, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return fusion_forward(self.embed(images, weather, training, rng), self.fusion, training, rng)
