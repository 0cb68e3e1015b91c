"""Vision Transformer over the stacked vegetation-index image."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from agrifuse.autodiff import ops
from agrifuse.autodiff.tensor import Tensor, as_tensor
from agrifuse.errors import ConfigError, ShapeError
from agrifuse.models.params import Buffer, ParamSet, ones, xavier_uniform, zeros
from agrifuse.models.transformer import EncoderParams, encoder_block_prenorm


@dataclass
class ViTConfig:
    image_size: int = 224
    patch: int = 16
    channels: int = 9
    dim: int = 768
    layers: int = 12
    heads: int = 8
    d_ff: int = 3072
    out_side: int = 14

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} is not a multiple of patch {self.patch}")
        if self.layers < 1:
            raise ConfigError("ViT needs at least one encoder block")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)


class ViTParams(ParamSet):
    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        c = config
        patch_dim = c.patch * c.patch * c.channels
        self.config = c
        self.patch_proj = xavier_uniform(rng, (patch_dim, c.dim), patch_dim, c.dim)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(c.num_patches + 1, c.dim)), requires_grad=True)
        self.cls_token = zeros(c.dim)
        self.blocks = [EncoderParams.init(c.dim, c.heads, c.d_ff, rng, dropout=0.0) for _ in range(c.layers)]
        self.ln_gain = ones(c.dim)
        self.ln_bias = zeros(c.dim)
        out = c.out_side * c.out_side
        self.head_w = xavier_uniform(rng, (c.dim, out), c.dim, out)
        self.head_b = zeros(out)
        # input standardization, identity until set_input_stats is called
        self.pixel_mean = Buffer(np.zeros((c.channels, c.image_size, c.image_size)))
        self.pixel_scale = Buffer(np.ones(1))

    def set_input_stats(self, images: np.ndarray) -> None:
        """Centre on the per-pixel mean of ``images`` and divide by the std left after centring."""
        n = len(images)
        if n == 0:
            raise ShapeError("input statistics need at least one image")
        _check_image(Tensor(np.asarray(images[:1], dtype=np.float64)), self.config)
        chunks = range(0, n, 256)  # float64 copies of the full stack would be large
        mean = sum(np.asarray(images[i : i + 256], dtype=np.float64).sum(axis=0) for i in chunks) / n
        sq = sum(float(((np.asarray(images[i : i + 256], dtype=np.float64) - mean) ** 2).sum()) for i in chunks)
        scale = float(np.sqrt(sq / (n * mean.size)))
        self.pixel_mean = Buffer(mean)
        self.pixel_scale = Buffer([scale if scale > 1e-12 else 1.0])


def _check_image(image: Tensor, c: ViTConfig) -> None:
    expected = (c.channels, c.image_size, c.image_size)
    if image.ndim not in (3, 4) or image.shape[-3:] != expected:
        raise ShapeError(f"ViT expects images shaped {expected} (optionally batched), got {image.shape}")


def patchify(image: Tensor, patch: int) -> Tensor:
    """[..., C, H, W] -> [..., N, P*P*C]; patches scanned row-major, each flattened as (row, col, channel)."""
    *lead, ch, h, w = image.shape
    gh, gw = h // patch, w // patch
    lead = tuple(lead)
    x = image.reshape(lead + (ch, gh, patch, gw, patch))
    k = len(lead)
    x = x.transpose(tuple(range(k)) + (k + 1, k + 3, k + 2, k + 4, k))
    return x.reshape(lead + (gh * gw, patch * patch * ch))


def patchify_embed(image, p: ViTParams) -> Tensor:
    """Token sequence z_0 = [cls; patches @ E] + E_pos, shaped [..., N+1, D]."""
    image = as_tensor(image)
    _check_image(image, p.config)
    image = (image - p.pixel_mean.value) / p.pixel_scale.value
    tokens = ops.matmul(patchify(image, p.config.patch), p.patch_proj)
    lead = tokens.shape[:-2]
    cls = p.cls_token.reshape(1, p.config.dim)
    if lead:
        cls = cls + np.zeros(lead + (1, p.config.dim))
    return ops.concat([cls, tokens], axis=-2) + p.pos


def encode(image, p: ViTParams, attention_sink: Optional[List[np.ndarray]] = None) -> Tensor:
    """Class-token representation y = LN(z_L[0]), shaped [..., D]."""
    z = patchify_embed(image, p)
    last = len(p.blocks) - 1
    for i, block in enumerate(p.blocks):
        z = encoder_block_prenorm(z, block, attention_sink if i == last else None)
    return ops.layer_norm(z[..., 0, :], p.ln_gain, p.ln_bias)


def vit_forward(image, p: ViTParams) -> Tensor:
    """Visual embedding O_V, shaped [..., out_side, out_side]."""
    y = encode(image, p)
    side = p.config.out_side
    return ops.linear(y, p.head_w, p.head_b).reshape(y.shape[:-1] + (side, side))


def attention_map(image, p: ViTParams) -> np.ndarray:
    """Head-averaged class-token attention over patches in the final block.

    The class-to-class entry is dropped and the remainder renormalised, so the
    returned [..., grid, grid] map is a distribution over patches.
    """
    sink: List[np.ndarray] = []
    encode(image, p, attention_sink=sink)
    weights = sink[0]  # [..., heads, N+1, N+1]
    cls_row = weights[..., 0, 1:].mean(axis=-2)
    cls_row = cls_row / cls_row.sum(axis=-1, keepdims=True)
    g = p.config.grid
    return cls_row.reshape(cls_row.shape[:-1] + (g, g))
