"""Weather Attention Encoder: daily feature vector -> (14, 14) embedding."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from agrifuse.autodiff import ops
from agrifuse.autodiff.tensor import Tensor, as_tensor
from agrifuse.errors import ConfigError, InputError, ShapeError
from agrifuse.models.params import ParamSet, xavier_uniform, zeros
from agrifuse.models.transformer import EncoderParams, encoder_block_postnorm

WEATHER_FEATURES = (
    "precip_mm",
    "rain_var",
    "rain_dur_h",
    "tmin_c",
    "tavg_c",
    "tmax_c",
    "hmin_pct",
    "havg_pct",
    "hmax_pct",
    "pot_evap_mm",
    "sun_h",
)


@dataclass
class EncoderConfig:
    """Shared shape of the weather and fusion encoders."""

    in_features: int = len(WEATHER_FEATURES)
    tokens: int = 8
    d_model: int = 64
    layers: int = 12
    heads: int = 8
    d_ff: int = 128
    dropout: float = 0.1
    out_features: int = 196

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("encoder needs at least one block")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderStackParams(ParamSet):
    """expand (dropout -> affine -> tokens) -> post-norm blocks -> dropout -> flatten -> affine."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        c = config
        width = c.tokens * c.d_model
        self.config = c
        self.expand_w = xavier_uniform(rng, (c.in_features, width), c.in_features, width)
        self.expand_b = zeros(width)
        self.blocks = [EncoderParams.init(c.d_model, c.heads, c.d_ff, rng, c.dropout) for _ in range(c.layers)]
        self.head_w = xavier_uniform(rng, (width, c.out_features), width, c.out_features)
        self.head_b = zeros(c.out_features)


WeatherEncoderParams = EncoderStackParams


def expand(x, p: EncoderStackParams, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """A = Linear(Dropout(x)) reshaped to [..., tokens, d_model]."""
    x = as_tensor(x)
    c = p.config
    if x.shape[-1] != c.in_features:
        raise ShapeError(f"expected {c.in_features} input features, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise InputError("input features contain NaN or infinite values")
    a = ops.linear(ops.dropout(x, c.dropout, training, rng), p.expand_w, p.expand_b)
    return a.reshape(x.shape[:-1] + (c.tokens, c.d_model))


def encode_stack(x, p: EncoderStackParams, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Expansion, encoder blocks, then Linear(Flatten(Dropout(.))) -> [..., out_features]."""
    a = expand(x, p, training, rng)
    for block in p.blocks:
        a = encoder_block_postnorm(a, block, training, rng)
    a = ops.dropout(a, p.config.dropout, training, rng)
    flat = a.reshape(a.shape[:-2] + (p.config.tokens * p.config.d_model,))
    return ops.linear(flat, p.head_w, p.head_b)


def weather_forward(I_W, p: EncoderStackParams, training: bool = False, rng=None) -> Tensor:
    """Weather embedding O_W, shaped [..., side, side]."""
    out = encode_stack(I_W, p, training, rng)
    side = int(round(np.sqrt(p.config.out_features)))
    if side * side != p.config.out_features:
        raise ConfigError(f"out_features={p.config.out_features} is not a square")
    return out.reshape(out.shape[:-1] + (side, side))
