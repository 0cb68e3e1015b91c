"""Scaled dot-product attention and the two encoder-block variants.

``encoder_block_prenorm`` is the ViT block (norm before each sublayer);
``encoder_block_postnorm`` is the block used by the weather and fusion
encoders (norm after each residual sum, dropout on the sublayer output).
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from agrifuse.autodiff import ops
from agrifuse.autodiff.tensor import Tensor
from agrifuse.errors import ConfigError, ShapeError
from agrifuse.models.params import ParamSet, ones, xavier_uniform, zeros


class MultiHeadParams(ParamSet):
    """Per-head projections stacked on a leading head axis.

    ``w_q[i]``, ``w_k[i]``, ``w_v[i]`` are the (d_model, d_head) projections of
    head ``i``; ``w_o`` maps the concatenated heads back to d_model.
    """

    def __init__(self, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor):
        heads, d_model, d_head = w_q.shape
        if w_k.shape != w_q.shape or w_v.shape != w_q.shape:
            raise ShapeError("query/key/value projections must share a shape")
        if w_o.shape != (heads * d_head, d_model):
            raise ShapeError(f"output projection {w_o.shape} != {(heads * d_head, d_model)}")
        self.w_q, self.w_k, self.w_v, self.w_o = w_q, w_k, w_v, w_o

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, d_model: int, heads: int, rng: np.random.Generator) -> "MultiHeadParams":
        if heads < 1 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible into {heads} heads")
        d_head = d_model // heads
        shape = (heads, d_model, d_head)
        return cls(
            xavier_uniform(rng, shape, d_model, d_model),
            xavier_uniform(rng, shape, d_model, d_model),
            xavier_uniform(rng, shape, d_model, d_model),
            xavier_uniform(rng, (d_model, d_model), d_model, d_model),
        )


class EncoderParams(ParamSet):
    def __init__(
        self,
        attn: MultiHeadParams,
        ffn_w1: Tensor,
        ffn_b1: Tensor,
        ffn_w2: Tensor,
        ffn_b2: Tensor,
        ln1_gain: Tensor,
        ln1_bias: Tensor,
        ln2_gain: Tensor,
        ln2_bias: Tensor,
        dropout: float = 0.1,
    ):
        if ffn_w1.shape[1] < 1:
            raise ConfigError("FFN inner width must be positive")
        self.attn = attn
        self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2 = ffn_w1, ffn_b1, ffn_w2, ffn_b2
        self.ln1_gain, self.ln1_bias = ln1_gain, ln1_bias
        self.ln2_gain, self.ln2_bias = ln2_gain, ln2_bias
        self.dropout = dropout

    @classmethod
    def init(cls, d_model: int, heads: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.1):
        if d_ff < 1:
            raise ConfigError(f"FFN inner width must be positive, got {d_ff}")
        return cls(
            MultiHeadParams.init(d_model, heads, rng),
            xavier_uniform(rng, (d_model, d_ff), d_model, d_ff),
            zeros(d_ff),
            xavier_uniform(rng, (d_ff, d_model), d_ff, d_model),
            zeros(d_model),
            ones(d_model),
            zeros(d_model),
            ones(d_model),
            zeros(d_model),
            dropout=dropout,
        )


def scaled_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention: query width {Q.shape} and key width {K.shape} differ")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = ops.matmul(Q, K.swapaxes(-1, -2)) * (1.0 / np.sqrt(Q.shape[-1]))
    weights = ops.softmax(scores, axis=-1)
    out = ops.matmul(weights, V)
    return (out, weights) if return_weights else out


def multi_head(x: Tensor, p: MultiHeadParams, return_weights: bool = False):
    """Self-attention over rows of ``x`` ([n, d_model] or [B, n, d_model])."""
    if x.shape[-1] != p.d_model:
        raise ShapeError(f"multi_head: input width {x.shape[-1]} != d_model {p.d_model}")
    xh = x.reshape(x.shape[:-2] + (1,) + x.shape[-2:])  # broadcast against the head axis
    q = ops.matmul(xh, p.w_q)
    k = ops.matmul(xh, p.w_k)
    v = ops.matmul(xh, p.w_v)
    heads, weights = scaled_attention(q, k, v, return_weights=True)  # [..., h, n, d_head]
    n = x.shape[-2]
    lead = heads.shape[:-3]
    concat = heads.swapaxes(-3, -2).reshape(lead + (n, p.heads * heads.shape[-1]))
    out = ops.matmul(concat, p.w_o)
    return (out, weights) if return_weights else out


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Row-wise affine -> GELU -> affine."""
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"ffn: widths {x.shape[-1]}, {w1.shape}, {w2.shape} do not chain")
    return ops.linear(ops.gelu(ops.linear(x, w1, b1)), w2, b2)


def _ffn(x: Tensor, p: EncoderParams) -> Tensor:
    return ffn(x, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)


def encoder_block_postnorm(
    x: Tensor, p: EncoderParams, training: bool = False, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """H = LN(x + Dropout(MHA(x))); out = LN(H + Dropout(FFN(H)))."""
    attn = ops.dropout(multi_head(x, p.attn), p.dropout, training, rng)
    h = ops.layer_norm(x + attn, p.ln1_gain, p.ln1_bias)
    f = ops.dropout(_ffn(h, p), p.dropout, training, rng)
    return ops.layer_norm(h + f, p.ln2_gain, p.ln2_bias)


def encoder_block_prenorm(
    z: Tensor, p: EncoderParams, attention_sink: Optional[List[np.ndarray]] = None
) -> Tensor:
    """z' = MHA(LN(z)) + z; out = FFN(LN(z')) + z'.

    No dropout, so the block behaves the same in training and eval. When
    ``attention_sink`` is a list, the attention weights ([..., heads, n, n])
    are appended to it.
    """
    attn, weights = multi_head(ops.layer_norm(z, p.ln1_gain, p.ln1_bias), p.attn, return_weights=True)
    if attention_sink is not None:
        attention_sink.append(weights.data)
    z1 = attn + z
    return _ffn(ops.layer_norm(z1, p.ln2_gain, p.ln2_bias), p) + z1
