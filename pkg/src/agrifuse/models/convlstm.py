"""Peephole ConvLSTM next-day image predictor.

Four blocks of ConvLSTM -> BatchNorm -> LeakyReLU run over three daily frames;
a 1x1 readout on the last hidden state predicts a correction that is added to
the most recent frame, and the result is clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from agrifuse.autodiff import ops
from agrifuse.autodiff.tensor import Tensor, as_tensor, no_grad
from agrifuse.errors import ConfigError, ContractError, ShapeError
from agrifuse.models.params import ParamSet, ones, xavier_uniform, zeros

INPUT_FRAMES = 3
GATES = ("i", "f", "c", "o")


@dataclass
class ConvLSTMConfig:
    channels: int = 3
    height: int = 32
    width: int = 32
    hidden: int = 16
    blocks: int = 4
    kernel: int = 3
    leaky_alpha: float = 0.01
    residual: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if self.blocks < 1 or self.hidden < 1:
            raise ConfigError("need at least one block and one hidden channel")

    def to_dict(self) -> dict:
        return asdict(self)


class ConvLSTMBlockParams(ParamSet):
    def __init__(self, in_ch: int, hidden: int, kernel: int, height: int, width: int, rng: np.random.Generator):
        k = kernel
        fan_x, fan_h = in_ch * k * k, hidden * k * k
        for g in GATES:
            setattr(self, f"w_d{g}", xavier_uniform(rng, (hidden, in_ch, k, k), fan_x, hidden * k * k))
            setattr(self, f"w_h{g}", xavier_uniform(rng, (hidden, hidden, k, k), fan_h, hidden * k * k))
        # peepholes act elementwise on the cell state; none for the candidate
        self.w_ci = zeros(hidden, height, width)
        self.w_cf = zeros(hidden, height, width)
        self.w_co = zeros(hidden, height, width)
        self.b_i = zeros(hidden)
        self.b_f = Tensor(np.ones(hidden), requires_grad=True)
        self.b_c = zeros(hidden)
        self.b_o = zeros(hidden)
        self.bn_gain = ones(hidden)
        self.bn_bias = zeros(hidden)
        self.bn = ops.BatchNormState(hidden)

    @property
    def hidden(self) -> int:
        return self.b_i.shape[0]


class ConvLSTMParams(ParamSet):
    def __init__(self, config: ConvLSTMConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.blocks = []
        in_ch = c.channels
        for _ in range(c.blocks):
            self.blocks.append(ConvLSTMBlockParams(in_ch, c.hidden, c.kernel, c.height, c.width, rng))
            in_ch = c.hidden
        self.out_w = zeros(c.channels, c.hidden, 1, 1)
        self.out_b = zeros(c.channels)


def _cell(D_t, h_prev, C_prev, p: ConvLSTMBlockParams):
    D_t = as_tensor(D_t)
    ch = p.hidden
    w_d = ops.concat([getattr(p, f"w_d{g}") for g in GATES], axis=0)
    bias = ops.concat([p.b_i, p.b_f, p.b_c, p.b_o], axis=0)
    z = ops.conv2d(D_t, w_d, bias)
    if h_prev is not None:
        h_prev = as_tensor(h_prev)
        if h_prev.shape[-3] != ch:
            raise ShapeError(f"hidden state {h_prev.shape} does not have {ch} channels")
        w_h = ops.concat([getattr(p, f"w_h{g}") for g in GATES], axis=0)
        z = z + ops.conv2d(h_prev, w_h)
    if z.shape[-3:] != (4 * ch,) + p.w_ci.shape[1:]:
        raise ShapeError(f"frame {D_t.shape} does not match peephole shape {p.w_ci.shape}")

    zi, zf, zc, zo = (z[..., k * ch : (k + 1) * ch, :, :] for k in range(4))
    if C_prev is None:
        # zero state: the forget path and the input peephole vanish
        i = ops.sigmoid(zi)
        f = None
        c_t = i * ops.tanh(zc)
    else:
        C_prev = as_tensor(C_prev)
        i = ops.sigmoid(zi + p.w_ci * C_prev)
        f = ops.sigmoid(zf + p.w_cf * C_prev)
        c_t = f * C_prev + i * ops.tanh(zc)
    o = ops.sigmoid(zo + p.w_co * c_t)
    return o * ops.tanh(c_t), c_t, (i, f, o)


def cell_step(D_t, h_prev, C_prev, p: ConvLSTMBlockParams) -> Tuple[Tensor, Tensor]:
    """One peephole ConvLSTM update; returns (h_t, C_t).

    ``h_prev``/``C_prev`` may be ``None`` for a zero initial state.
    """
    h, c_t, _ = _cell(D_t, h_prev, C_prev, p)
    return h, c_t


def gates(D_t, h_prev, C_prev, p: ConvLSTMBlockParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gate activations (i, f, o) of one step, for inspection."""
    _, _, (i, f, o) = _cell(D_t, h_prev, C_prev, p)
    return i.data, (None if f is None else f.data), o.data


def _as_frames(inputs) -> List[Tensor]:
    if isinstance(inputs, (list, tuple)):
        frames = [as_tensor(f) for f in inputs]
    else:
        x = as_tensor(inputs)
        if x.ndim != 5:
            raise ShapeError(f"expected frames shaped [B, T, C, H, W], got {x.shape}")
        frames = [x[:, t] for t in range(x.shape[1])]
    if len(frames) != INPUT_FRAMES:
        raise ContractError(f"ConvLSTM takes exactly {INPUT_FRAMES} ordered frames, got {len(frames)}")
    return frames


def convlstm_forward(inputs, p: ConvLSTMParams, training: bool = False) -> Tensor:
    """Predict D_n from [D_{n-3}, D_{n-2}, D_{n-1}].

    ``inputs`` is a sequence of three [C,H,W] (or [B,C,H,W]) frames, or one
    [B,3,C,H,W] tensor.
    """
    frames = _as_frames(inputs)
    c = p.config
    if frames[-1].shape[-3:] != (c.channels, c.height, c.width):
        raise ShapeError(f"frames {frames[-1].shape} do not match model geometry {(c.channels, c.height, c.width)}")
    seq = frames
    for block in p.blocks:
        h = cell = None
        hidden = []
        for x_t in seq:
            h, cell = cell_step(x_t, h, cell, block)
            hidden.append(h)
        # normalise all timesteps with shared per-channel statistics
        stacked = ops.stack(hidden, axis=0)
        t_lead = stacked.shape[:-3]
        flat = stacked.reshape((-1,) + stacked.shape[-3:])
        normed = ops.leaky_relu(ops.batch_norm2d(flat, block.bn, block.bn_gain, block.bn_bias, training), c.leaky_alpha)
        normed = normed.reshape(t_lead + stacked.shape[-3:])
        seq = [normed[t] for t in range(len(hidden))]
    out = ops.conv2d(seq[-1], p.out_w, p.out_b)
    if c.residual:
        out = out + frames[-1]
    return ops.clamp(out, 0.0, 1.0)


def predict_next(frames: Sequence[np.ndarray], p: ConvLSTMParams) -> np.ndarray:
    """Eval-mode prediction from three [C,H,W] arrays."""
    with no_grad():
        return convlstm_forward([Tensor(f) for f in frames], p, training=False).data
