"""MogaNet building blocks.

Spatial aggregation (SA) block:
    out = x + Moga(FD(Norm(x)))
where FD re-weights the complementary component Y - GAP(Y) with a
zero-initialized per-channel scale, and Moga gates a multi-order
dilated-depthwise context branch with a SiLU-activated pointwise branch.

Channel aggregation (CA) block:
    out = x + Conv1x1_project(CA(GELU(DW3x3(Conv1x1_expand(Norm(x))))))
with CA(y) = y + gamma_c * (y - GELU(Wr y)), Wr reducing channels to one.

All learned scale vectors (gamma_s, gamma_c) start at zero, so a fresh SA
block reduces to x + Moga(GELU(conv(norm(x)))) and a fresh CA module is the
identity, bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, batchnorm2d, channel_concat, channel_split,
                     conv2d, gap_spatial, gelu, mul, reshape, silu)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until all draws lie within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def _param(rng, shape, dtype):
    return Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def split_channels(c: int) -> tuple[int, int, int]:
    """1:3:4 channel split in eighths, remainder assigned to the high-order
    branch: (floor(C/8), floor(3C/8), rest)."""
    cl = c // 8
    cm = (3 * c) // 8
    return cl, cm, c - cl - cm


def _per_channel(v: Tensor, c: int) -> Tensor:
    # [C] -> [1,C,1,1] so the scale broadcasts over batch and space
    return reshape(v, (1, c, 1, 1))


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, c: int, dtype=np.float32) -> "BatchNormParams":
        return cls(gamma=_ones((c,), dtype), beta=_zeros((c,), dtype),
                   running_mean=np.zeros(c, dtype=dtype),
                   running_var=np.ones(c, dtype=dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training, self.momentum, self.eps)


@dataclass
class FDParams:
    """Feature decomposition: 1x1 projection plus zero-init re-weighting."""
    proj_w: Tensor
    proj_b: Tensor
    gamma_s: Tensor

    @classmethod
    def init(cls, rng, c: int, dtype=np.float32) -> "FDParams":
        return cls(proj_w=_param(rng, (c, c, 1, 1), dtype),
                   proj_b=_zeros((c,), dtype),
                   gamma_s=_zeros((c,), dtype))


def fd_forward(p: FDParams, x: Tensor) -> Tensor:
    c = p.proj_w.shape[0]
    if x.shape[1] != c:
        raise ShapeError(f"fd_forward expects {c} channels, got {x.shape[1]}")
    y = conv2d(x, p.proj_w, p.proj_b)
    comp = y - gap_spatial(y)
    return gelu(y + mul(_per_channel(p.gamma_s, c), comp))


@dataclass
class MultiOrderDWParams:
    """Three parallel depthwise convolutions: 5x5 d=1 over all channels,
    5x5 d=2 over the middle slice, 7x7 d=3 over the high slice."""
    dw5_d1: Tensor
    dw5_d2: Tensor
    dw7_d3: Tensor
    split: tuple[int, int, int]

    @classmethod
    def init(cls, rng, c: int, dtype=np.float32) -> "MultiOrderDWParams":
        cl, cm, ch = split_channels(c)
        return cls(dw5_d1=_param(rng, (c, 1, 5, 5), dtype),
                   dw5_d2=_param(rng, (cm, 1, 5, 5), dtype),
                   dw7_d3=_param(rng, (ch, 1, 7, 7), dtype),
                   split=(cl, cm, ch))


def multi_order_dw(p: MultiOrderDWParams, x: Tensor) -> Tensor:
    cl, cm, ch = p.split
    c = cl + cm + ch
    if x.shape[1] != c:
        raise ShapeError(f"multi_order_dw expects {c} channels, got {x.shape[1]}")
    t = conv2d(x, p.dw5_d1, stride=1, dilation=1, padding=2, groups=c)
    tl, tm, th = channel_split(t, (cl, cm, ch))
    parts = [tl]
    if cm:
        parts.append(conv2d(tm, p.dw5_d2, dilation=2, padding=4, groups=cm))
    else:
        parts.append(tm)
    if ch:
        parts.append(conv2d(th, p.dw7_d3, dilation=3, padding=9, groups=ch))
    else:
        parts.append(th)
    return channel_concat(parts)


@dataclass
class MogaParams:
    gate_w: Tensor
    gate_b: Tensor
    ctx_w: Tensor
    ctx_b: Tensor
    out_w: Tensor
    out_b: Tensor
    dw: MultiOrderDWParams

    @classmethod
    def init(cls, rng, c: int, dtype=np.float32) -> "MogaParams":
        return cls(gate_w=_param(rng, (c, c, 1, 1), dtype), gate_b=_zeros((c,), dtype),
                   ctx_w=_param(rng, (c, c, 1, 1), dtype), ctx_b=_zeros((c,), dtype),
                   out_w=_param(rng, (c, c, 1, 1), dtype), out_b=_zeros((c,), dtype),
                   dw=MultiOrderDWParams.init(rng, c, dtype))


def moga_forward(p: MogaParams, x: Tensor) -> Tensor:
    if x.shape[1] != p.gate_w.shape[0]:
        raise ShapeError(f"moga_forward expects {p.gate_w.shape[0]} channels, got {x.shape[1]}")
    g = silu(conv2d(x, p.gate_w, p.gate_b))
    c = silu(conv2d(multi_order_dw(p.dw, x), p.ctx_w, p.ctx_b))
    return conv2d(mul(g, c), p.out_w, p.out_b)


@dataclass
class SABlockParams:
    norm: BatchNormParams
    fd: FDParams
    moga: MogaParams

    @classmethod
    def init(cls, rng, c: int, dtype=np.float32) -> "SABlockParams":
        return cls(norm=BatchNormParams.init(c, dtype),
                   fd=FDParams.init(rng, c, dtype),
                   moga=MogaParams.init(rng, c, dtype))


def sa_block(p: SABlockParams, x: Tensor, training: bool) -> Tensor:
    return x + moga_forward(p.moga, fd_forward(p.fd, p.norm(x, training)))


def ca_module(wr_w: Tensor, wr_b: Tensor, gamma_c: Tensor, x: Tensor) -> Tensor:
    """Channel reallocation: x + gamma_c * (x - GELU(Wr x)) with Wr a 1x1
    conv reducing all channels to one, broadcast back across channels."""
    c = x.shape[1]
    if wr_w.shape[1] != c:
        raise ShapeError(f"ca_module projection expects {wr_w.shape[1]} channels, got {c}")
    squeezed = gelu(conv2d(x, wr_w, wr_b))
    return x + mul(_per_channel(gamma_c, c), x - squeezed)


@dataclass
class CABlockParams:
    norm: BatchNormParams
    expand_w: Tensor
    expand_b: Tensor
    dw3: Tensor
    wr_w: Tensor
    wr_b: Tensor
    gamma_c: Tensor
    project_w: Tensor
    project_b: Tensor
    ratio: int

    @classmethod
    def init(cls, rng, c: int, ratio: int, dtype=np.float32) -> "CABlockParams":
        hidden = ratio * c
        return cls(norm=BatchNormParams.init(c, dtype),
                   expand_w=_param(rng, (hidden, c, 1, 1), dtype),
                   expand_b=_zeros((hidden,), dtype),
                   dw3=_param(rng, (hidden, 1, 3, 3), dtype),
                   wr_w=_param(rng, (1, hidden, 1, 1), dtype),
                   wr_b=_zeros((1,), dtype),
                   gamma_c=_zeros((hidden,), dtype),
                   project_w=_param(rng, (c, hidden, 1, 1), dtype),
                   project_b=_zeros((c,), dtype),
                   ratio=ratio)


def ca_block(p: CABlockParams, x: Tensor, training: bool) -> Tensor:
    hidden = p.expand_w.shape[0]
    y = conv2d(p.norm(x, training), p.expand_w, p.expand_b)
    y = gelu(conv2d(y, p.dw3, padding=1, groups=hidden))
    y = ca_module(p.wr_w, p.wr_b, p.gamma_c, y)
    return conv2d(y, p.project_w, p.project_b) + x


@dataclass
class StemParams:
    """Downsampling stem: two stride-2 3x3 conv+BN pairs for stage 1
    (3 -> C/2 -> C), a single pair for later stages."""
    convs: list = field(default_factory=list)  # [(w, b, BatchNormParams), ...]

    @classmethod
    def init_stage1(cls, rng, c_out: int, dtype=np.float32) -> "StemParams":
        mid = c_out // 2
        return cls(convs=[
            (_param(rng, (mid, 3, 3, 3), dtype), _zeros((mid,), dtype), BatchNormParams.init(mid, dtype)),
            (_param(rng, (c_out, mid, 3, 3), dtype), _zeros((c_out,), dtype), BatchNormParams.init(c_out, dtype)),
        ])

    @classmethod
    def init_later(cls, rng, c_in: int, c_out: int, dtype=np.float32) -> "StemParams":
        return cls(convs=[
            (_param(rng, (c_out, c_in, 3, 3), dtype), _zeros((c_out,), dtype), BatchNormParams.init(c_out, dtype)),
        ])


def stem_forward(p: StemParams, x: Tensor, training: bool) -> Tensor:
    for w, b, norm in p.convs:
        if min(x.shape[2], x.shape[3]) < 2:
            raise ShapeError(f"stem input {x.shape[2]}x{x.shape[3]} too small to halve")
        x = norm(conv2d(x, w, b, stride=2, padding=1), training)
    return x
