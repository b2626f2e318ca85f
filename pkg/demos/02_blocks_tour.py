#!/usr/bin/env python3
"""What each network block computes, shown through its special cases.

The two learned scale vectors (gamma_s in feature decomposition, gamma_c in
channel aggregation) start at zero, which makes freshly built blocks collapse
to simple closed forms; training then opens the re-weighting paths.

Run:  python demos/02_blocks_tour.py
"""

import numpy as np

from moganet.blocks import (CABlockParams, FDParams, MogaParams, SABlockParams,
                            ca_module, fd_forward, moga_forward,
                            multi_order_dw, sa_block, split_channels)
from moganet.tensor import Tensor, conv2d, gelu

rng = np.random.default_rng(0)
F64 = np.float64

x = Tensor(rng.uniform(-1, 1, (1, 8, 6, 6)), dtype="f64")

# --- feature decomposition -------------------------------------------------
# FD(x) = GELU(Y + gamma_s * (Y - GAP(Y))), Y = conv1x1(x).
fd = FDParams.init(rng, 8, F64)
fresh = fd_forward(fd, x)
plain = gelu(conv2d(x, fd.proj_w, fd.proj_b))
print("fresh FD == GELU(conv1x1) bitwise:", np.array_equal(fresh.data, plain.data))

fd.gamma_s.data[:] = 0.5
print("nonzero gamma_s changes the output:",
      not np.array_equal(fd_forward(fd, x).data, plain.data))

# --- multi-order depthwise context ------------------------------------------
# One 5x5 over all channels, then the channel split 1:3:4 feeds a dilated
# 5x5 (d=2) and a dilated 7x7 (d=3); the parts concatenate back.
print("channel split for C=8:", split_channels(8))
print("channel split for C=64:", split_channels(64))

mo = MogaParams.init(rng, 8, F64)
ctx = multi_order_dw(mo.dw, x)
print("multi-order context preserves shape:", ctx.shape == x.shape)

# --- gated aggregation -------------------------------------------------------
# Moga(x) = conv1x1_out( SiLU(conv1x1(x)) * SiLU(conv1x1(context(x))) ).
# Forcing the gate to zero closes the block down to its output bias.
mo.gate_w.data[:] = 0.0
mo.gate_b.data[:] = 0.0
mo.out_b.data[:] = rng.uniform(-1, 1, 8)
closed = moga_forward(mo, x)
print("closed gate leaves only the output bias:",
      np.allclose(closed.data, mo.out_b.data[None, :, None, None]))

# --- spatial aggregation block ----------------------------------------------
sa = SABlockParams.init(rng, 8, F64)
y = sa_block(sa, x, training=False)
print("SA block is residual, shape preserved:", y.shape == x.shape)

# --- channel aggregation -----------------------------------------------------
# CA(v) = v + gamma_c * (v - GELU(Wr v)) with Wr: C -> 1. Zero gamma_c is the
# exact identity, so a fresh CA block starts as a plain inverted bottleneck.
ca = CABlockParams.init(rng, 8, 4, F64)
v = Tensor(rng.uniform(-1, 1, (1, 32, 6, 6)), dtype="f64")
print("fresh CA module is the identity bitwise:",
      np.array_equal(ca_module(ca.wr_w, ca.wr_b, ca.gamma_c, v).data, v.data))
print("CA hidden width = ratio * C =", ca.expand_w.shape[0])
