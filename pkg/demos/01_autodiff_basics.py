#!/usr/bin/env python3
"""Tour of the tensor core: building blocks, broadcasting, and checking the
reverse-mode gradients against central finite differences.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from moganet.gradcheck import check
from moganet.tensor import (Tensor, backward, batchnorm2d, conv2d, gap_spatial,
                            gelu, softmax_xent, tsum)

rng = np.random.default_rng(0)

# Tensors wrap numpy arrays; requires_grad marks trainable leaves.
x = Tensor(rng.uniform(-1, 1, (1, 8, 6, 6)), dtype="f64", requires_grad=True)
w = Tensor(rng.uniform(-1, 1, (8, 1, 5, 5)), dtype="f64", requires_grad=True)

# A dilated depthwise convolution with "same" padding: spatial size sticks.
y = conv2d(x, w, stride=1, dilation=2, padding=4, groups=8)
print("depthwise 5x5 d=2:", x.shape, "->", y.shape)

# Composing ops records a tape; backward() fills .grad on every leaf.
loss = tsum(gelu(y))
backward(loss)
print("loss", float(loss.data), "| grad shapes", x.grad.shape, w.grad.shape)

# The same gradients, validated against central finite differences.
x.grad = w.grad = None
err = check(lambda: tsum(gelu(conv2d(x, w, dilation=2, padding=4, groups=8))),
            [x, w])
print(f"max scaled relative error vs finite differences: {err:.2e}")

# Broadcasting stretches singleton extents; gradients reduce back.
a = Tensor(rng.uniform(-1, 1, (2, 4, 3, 3)), dtype="f64", requires_grad=True)
b = Tensor(rng.uniform(-1, 1, (2, 1, 3, 3)), dtype="f64", requires_grad=True)
backward(tsum(a * b))
print("broadcast grad shapes:", a.grad.shape, b.grad.shape)

# Batch normalization keeps running statistics for eval mode.
g = Tensor(np.ones(4), dtype="f64", requires_grad=True)
beta = Tensor(np.zeros(4), dtype="f64", requires_grad=True)
run_m, run_v = np.zeros(4), np.ones(4)
h = Tensor(rng.normal(2.0, 3.0, (8, 4, 5, 5)), dtype="f64")
out = batchnorm2d(h, g, beta, run_m, run_v, training=True)
print("bn train-mode output mean ~0:", out.data.mean(axis=(0, 2, 3)).round(7))
print("running mean after one step:", run_m.round(4))

# Global average pooling and the label-smoothed loss used by the trainer.
pooled = gap_spatial(out)
logits = Tensor(rng.uniform(-1, 1, (4, 10)), dtype="f64", requires_grad=True)
loss = softmax_xent(logits, np.array([1, 0, 7, 3]), smoothing=0.1)
print("label-smoothed loss:", float(loss.data))
