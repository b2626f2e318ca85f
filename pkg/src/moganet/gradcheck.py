"""Central finite-difference gradient checking.

The metric is the scaled relative error max |a - b| / max(|a|, |b|, 1),
which behaves as a relative error for gradients of magnitude >= 1 and as an
absolute error below that (where the h=1e-6 difference quotient itself only
carries ~1e-10 of absolute accuracy in f64).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(f, t: Tensor, h: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of the scalar function ``f()`` w.r.t. ``t.data``.

    ``f`` must read ``t.data`` afresh on every call.  ``coords`` optionally
    restricts the check to a subset of flat indices; unchecked entries are
    returned as NaN so callers can mask them.
    """
    flat = t.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        g = np.empty(flat.size, dtype=np.float64)
    else:
        g = np.full(flat.size, np.nan)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(t.data.shape)


def check(f, wrt, h: float = 1e-6, coords_per_tensor=None, rng=None) -> float:
    """Compare reverse-mode gradients of the scalar-producing ``f`` against
    central differences for every tensor in ``wrt``.

    ``f`` is called with no arguments and must rebuild the graph each time
    (it reads the current ``.data`` of the checked tensors).  When
    ``coords_per_tensor`` is set, at most that many coordinates per tensor
    are probed, drawn deterministically from ``rng``.  Returns the worst
    scaled relative error across all checked coordinates.
    """
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for t in wrt:
        assert t.grad is not None, "checked tensor received no gradient"
        coords = None
        if coords_per_tensor is not None and t.data.size > coords_per_tensor:
            assert rng is not None
            coords = rng.choice(t.data.size, size=coords_per_tensor, replace=False)

        def eval_loss():
            with no_grad():
                return float(f().data)

        fd = numeric_grad(eval_loss, t, h=h, coords=coords)
        mask = ~np.isnan(fd.reshape(-1))
        err = max_rel_err(np.asarray(t.grad).reshape(-1)[mask], fd.reshape(-1)[mask])
        worst = max(worst, err)
    return worst
