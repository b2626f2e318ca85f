"""Dense tensors (rank <= 4, NCHW for features) with reverse-mode autodiff.

Every primitive the network blocks need lives here: convolution, global
average pooling, batch normalization, activations, broadcasting elementwise
arithmetic, channel split/concat, the linear head and the label-smoothed
softmax cross-entropy loss.

Forward ops record tape nodes onto the produced tensor; ``backward(loss)``
replays the recorded graph in reverse topological order exactly once and
accumulates gradients into every ``requires_grad`` tensor it reaches.

Convolution is a direct cross-correlation with a fixed accumulation order
(input channel outer, then kernel rows, then kernel columns).  Keeping the
floating-point association identical to the obvious nested-loop formulation
lets tests compare against a scalar reference bitwise instead of within a
sloppy tolerance.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import AutodiffError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape recording (eval-mode forwards)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class TapeNode:
    """One recorded primitive application.

    ``parents`` are the operand tensors, ``backward_fn`` maps the output
    gradient to per-parent gradients (``None`` for parents that do not
    require grad), ``op`` identifies the backward rule.
    """

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tape:
    """The reverse-topological node list reachable from one root tensor.

    Construction order guarantees every node's operands precede it; one
    backward pass visits each node exactly once, in reverse order.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: "Tensor") -> "Tape":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None or id(t) in visited:
                if not expanded:
                    continue
            if expanded:
                order.append(t)
                continue
            visited.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                if p.node is not None and id(p) not in visited:
                    stack.append((p, False))
        return cls(order)


class Tensor:
    """Dense row-major array with an optional gradient slot and tape link."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, dtype=None, requires_grad=False):
        if dtype is not None:
            arr = np.asarray(data, dtype=DTYPES[dtype] if isinstance(dtype, str) else dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {tuple(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result(data, op, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Populate gradients of every ``requires_grad`` tensor reachable from
    ``loss``.  The root must be a scalar attached to a tape; rerunning on the
    same root without rebuilding the graph is an error."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward root must be scalar, got shape {tuple(loss.shape)}")
    if loss.node is None:
        raise AutodiffError("backward root is detached from the tape")
    if loss.node.consumed:
        raise AutodiffError("backward already ran on this root; rebuild the graph or reset")
    loss.node.consumed = True

    tape = Tape.from_root(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        _accumulate(loss, flowing[id(loss)])
    for t in reversed(tape.nodes):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                _accumulate(p, pg)
            else:
                prev = flowing.get(id(p))
                flowing[id(p)] = pg if prev is None else prev + pg


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce-sum a broadcast gradient back to the operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic with broadcasting
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    for i, (x, y) in enumerate(zip(a.shape[::-1], b.shape[::-1])):
        if x != y and x != 1 and y != 1:
            raise ShapeError(
                f"incompatible extents {x} vs {y} at axis {max(a.ndim, b.ndim) - 1 - i}"
            )


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """add/sub/mul with singleton-stretching broadcast; gradients reduce-sum
    over the stretched dims."""
    _check_broadcast(a, b)
    if kind == "add":
        data = a.data + b.data
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif kind == "sub":
        data = a.data - b.data
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    elif kind == "mul":
        data = a.data * b.data
        ad, bd = a.data, b.data
        def bwd(g):
            return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _result(data, kind, (a, b), bwd)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {tuple(x.shape)} to {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor (test/loss plumbing)."""
    shape, dt = x.shape, x.data.dtype
    return _result(np.asarray(x.data.sum(), dtype=dt), "sum", (x,),
                   lambda g: (np.broadcast_to(np.asarray(g, dtype=dt), shape),))


def tmean(x: Tensor) -> Tensor:
    n, shape, dt = x.data.size, x.shape, x.data.dtype
    return _result(np.asarray(x.data.mean(), dtype=dt), "mean", (x,),
                   lambda g: (np.broadcast_to(np.asarray(g, dtype=dt) / n, shape),))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) form avoids overflow for large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def _gelu_deriv(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def _silu(x):
    return x * _sigmoid(x)


def _silu_deriv(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _sigmoid_deriv(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


_ACT_FUNCS = {"gelu": _gelu, "silu": _silu, "sigmoid": _sigmoid}
# backward looks derivatives up at call time so tests can inject faults
_ACT_DERIVS = {"gelu": _gelu_deriv, "silu": _silu_deriv, "sigmoid": _sigmoid_deriv}


def act(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation. GELU is the tanh approximation
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))); SiLU is x*sigmoid(x)."""
    if kind not in _ACT_FUNCS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACT_FUNCS)}")
    xd = x.data
    data = _ACT_FUNCS[kind](xd).astype(xd.dtype)
    return _result(data, kind, (x,), lambda g: (g * _ACT_DERIVS[kind](xd).astype(xd.dtype),))


def gelu(x):
    return act(x, "gelu")


def silu(x):
    return act(x, "silu")


def sigmoid(x):
    return act(x, "sigmoid")


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def gap_spatial(x: Tensor) -> Tensor:
    """Global average pool over H and W: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"gap_spatial expects rank 4, got {x.ndim}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("gap_spatial needs H*W >= 1")
    data = x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g * inv, x.shape).astype(x.data.dtype),)

    return _result(data, "gap", (x,), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    x: [N, Cin, H, W]; w: [Cout, Cin/groups, kh, kw]; optional b: [Cout].
    Output spatial extent H' = floor((H + 2p - d*(kh-1) - 1)/s) + 1.
    Covers pointwise (k=1, groups=1), depthwise (groups=Cin) and strided
    stem convolutions.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got rank {w.ndim}")
    n, cin, h, wdt = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups != 0:
        raise ShapeError(f"groups={groups} does not divide Cin={cin}")
    if cout % groups != 0:
        raise ShapeError(f"groups={groups} does not divide Cout={cout}")
    if cg != cin // groups:
        raise ShapeError(f"weight Cin/groups={cg} but input implies {cin // groups}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {tuple(b.shape)} != ({cout},)")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"dtype mismatch: x {x.dtype} vs w {w.dtype}")

    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wdt + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"empty output {ho}x{wo} for input {h}x{wdt} (k={kh}, d={dilation}, s={stride}, p={padding})")

    xd, wd = x.data, w.data
    p = padding
    if p:
        xp = np.zeros((n, cin, h + 2 * p, wdt + 2 * p), dtype=xd.dtype)
        xp[:, :, p:p + h, p:p + wdt] = xd
    else:
        xp = xd

    co_per_g = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
    # direct accumulation: ci outer, then kernel rows/cols, matching the
    # scalar nested-loop ordering term for term
    for g in range(groups):
        osl = slice(g * co_per_g, (g + 1) * co_per_g)
        for ci in range(cg):
            xc = xp[:, g * cg + ci]
            for ih in range(kh):
                rs = slice(ih * dilation, ih * dilation + (ho - 1) * stride + 1, stride)
                for iw in range(kw):
                    cs = slice(iw * dilation, iw * dilation + (wo - 1) * stride + 1, stride)
                    patch = xc[:, rs, cs]
                    out[:, osl] += wd[osl, ci, ih, iw][None, :, None, None] * patch[:, None]
    if b is not None:
        out += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(gout):
        gx = np.zeros_like(xp) if (x.requires_grad) else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        for g in range(groups):
            osl = slice(g * co_per_g, (g + 1) * co_per_g)
            go = gout[:, osl]
            for ci in range(cg):
                xc = xp[:, g * cg + ci]
                for ih in range(kh):
                    rs = slice(ih * dilation, ih * dilation + (ho - 1) * stride + 1, stride)
                    for iw in range(kw):
                        cs = slice(iw * dilation, iw * dilation + (wo - 1) * stride + 1, stride)
                        if gw is not None:
                            gw[osl, ci, ih, iw] += np.einsum("nhw,nohw->o", xc[:, rs, cs], go)
                        if gx is not None:
                            gx[:, g * cg + ci, rs, cs] += np.einsum(
                                "o,nohw->nhw", wd[osl, ci, ih, iw], go)
        if gx is not None and p:
            gx = gx[:, :, p:p + h, p:p + wdt]
        gb = gout.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        grads = [gx, gw]
        if b is not None:
            grads.append(gb)
        return tuple(grads)

    return _result(out, "conv2d", parents, bwd)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by batch statistics and folds them into the
    running buffers as new = (1-momentum)*old + momentum*batch; eval mode
    normalizes by the running buffers.  Gradients flow to x, gamma, beta.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects rank 4, got {x.ndim}")
    if eps <= 0:
        raise ShapeError("eps must be > 0")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)")
    xd = x.data
    m = n * h * w

    if training:
        if m < 2:
            raise ShapeError(f"training-mode batchnorm needs N*H*W >= 2 per channel, got {m}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if x.requires_grad:
            gs = g * gamma.data[None, :, None, None]
            if training:
                mean_gs = gs.mean(axis=(0, 2, 3), keepdims=True)
                mean_gs_xhat = (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv_std[None, :, None, None] * (gs - mean_gs - xhat * mean_gs_xhat)
            else:
                dx = gs * inv_std[None, :, None, None]
            dx = dx.astype(xd.dtype)
        else:
            dx = None
        return dx, dgamma, dbeta

    return _result(out.astype(xd.dtype), "batchnorm2d", (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# channel split / concat
# ---------------------------------------------------------------------------

def channel_split(x: Tensor, sizes) -> tuple:
    """Split [N,C,H,W] along channels into parts of the given sizes.
    Zero-sized parts are legal and empty. concat(split(x)) == x bitwise."""
    if x.ndim != 4:
        raise ShapeError(f"channel_split expects rank 4, got {x.ndim}")
    c = x.shape[1]
    if sum(sizes) != c:
        raise ShapeError(f"split sizes {list(sizes)} sum to {sum(sizes)}, expected C={c}")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        lo, hi = int(bounds[i]), int(bounds[i + 1])

        def bwd(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=x.data.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_result(x.data[:, lo:hi].copy(), "channel_split", (x,), bwd))
    return tuple(outs)


def channel_concat(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("channel_concat needs at least one part")
    base = parts[0].shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError("channel_concat parts must agree on N, H, W")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        return tuple(g[:, int(bounds[i]):int(bounds[i + 1])] for i in range(len(parts)))

    return _result(data, "channel_concat", tuple(parts), bwd)


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: [N, Cin] @ w.T + b with w: [Cout, Cin], b: [Cout]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("linear expects rank-2 input and weight")
    n, cin = x.shape
    cout, cin_w = w.shape
    if cin != cin_w:
        raise ShapeError(f"input features {cin} != weight features {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {tuple(b.shape)} != ({cout},)")
    data = x.data @ w.data.T + b.data
    xd, wd = x.data, w.data

    def bwd(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(data, "linear", (x, w, b), bwd)


def softmax_xent(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over the batch.

    Target distribution is eps/K everywhere plus 1-eps on the true class;
    log-probabilities are stabilized by max subtraction.
    """
    if not (0.0 <= smoothing < 1.0):
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    if logits.ndim != 2:
        raise ShapeError("softmax_xent expects [N, K] logits")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    logsum = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - logsum

    q = np.full((n, k), smoothing / k, dtype=z.dtype)
    q[np.arange(n), labels] += 1.0 - smoothing
    loss = -(q * logp).sum(axis=1).mean()

    def bwd(g):
        p = np.exp(logp)
        return ((p - q) * (np.asarray(g) / n),)

    return _result(np.asarray(loss, dtype=z.dtype), "softmax_xent", (logits,), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax over the last axis (plain-array helper)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
