"""Desk-scale supervised training.

AdamW with decoupled weight decay (biases, BN affine and the learned gamma
vectors excluded from decay), linear-warmup cosine learning-rate schedule,
label-smoothed cross-entropy, and deterministic seeded shuffling so a rerun
with the same seed reproduces the metrics log bit for bit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ArchConfig, ModelParams, build, forward, named_parameters
from .serialization import save_checkpoint
from .tensor import Tensor, backward, no_grad, softmax_xent

DEFAULT_HYPER = {"lr_base": 1e-3, "beta1": 0.9, "beta2": 0.999,
                 "eps": 1e-8, "weight_decay": 0.03}
MIN_LR = 1e-5
LABEL_SMOOTHING = 0.1
WARMUP_EPOCHS = 5


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last-good checkpoint is on disk."""


@dataclass
class Dataset:
    images: np.ndarray  # u8 [count, C, H, W]
    labels: np.ndarray  # u16 [count]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        assert self.images.ndim == 4 and len(self.labels) == len(self.images)

    def __len__(self):
        return len(self.images)


def images_to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """u8 pixels -> [0, 1] floats; the single normalization used everywhere."""
    return images.astype(dtype) / 255.0


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def synth_dataset(kind: str, count: int, classes: int, h: int, w: int,
                  seed: int) -> Dataset:
    """Class-conditional procedural images, deterministic per seed.

    stripes: oriented sinusoidal gratings whose frequency and orientation
    depend on the class, plus mild pixel noise.
    blobs: class+1 soft Gaussian bumps at seeded positions.
    Labels cycle round-robin, so class counts are balanced within one.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if kind not in ("stripes", "blobs"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, kind == "blobs"))))
    labels = (np.arange(count) % classes).astype(np.uint16)
    images = np.empty((count, 3, h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for i in range(count):
        k = int(labels[i])
        if kind == "stripes":
            angle = np.pi * k / classes
            freq = 2.0 * np.pi * (1.5 + k) / max(h, w)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            field2d = np.sin(freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        else:
            field2d = np.zeros((h, w))
            for _ in range(k + 1):
                cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
                sig = 0.08 * max(h, w)
                field2d += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
            field2d = 2.0 * field2d / max(field2d.max(), 1e-9) - 1.0
        base = 127.5 * (1.0 + field2d)
        noise = rng.normal(0.0, 6.0, size=(3, h, w))
        images[i] = np.clip(base[None] + noise, 0, 255).astype(np.uint8)
    return Dataset(images=images, labels=labels, num_classes=classes, split=kind)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

_NO_DECAY_LEAVES = {"b", "beta", "gamma", "gamma_s", "gamma_c"}


def decay_mask(path: str, t: Tensor) -> bool:
    """True when the parameter receives weight decay: multi-dim weights only."""
    leaf = path.rpartition(".")[2]
    return leaf not in _NO_DECAY_LEAVES and t.data.ndim > 1


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    hyper: dict = field(default_factory=lambda: dict(DEFAULT_HYPER))

    @classmethod
    def init(cls, model: ModelParams, **hyper) -> "OptimState":
        s = cls(hyper={**DEFAULT_HYPER, **hyper})
        for path, t in named_parameters(model):
            s.m[path] = np.zeros_like(t.data)
            s.v[path] = np.zeros_like(t.data)
        return s


def adamw_step(model: ModelParams, state: OptimState, lr: float) -> None:
    """One bias-corrected AdamW update from the gradients currently stored
    on the parameters: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""
    lr = float(lr)
    if lr < 0:
        raise ValueError("lr must be >= 0")
    hy = state.hyper
    b1, b2, eps, wd = hy["beta1"], hy["beta2"], hy["eps"], hy["weight_decay"]
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for path, p in named_parameters(model):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {path}")
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd and decay_mask(path, p):
            update = update + wd * p.data
        p.data = p.data - lr * update.astype(p.data.dtype)


def zero_grads(model: ModelParams) -> None:
    for _, p in named_parameters(model):
        p.grad = None


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int
    base_lr: float
    min_lr: float = MIN_LR


def lr_at(sched: Schedule, step: int) -> float:
    """Linear 0 -> base over warmup, then cosine base -> min."""
    warm = sched.warmup_epochs * sched.steps_per_epoch
    total = sched.total_epochs * sched.steps_per_epoch
    if step < warm:
        return sched.base_lr * step / warm
    span = max(total - warm, 1)
    progress = min((step - warm) / span, 1.0)
    # plain float: a numpy f64 scalar would silently upcast f32 parameters
    return float(sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr)
                 * (1.0 + np.cos(np.pi * progress)))


# ---------------------------------------------------------------------------
# training loop and evaluation
# ---------------------------------------------------------------------------

def evaluate(model: ModelParams, data: Dataset, batch_size: int = 64) -> float:
    """Eval-mode top-1 accuracy; argmax ties resolve to the lowest class."""
    correct = 0
    with no_grad():
        for lo in range(0, len(data), batch_size):
            batch = images_to_float(data.images[lo:lo + batch_size])
            logits = forward(model, Tensor(batch), training=False)
            correct += int((logits.data.argmax(axis=1) == data.labels[lo:lo + batch_size]).sum())
    return correct / len(data)


def train_loop(cfg: ArchConfig, data: Dataset, epochs: int, seed: int,
               batch_size: int = 16, val_data: Dataset | None = None,
               out_dir: str | None = None, flip: bool = False,
               hyper: dict | None = None, warmup_epochs: int = WARMUP_EPOCHS,
               log=None):
    """Train a fresh model on ``data``; returns (model, metrics rows).

    Deterministic given ``seed``: initialization, shuffling and the optional
    horizontal flips all derive from it.  When ``out_dir`` is set, writes
    ``metrics.csv`` and a ``checkpoint.moga`` refreshed at every epoch end,
    so a divergence abort leaves the last good epoch on disk.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if batch_size > len(data):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(data)}")
    if cfg.num_classes != data.num_classes:
        cfg = ArchConfig(name=cfg.name, dims=cfg.dims, depths=cfg.depths,
                         mlp_ratios=cfg.mlp_ratios, split_ratio=cfg.split_ratio,
                         num_classes=data.num_classes)

    model = build(cfg, seed=seed)
    state = OptimState.init(model, **(hyper or {}))
    steps_per_epoch = len(data) // batch_size
    sched = Schedule(warmup_epochs=min(warmup_epochs, max(epochs - 1, 1)),
                     total_epochs=epochs, steps_per_epoch=steps_per_epoch,
                     base_lr=state.hyper["lr_base"])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x7261))))

    metrics = []
    ckpt_path = os.path.join(out_dir, "checkpoint.moga") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            batch = images_to_float(data.images[idx])
            if flip:
                flips = rng.random(len(idx)) < 0.5
                batch[flips] = batch[flips, :, :, ::-1]
            lr = lr_at(sched, step)
            zero_grads(model)
            logits = forward(model, Tensor(batch), training=True)
            loss = softmax_xent(logits, data.labels[idx].astype(np.int64), LABEL_SMOOTHING)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                _write_metrics(out_dir, metrics)
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} step {step}; "
                    f"last-good checkpoint: {ckpt_path or 'not written'}")
            backward(loss)
            adamw_step(model, state, lr)
            losses.append(loss_val)
            step += 1

        train_acc = evaluate(model, data)
        val_acc = evaluate(model, val_data) if val_data is not None else None
        row = {"epoch": epoch, "step": step, "lr": lr_at(sched, step),
               "loss": float(np.mean(losses)), "train_acc": train_acc,
               "val_acc": val_acc}
        metrics.append(row)
        if log:
            log(row)
        if out_dir:
            save_rng = rng.bit_generator.state
            save_checkpoint(ckpt_path, model, optimizer={
                "step": state.step, "hyper": state.hyper, "m": state.m, "v": state.v,
            }, rng_state=save_rng, epoch=epoch)

    _write_metrics(out_dir, metrics)
    return model, metrics


def _write_metrics(out_dir, metrics):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "lr", "loss", "train_acc", "val_acc"])
        for r in metrics:
            w.writerow([r["epoch"], r["step"], f"{r['lr']:.10g}", f"{r['loss']:.10g}",
                        f"{r['train_acc']:.6g}",
                        "" if r["val_acc"] is None else f"{r['val_acc']:.6g}"])
