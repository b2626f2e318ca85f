#!/usr/bin/env python3
"""Desk-scale training: the nano model memorizes a procedural dataset.

Sixty-four 32x32 images of oriented sinusoidal gratings (class determines
frequency and orientation, phase is random) are enough to watch AdamW with
warmup-cosine scheduling drive a fresh model from chance to perfect recall.
A 200-epoch run reaches 100% train top-1; this demo runs 40 epochs to stay
snappy (about a minute).

Run:  python demos/04_train_synthetic.py
"""

import math

from moganet.model import preset
from moganet.train import evaluate, synth_dataset, train_loop

data = synth_dataset("stripes", count=64, classes=4, h=32, w=32, seed=0)
print(f"dataset: {len(data)} samples, {data.num_classes} classes, "
      f"images {data.images.shape[1:]} u8")
print(f"chance accuracy {1 / data.num_classes:.2f}, "
      f"ln K = {math.log(data.num_classes):.4f}\n")


def log(row):
    if row["epoch"] % 5 == 0 or row["epoch"] == 39:
        print(f"  epoch {row['epoch']:3d}  lr {row['lr']:.2e}  "
              f"loss {row['loss']:.4f}  train top-1 {row['train_acc']:.3f}")


model, metrics = train_loop(preset("nano"), data, epochs=40, seed=0,
                            batch_size=16, log=log)

print(f"\nfinal train top-1: {metrics[-1]['train_acc']:.3f}")
print("evaluation is batch-size invariant:",
      {evaluate(model, data, batch_size=bs) for bs in (1, 16, 64)})
print("\nsame command, same seed -> bit-identical metrics; try the CLI:")
print("  moganet train --preset nano --synth stripes --epochs 200 "
      "--batch 16 --seed 0 --out runs/nano")
