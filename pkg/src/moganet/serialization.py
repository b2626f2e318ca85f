"""Bit-exact binary file formats: model checkpoints and image datasets.

Checkpoint layout (all integers little-endian):

    magic    4 bytes  b"MOGA"
    version  u32
    mlen     u64      manifest byte length
    manifest mlen bytes of UTF-8 JSON
    payload  raw tensor bytes, in manifest order, each tensor starting at
             a 64-byte-aligned offset relative to the payload start

The manifest carries the architecture config, a tensor table of
{path, dtype, shape, byte_offset, byte_len}, an optimizer-state presence
flag, the training RNG state and the epoch counter.  The binary payload
stays dumb; everything needed to interpret it lives in the JSON.

Dataset layout:

    magic        4 bytes  b"MGDS"
    version      u32
    count        u32
    channels     u32
    height       u32
    width        u32
    num_classes  u32
    labels       count x u16
    pixels       count*channels*height*width x u8

Loaders reject any file whose length disagrees with its header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .model import ArchConfig, ModelParams, build, named_buffers, named_parameters

CHECKPOINT_MAGIC = b"MOGA"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"MGDS"
DATASET_VERSION = 1
_ALIGN = 64

_DTYPE_TO_NP = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    cfg: ArchConfig
    model: ModelParams
    optimizer: dict | None  # {"step", "hyper", "m": {path: arr}, "v": {path: arr}}
    rng_state: dict | None
    epoch: int


def _model_tensors(model: ModelParams):
    for path, t in named_parameters(model):
        yield path, t.data
    for path, buf in named_buffers(model):
        yield path, buf


def _checkpoint_tensors(model: ModelParams, optimizer):
    yield from _model_tensors(model)
    if optimizer is not None:
        for path, _ in named_parameters(model):
            yield f"opt.m.{path}", optimizer["m"][path]
        for path, _ in named_parameters(model):
            yield f"opt.v.{path}", optimizer["v"][path]


def save_checkpoint(path, model: ModelParams, optimizer: dict | None = None,
                    rng_state: dict | None = None, epoch: int = 0) -> None:
    table = []
    chunks = []
    offset = 0
    for name, arr in _checkpoint_tensors(model, optimizer):
        arr = np.asarray(arr)
        dtype = "f32" if arr.dtype == np.float32 else "f64"
        raw = np.ascontiguousarray(arr).astype(_DTYPE_TO_NP[dtype], copy=False).tobytes()
        pad = (-offset) % _ALIGN
        if pad:
            chunks.append(b"\x00" * pad)
            offset += pad
        table.append({"path": name, "dtype": dtype, "shape": list(arr.shape),
                      "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    cfg = model.cfg
    manifest = {
        "arch": {"name": cfg.name, "dims": list(cfg.dims), "depths": list(cfg.depths),
                 "mlp_ratios": list(cfg.mlp_ratios), "split_ratio": list(cfg.split_ratio),
                 "num_classes": cfg.num_classes},
        "dtype": model.dtype,
        "epoch": int(epoch),
        "has_optimizer": optimizer is not None,
        "optimizer": None if optimizer is None else {
            "step": int(optimizer["step"]), "hyper": optimizer["hyper"]},
        "rng_state": rng_state,
        "tensors": table,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + mlen
    if header_end > len(blob):
        raise FormatError("manifest length exceeds file size")
    try:
        manifest = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}") from None

    payload = blob[header_end:]
    prev_end = 0
    arrays = {}
    for entry in manifest["tensors"]:
        off, ln = entry["byte_offset"], entry["byte_len"]
        if off % _ALIGN:
            raise FormatError(f"tensor {entry['path']} offset {off} not {_ALIGN}-byte aligned")
        if off < prev_end:
            raise FormatError(f"tensor {entry['path']} overlaps its predecessor")
        if off + ln > len(payload):
            raise FormatError(f"tensor {entry['path']} extends past end of file")
        dt = _DTYPE_TO_NP.get(entry["dtype"])
        if dt is None:
            raise FormatError(f"unknown dtype {entry['dtype']!r}")
        n = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if ln != n * dt.itemsize:
            raise FormatError(f"tensor {entry['path']} byte_len {ln} != shape implies {n * dt.itemsize}")
        arrays[entry["path"]] = np.frombuffer(payload, dtype=dt, count=n, offset=off)\
            .reshape(entry["shape"]).copy()
        prev_end = off + ln

    a = manifest["arch"]
    cfg = ArchConfig(name=a["name"], dims=tuple(a["dims"]), depths=tuple(a["depths"]),
                     mlp_ratios=tuple(a["mlp_ratios"]), split_ratio=tuple(a["split_ratio"]),
                     num_classes=a["num_classes"])
    model = build(cfg, seed=0, dtype=manifest["dtype"])
    for name, t in named_parameters(model):
        if name not in arrays:
            raise FormatError(f"checkpoint missing parameter {name}")
        if tuple(arrays[name].shape) != tuple(t.data.shape):
            raise FormatError(f"parameter {name} shape {arrays[name].shape} != {t.data.shape}")
        t.data = arrays[name].astype(t.data.dtype, copy=False)
    for name, buf in named_buffers(model):
        if name not in arrays:
            raise FormatError(f"checkpoint missing buffer {name}")
        buf[...] = arrays[name]

    optimizer = None
    if manifest["has_optimizer"]:
        opt = manifest["optimizer"]
        optimizer = {"step": opt["step"], "hyper": opt["hyper"], "m": {}, "v": {}}
        for name, _ in named_parameters(model):
            optimizer["m"][name] = arrays[f"opt.m.{name}"]
            optimizer["v"][name] = arrays[f"opt.v.{name}"]

    return Checkpoint(cfg=cfg, model=model, optimizer=optimizer,
                      rng_state=manifest["rng_state"], epoch=manifest["epoch"])


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

_DS_HEADER = struct.Struct("<4sIIIIII")


def save_dataset(path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8:
        raise FormatError(f"dataset pixels must be u8, got {images.dtype}")
    if images.ndim != 4:
        raise FormatError(f"dataset images must be [count,C,H,W], got rank {images.ndim}")
    count, c, h, w = images.shape
    if labels.shape != (count,):
        raise FormatError(f"labels shape {labels.shape} != ({count},)")
    if labels.size and int(labels.max()) >= num_classes:
        raise FormatError(f"label {int(labels.max())} >= num_classes {num_classes}")
    with open(path, "wb") as f:
        f.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, count, c, h, w, num_classes))
        f.write(labels.astype("<u2").tobytes())
        f.write(images.tobytes())


def load_dataset(path):
    """Returns (images u8 [count,C,H,W], labels u16 [count], num_classes)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _DS_HEADER.size:
        raise FormatError("file shorter than dataset header")
    magic, version, count, c, h, w, num_classes = _DS_HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    expected = _DS_HEADER.size + 2 * count + count * c * h * w
    if len(blob) != expected:
        raise FormatError(f"file length {len(blob)} != header implies {expected}")
    labels = np.frombuffer(blob, dtype="<u2", count=count, offset=_DS_HEADER.size).copy()
    if labels.size and int(labels.max()) >= num_classes:
        raise FormatError(f"label {int(labels.max())} >= num_classes {num_classes}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * c * h * w,
                           offset=_DS_HEADER.size + 2 * count)
    return pixels.reshape(count, c, h, w).copy(), labels, num_classes
