"""Four-stage model assembly, configuration presets, and cost accounting.

The analytic layer inventory drives both the MAC counter and the parameter
counter cross-check: every parameterized layer (and every elementwise group
that contributes measurable work) becomes one report row, so totals are
exact integer sums and per-layer discrepancies stay diagnosable.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .blocks import (BatchNormParams, CABlockParams, SABlockParams, StemParams,
                     _param, _zeros, ca_block, sa_block, split_channels,
                     stem_forward)
from .errors import ShapeError
from .tensor import Tensor, gap_spatial, linear, reshape

__all__ = [
    "ArchConfig", "ModelParams", "CostReport", "CostRow", "preset",
    "preset_names", "build", "forward", "named_parameters", "named_buffers",
    "count_params", "count_macs", "layer_inventory",
    "moga_flops_closed_form", "moga_flops_by_layer",
]


@dataclass(frozen=True)
class ArchConfig:
    name: str
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    mlp_ratios: tuple[int, int, int, int]
    split_ratio: tuple[int, int, int] = (1, 3, 4)
    num_classes: int = 1000

    def validate(self):
        for c in self.dims:
            if c < 8 or c % 8:
                raise ShapeError(f"stage width {c} must be >= 8 and divisible by 8 "
                                 f"for an exact {self.split_ratio} split")
        if any(d < 1 for d in self.depths):
            raise ShapeError("every stage needs depth >= 1")


_PRESETS = {
    "xt": ArchConfig("xt", (32, 64, 96, 192), (3, 3, 10, 2), (8, 8, 4, 4)),
    "t": ArchConfig("t", (32, 64, 128, 256), (3, 3, 12, 2), (8, 8, 4, 4)),
    "s": ArchConfig("s", (64, 128, 320, 512), (2, 3, 12, 2), (8, 8, 4, 4)),
    "b": ArchConfig("b", (64, 160, 320, 512), (4, 6, 22, 3), (8, 8, 4, 4)),
    "l": ArchConfig("l", (64, 160, 320, 640), (4, 6, 44, 4), (8, 8, 4, 4)),
    "xl": ArchConfig("xl", (96, 192, 480, 960), (6, 6, 44, 4), (8, 8, 4, 4)),
    # desk-scale preset for tests, training demos and interaction analysis
    "nano": ArchConfig("nano", (8, 16, 32, 64), (1, 1, 2, 1), (2, 2, 2, 2),
                       num_classes=10),
}


def preset_names():
    return list(_PRESETS)


def preset(name: str) -> ArchConfig:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; valid names: {', '.join(_PRESETS)}") from None


def config_with(cfg: ArchConfig, **kw) -> ArchConfig:
    return replace(cfg, **kw)


@dataclass
class ModelParams:
    cfg: ArchConfig
    stems: list
    stages: list  # per stage: list of (SABlockParams, CABlockParams)
    stage_norms: list
    head_w: Tensor
    head_b: Tensor
    dtype: str = "f32"


def build(cfg: ArchConfig, seed: int, dtype: str = "f32") -> ModelParams:
    """Deterministic initialization: truncated normal (std 0.02) weights,
    zero biases, unit/zero BN affine, zero gamma vectors."""
    cfg.validate()
    np_dtype = np.float32 if dtype == "f32" else np.float64
    rng = np.random.Generator(np.random.PCG64(seed))

    stems = [StemParams.init_stage1(rng, cfg.dims[0], np_dtype)]
    for i in range(1, 4):
        stems.append(StemParams.init_later(rng, cfg.dims[i - 1], cfg.dims[i], np_dtype))

    stages = []
    for i in range(4):
        blocks = []
        for _ in range(cfg.depths[i]):
            blocks.append((SABlockParams.init(rng, cfg.dims[i], np_dtype),
                           CABlockParams.init(rng, cfg.dims[i], cfg.mlp_ratios[i], np_dtype)))
        stages.append(blocks)

    stage_norms = [BatchNormParams.init(c, np_dtype) for c in cfg.dims]

    head_w = _param(rng, (cfg.num_classes, cfg.dims[3]), np_dtype)
    head_b = _zeros((cfg.num_classes,), np_dtype)

    return ModelParams(cfg=cfg, stems=stems, stages=stages,
                       stage_norms=stage_norms, head_w=head_w, head_b=head_b,
                       dtype=dtype)


def forward(m: ModelParams, x: Tensor, training: bool) -> Tensor:
    """[N,3,H,W] -> [N, num_classes] logits via stem/blocks/norm per stage,
    then global average pooling and the linear head."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"model input must be [N,3,H,W], got {tuple(x.shape)}")
    if x.shape[2] < 32 or x.shape[3] < 32:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} below the 32x32 minimum")
    for i in range(4):
        x = stem_forward(m.stems[i], x, training)
        for sa, ca in m.stages[i]:
            x = sa_block(sa, x, training)
            x = ca_block(ca, x, training)
        x = m.stage_norms[i](x, training)
    pooled = reshape(gap_spatial(x), (x.shape[0], x.shape[1]))
    return linear(pooled, m.head_w, m.head_b)


# ---------------------------------------------------------------------------
# named traversal
# ---------------------------------------------------------------------------

def _norm_params(prefix, norm):
    yield f"{prefix}.gamma", norm.gamma
    yield f"{prefix}.beta", norm.beta


def named_parameters(m: ModelParams):
    """Deterministic (dot-path, tensor) enumeration of every trainable
    parameter; matches the draw order used by ``build``."""
    for i, stem in enumerate(m.stems, start=1):
        if len(stem.convs) == 2:
            names = ["conv1", "conv2"]
            norms = ["norm1", "norm2"]
        else:
            names, norms = ["conv"], ["norm"]
        for (w, b, norm), cn, nn in zip(stem.convs, names, norms):
            yield f"stem{i}.{cn}.w", w
            yield f"stem{i}.{cn}.b", b
            yield from _norm_params(f"stem{i}.{nn}", norm)
    for si, blocks in enumerate(m.stages):
        for bi, (sa, ca) in enumerate(blocks):
            p = f"stages.{si}.{bi}"
            yield from _norm_params(f"{p}.sa.norm", sa.norm)
            yield f"{p}.sa.fd.proj.w", sa.fd.proj_w
            yield f"{p}.sa.fd.proj.b", sa.fd.proj_b
            yield f"{p}.sa.fd.gamma_s", sa.fd.gamma_s
            yield f"{p}.sa.moga.gate.w", sa.moga.gate_w
            yield f"{p}.sa.moga.gate.b", sa.moga.gate_b
            yield f"{p}.sa.moga.ctx.w", sa.moga.ctx_w
            yield f"{p}.sa.moga.ctx.b", sa.moga.ctx_b
            yield f"{p}.sa.moga.out.w", sa.moga.out_w
            yield f"{p}.sa.moga.out.b", sa.moga.out_b
            yield f"{p}.sa.moga.dw.dw5_d1", sa.moga.dw.dw5_d1
            yield f"{p}.sa.moga.dw.dw5_d2", sa.moga.dw.dw5_d2
            yield f"{p}.sa.moga.dw.dw7_d3", sa.moga.dw.dw7_d3
            yield from _norm_params(f"{p}.ca.norm", ca.norm)
            yield f"{p}.ca.expand.w", ca.expand_w
            yield f"{p}.ca.expand.b", ca.expand_b
            yield f"{p}.ca.dw3", ca.dw3
            yield f"{p}.ca.wr.w", ca.wr_w
            yield f"{p}.ca.wr.b", ca.wr_b
            yield f"{p}.ca.gamma_c", ca.gamma_c
            yield f"{p}.ca.project.w", ca.project_w
            yield f"{p}.ca.project.b", ca.project_b
    for si, norm in enumerate(m.stage_norms):
        yield from _norm_params(f"stage_norms.{si}", norm)
    yield "head.w", m.head_w
    yield "head.b", m.head_b


def _iter_norms(m: ModelParams):
    for i, stem in enumerate(m.stems, start=1):
        norms = ["norm1", "norm2"] if len(stem.convs) == 2 else ["norm"]
        for (_, _, norm), nn in zip(stem.convs, norms):
            yield f"stem{i}.{nn}", norm
    for si, blocks in enumerate(m.stages):
        for bi, (sa, ca) in enumerate(blocks):
            yield f"stages.{si}.{bi}.sa.norm", sa.norm
            yield f"stages.{si}.{bi}.ca.norm", ca.norm
    for si, norm in enumerate(m.stage_norms):
        yield f"stage_norms.{si}", norm


def named_buffers(m: ModelParams):
    """BatchNorm running statistics (not trained, excluded from counts)."""
    for path, norm in _iter_norms(m):
        yield f"{path}.running_mean", norm.running_mean
        yield f"{path}.running_var", norm.running_var


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostRow:
    kind: str  # conv | bn | scale | linear | ew
    path: str
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list
    resolution: tuple[int, int] | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "path", "params", "macs"])
        for r in self.rows:
            w.writerow([r.kind, r.path, r.params, r.macs])
        w.writerow(["total", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "resolution": list(self.resolution) if self.resolution else None,
            "rows": [{"layer": r.kind, "path": r.path, "params": r.params,
                      "macs": r.macs} for r in self.rows],
            "totals": {"params": self.total_params, "macs": self.total_macs},
        }, indent=2)


def _conv_out(h, k, stride, dilation, padding):
    return (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def layer_inventory(cfg: ArchConfig, h: int, w: int) -> list[CostRow]:
    """Analytic per-layer inventory at the given input resolution.

    Convolutions count H'*W'*Cout*(Cin/groups)*k*k multiply-accumulates, the
    linear head Cin*Cout, and normalization/activation/elementwise work one
    op per produced element.  Parameter counts cover weights, biases, BN
    affine pairs and the learned gamma vectors; BN running statistics are
    excluded (not reached by gradients).
    """
    cfg.validate()
    rows = []

    def conv(path, cin, cout, k, hh, ww, groups=1, bias=True, stride=1, dilation=1, padding=None):
        if padding is None:
            padding = dilation * (k - 1) // 2
        ho, wo = _conv_out(hh, k, stride, dilation, padding), _conv_out(ww, k, stride, dilation, padding)
        params = cout * (cin // groups) * k * k + (cout if bias else 0)
        rows.append(CostRow("conv", path, params, ho * wo * cout * (cin // groups) * k * k))
        return ho, wo

    def bn(path, c, hh, ww):
        rows.append(CostRow("bn", path, 2 * c, hh * ww * c))

    def ew(path, n_elem, n_ops=1):
        rows.append(CostRow("ew", path, 0, n_elem * n_ops))

    # stems
    h1, w1 = conv("stem1.conv1", 3, cfg.dims[0] // 2, 3, h, w, stride=2)
    bn("stem1.norm1", cfg.dims[0] // 2, h1, w1)
    h1, w1 = conv("stem1.conv2", cfg.dims[0] // 2, cfg.dims[0], 3, h1, w1, stride=2)
    bn("stem1.norm2", cfg.dims[0], h1, w1)

    hs, ws = h1, w1
    for si in range(4):
        c, depth, ratio = cfg.dims[si], cfg.depths[si], cfg.mlp_ratios[si]
        if si > 0:
            hs, ws = conv(f"stem{si + 1}.conv", cfg.dims[si - 1], c, 3, hs, ws, stride=2)
            bn(f"stem{si + 1}.norm", c, hs, ws)
        cl, cm, ch = split_channels(c)
        hw = hs * ws
        for bi in range(depth):
            p = f"stages.{si}.{bi}"
            # spatial aggregation block
            bn(f"{p}.sa.norm", c, hs, ws)
            conv(f"{p}.sa.fd.proj", c, c, 1, hs, ws)
            rows.append(CostRow("scale", f"{p}.sa.fd.gamma_s", c, hw * c))
            ew(f"{p}.sa.fd.ew", hw * c, 4)  # gap, subtract, add, gelu
            conv(f"{p}.sa.moga.gate", c, c, 1, hs, ws)
            conv(f"{p}.sa.moga.dw.dw5_d1", c, c, 5, hs, ws, groups=c, bias=False)
            if cm:
                conv(f"{p}.sa.moga.dw.dw5_d2", cm, cm, 5, hs, ws, groups=cm, bias=False, dilation=2)
            if ch:
                conv(f"{p}.sa.moga.dw.dw7_d3", ch, ch, 7, hs, ws, groups=ch, bias=False, dilation=3)
            conv(f"{p}.sa.moga.ctx", c, c, 1, hs, ws)
            conv(f"{p}.sa.moga.out", c, c, 1, hs, ws)
            ew(f"{p}.sa.moga.ew", hw * c, 3)  # two silu, one gating product
            ew(f"{p}.sa.residual", hw * c)
            # channel aggregation block
            hidden = ratio * c
            bn(f"{p}.ca.norm", c, hs, ws)
            conv(f"{p}.ca.expand", c, hidden, 1, hs, ws)
            conv(f"{p}.ca.dw3", hidden, hidden, 3, hs, ws, groups=hidden, bias=False)
            ew(f"{p}.ca.gelu", hw * hidden)
            conv(f"{p}.ca.wr", hidden, 1, 1, hs, ws)
            rows.append(CostRow("scale", f"{p}.ca.gamma_c", hidden, hw * hidden))
            ew(f"{p}.ca.ew", hw * (2 * hidden + 1))  # gelu(wr), subtract, add
            conv(f"{p}.ca.project", hidden, c, 1, hs, ws)
            ew(f"{p}.ca.residual", hw * c)
        bn(f"stage_norms.{si}", c, hs, ws)

    ew("head.gap", hs * ws * cfg.dims[3])
    rows.append(CostRow("linear", "head",
                        cfg.num_classes * cfg.dims[3] + cfg.num_classes,
                        cfg.num_classes * cfg.dims[3]))
    return rows


def count_macs(cfg: ArchConfig, h: int, w: int) -> CostReport:
    """Analytic per-layer multiply-accumulate and parameter counts for one
    image at the given resolution."""
    return CostReport(rows=layer_inventory(cfg, h, w), resolution=(h, w))


_LEAF_NAMES = {"w", "b", "gamma", "beta"}


def count_params(m: ModelParams) -> CostReport:
    """Exact trainable-scalar counts from a realized parameter tree,
    grouped into the same layer paths the analytic inventory uses."""
    grouped: dict[str, int] = {}
    order: list[str] = []
    for path, t in named_parameters(m):
        head, _, leaf = path.rpartition(".")
        layer = head if leaf in _LEAF_NAMES else path
        if layer not in grouped:
            grouped[layer] = 0
            order.append(layer)
        grouped[layer] += int(t.data.size)
    rows = [CostRow("param", p, grouped[p], 0) for p in order]
    return CostReport(rows=rows, resolution=None)


# ---------------------------------------------------------------------------
# gated-aggregation module FLOPs, closed form vs per-layer sum
# ---------------------------------------------------------------------------

def _as_int(x: Fraction):
    return int(x) if x.denominator == 1 else x


def moga_flops_closed_form(h: int, w: int, c: int):
    """H*W*C*(471/4 + 6C) under the 2-ops-per-MAC convention; exact rational
    arithmetic, returned as int whenever integral."""
    hwc = Fraction(h * w * c)
    return _as_int(hwc * Fraction(471, 4) + 6 * hwc * c)


def moga_flops_by_layer(h: int, w: int, c: int):
    """Sum of the per-layer terms: three pointwise convolutions at 2HWC^2
    each, plus the three depthwise branches at the ideal 1:3:4 split
    (2*HWC*25, (3/4)*HWC*25, HWC*49)."""
    hw = Fraction(h * w)
    gate = 2 * hw * c * c
    ctx = 2 * hw * c * c
    out = 2 * hw * c * c
    dw1 = 2 * hw * c * 25
    dw2 = 2 * hw * Fraction(3 * c, 8) * 25
    dw3 = 2 * hw * Fraction(c, 2) * 49
    return _as_int(gate + ctx + out + dw1 + dw2 + dw3)


def moga_mac_rows(report: CostReport) -> int:
    """Total MACs of the gated-aggregation convolution sublayers in a
    report (the pointwise gate/ctx/out and the three depthwise branches)."""
    suffixes = (".sa.moga.gate", ".sa.moga.ctx", ".sa.moga.out",
                ".sa.moga.dw.dw5_d1", ".sa.moga.dw.dw5_d2", ".sa.moga.dw.dw7_d3")
    return sum(r.macs for r in report.rows if r.path.endswith(suffixes))
