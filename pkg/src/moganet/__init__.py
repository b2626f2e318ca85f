"""Multi-order gated aggregation ConvNet: autodiff core, blocks, cost
accounting, desk-scale training, and game-theoretic interaction analysis."""

from .errors import AutodiffError, FormatError, ShapeError
from .tensor import (Tensor, act, backward, batchnorm2d, channel_concat,
                     channel_split, conv2d, gap_spatial, gelu, linear, no_grad,
                     sigmoid, silu, softmax_xent)
from .model import (ArchConfig, CostReport, ModelParams, build, count_macs,
                    count_params, forward, moga_flops_by_layer,
                    moga_flops_closed_form, named_parameters, preset,
                    preset_names)

__version__ = "0.1.0"
