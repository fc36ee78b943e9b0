"""Spatio-temporal deformable attention kernels with analytic gradients.

The package implements dense multi-head attention and its sparse deformable
counterpart over [T, H, W, C] clip feature maps, toy encoder/decoder layers
composing them, an exact multiply-counting harness, and a finite-difference
gradient oracle. The `stdeform` CLI exposes the verification suites.
"""

from .complexity import OpCount, OpCounter, dense_attn_cost, stdeform_cost
from .config import ModelConfig
from .dense_attention import (
    DenseAttnParams,
    attn_logits,
    multi_head_attn,
    multi_head_attn_backward,
    uniformity_at_init,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ParameterError,
)
from .interp import PaddingPolicy, Point3, sample, sample_backward
from .stdeform_attention import (
    SamplingPlan,
    STDeformParams,
    dense_equivalence_construct,
    predict_offsets,
    predict_weights,
    stdeform_attn,
    stdeform_attn_backward,
)
from .tensor_core import (
    ClipFeatureMap,
    RngSeed,
    Tensor,
    flatten_index,
    matvec,
    randn,
    unflatten_index,
)

__all__ = [
    "ClipFeatureMap", "ConfigError", "ContractError", "DenseAttnParams",
    "DimensionError", "ModelConfig", "NumericError", "OpCount", "OpCounter",
    "PaddingPolicy", "ParameterError", "Point3", "RngSeed", "SamplingPlan",
    "STDeformParams", "Tensor", "attn_logits", "dense_attn_cost",
    "dense_equivalence_construct", "flatten_index", "matvec",
    "multi_head_attn", "multi_head_attn_backward", "predict_offsets",
    "predict_weights", "randn", "sample", "sample_backward", "stdeform_attn",
    "stdeform_attn_backward", "stdeform_cost", "unflatten_index",
    "uniformity_at_init",
]
