"""Recurrent cross-attention clustering kernels with verification tooling."""

from .clustering import (ClusterState, RcaParams, dispatch_features, e_step,
                         identity_rca_params, init_centers,
                         legacy_cross_attention, m_step, make_rca_params,
                         multi_head_merge, multi_head_split, recurrent_cluster)
from .encoder import (ClusterModel, ModelConfig, classify, downsample,
                      init_params, model_forward, param_count, param_shapes,
                      patch_embed, stage_forward, tiny_config)
from .errors import (CheckpointError, ConfigError, DataError, ShapeError,
                     TrainingError)
from .tensor import (Precision, Tensor, adaptive_avg_pool, cosine_similarity,
                     cross_entropy, gelu, layer_norm, linear, matmul, no_grad,
                     relu, softmax)

__all__ = [
    "ClusterModel", "ClusterState", "ModelConfig", "Precision", "RcaParams",
    "Tensor", "adaptive_avg_pool", "classify", "cosine_similarity",
    "cross_entropy", "dispatch_features", "downsample", "e_step", "gelu",
    "identity_rca_params", "init_centers", "init_params", "layer_norm",
    "legacy_cross_attention", "linear", "m_step", "make_rca_params", "matmul",
    "model_forward", "multi_head_merge", "multi_head_split", "no_grad",
    "param_count", "param_shapes", "patch_embed", "recurrent_cluster", "relu",
    "softmax", "stage_forward", "tiny_config",
    "CheckpointError", "ConfigError", "DataError", "ShapeError", "TrainingError",
]

__version__ = "0.1.0"
