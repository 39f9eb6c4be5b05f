"""Neural channel estimator: network, parameters, freezing and weight I/O."""

from xlce.model.network import (
    backbone_forward,
    embed,
    feature_attention,
    forward,
    forward_grid,
    from_grid,
    pfsa_block,
    postprocess,
    preprocess,
    spatial_attention,
    to_grid,
)
from xlce.model.params import (
    ConfigError,
    ModelConfig,
    ModelParams,
    ParamCount,
    WeightFileError,
    freeze_partition,
    is_frozen,
    load_weights,
    param_count,
    param_shapes,
    save_weights,
)

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ModelParams",
    "ParamCount",
    "WeightFileError",
    "backbone_forward",
    "embed",
    "feature_attention",
    "forward",
    "forward_grid",
    "freeze_partition",
    "from_grid",
    "is_frozen",
    "load_weights",
    "param_count",
    "param_shapes",
    "pfsa_block",
    "postprocess",
    "preprocess",
    "save_weights",
    "spatial_attention",
    "to_grid",
]
