from .layers import (
    LayerSpec,
    ShapeError,
    activation,
    avg_pool,
    batch_norm,
    conv2d,
    dense,
    dropout,
    flatten,
    max_pool,
)
from .network import (
    Cache,
    ParamStore,
    backward,
    count_params,
    forward,
    infer_shapes,
    init_params,
    layer_names,
    loss_softmax_xent,
)
from .gradcheck import check_stack_gradients

__all__ = [
    "LayerSpec", "ShapeError", "activation", "avg_pool", "batch_norm", "conv2d", "dense",
    "dropout", "flatten", "max_pool", "Cache", "ParamStore", "backward", "count_params",
    "forward", "infer_shapes", "init_params", "layer_names", "loss_softmax_xent",
    "check_stack_gradients",
]
