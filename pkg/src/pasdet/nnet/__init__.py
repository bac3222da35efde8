"""Small differentiable toolkit: tape autodiff, MLP heads, parameters."""

from .autodiff import Tensor, as_tensor, backward
from .gradcheck import check_gradients, numeric_grad
from .layers import (
    ConfigError,
    Heads,
    HeadsConfig,
    Mlp,
    MlpConfig,
    color_head,
    encoded_width,
    geometry_head,
    positional_encode,
    semantic_head,
)
from .params import SGD, CheckpointError, ParamStore, load_tensors, save_tensors

__all__ = [
    "Tensor", "as_tensor", "backward", "check_gradients", "numeric_grad",
    "ConfigError", "Heads", "HeadsConfig", "Mlp", "MlpConfig", "color_head",
    "encoded_width", "geometry_head", "positional_encode", "semantic_head",
    "SGD", "CheckpointError", "ParamStore", "load_tensors", "save_tensors",
]
