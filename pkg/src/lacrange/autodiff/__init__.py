from lacrange.autodiff.tensor import Tensor, backward, no_grad
from lacrange.autodiff.layers import (
    Block,
    LayerParams,
    apply_batchnorm,
    apply_conv2d,
    apply_mlp,
    attend_cross,
    pool_global,
)
from lacrange.autodiff.gradcheck import check_gradients
from lacrange.autodiff.tensor import upsample_bilinear
from lacrange.autodiff.checkpoint import load_weights, save_weights

__all__ = [
    "Block",
    "LayerParams",
    "Tensor",
    "apply_batchnorm",
    "apply_conv2d",
    "apply_mlp",
    "attend_cross",
    "backward",
    "check_gradients",
    "load_weights",
    "no_grad",
    "pool_global",
    "save_weights",
    "upsample_bilinear",
]
