"""Minimal reverse-mode autodiff engine for 3D registration networks."""
from .core import (
    NumericalError,
    Tensor,
    as_tensor,
    backward,
    debug_mode,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_debug,
    set_default_dtype,
)
from .gradcheck import GradCheckReport, grad_check, relative_error
from .nn import (
    BatchNormState,
    avgpool3d,
    batchnorm,
    concat_channels,
    conv3d,
    conv_output_extent,
    relu,
    transposed_conv3d,
    transposed_output_extent,
)

__all__ = [
    "BatchNormState", "GradCheckReport", "NumericalError", "Tensor", "as_tensor", "avgpool3d",
    "backward", "batchnorm", "concat_channels", "conv3d", "conv_output_extent", "debug_mode",
    "get_default_dtype", "grad_check", "is_grad_enabled", "no_grad", "relative_error", "relu",
    "set_debug", "set_default_dtype", "transposed_conv3d", "transposed_output_extent",
]
