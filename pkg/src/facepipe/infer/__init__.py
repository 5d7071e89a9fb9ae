"""Reference CNN executor: FTM model files, f32 and int8 forward passes."""

from .engine import (QuantParams, calibrate, count_flops, dequantize, forward_f32,
                     forward_i8, forward_trace, quantize, quantize_model,
                     quantize_tensor)
from .builder import ModelBuilder
from .kernels import conv2d, depthwise_conv2d, global_depthwise, linear, prelu
from .model import (LAYER_KINDS, LayerSpec, Model, dump_model, load_model,
                    read_model, write_model)

__all__ = [
    "LAYER_KINDS", "LayerSpec", "Model", "ModelBuilder", "QuantParams",
    "calibrate", "conv2d", "count_flops", "depthwise_conv2d", "dequantize",
    "dump_model", "forward_f32", "forward_i8", "forward_trace", "global_depthwise",
    "linear", "load_model", "prelu", "quantize", "quantize_model", "quantize_tensor",
    "read_model", "write_model",
]
