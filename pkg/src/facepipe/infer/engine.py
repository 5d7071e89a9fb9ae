"""Forward passes (f32 and int8), min/max calibration, and FLOP accounting."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import InvalidInputError, QuantizationError
from ..tensor import Tensor
from . import kernels as K
from .model import MAC_KINDS, LayerSpec, Model

QMAX = 127
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    """Symmetric int8 parameters; the zero point is always 0.

    ``scale`` is the activation scale of a layer's output. ``weight_scale`` is
    set for layers that own a weight tensor.
    """

    scale: float
    weight_scale: Optional[float] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError("quantization scale must be positive")


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_for(max_abs: float) -> float:
    return max(float(max_abs) / QMAX, SCALE_FLOOR)


def quantize(x, scale: float) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / scale)
    return np.clip(q, -QMAX, QMAX).astype(np.int8)


def dequantize(q, scale: float) -> np.ndarray:
    return np.asarray(q, dtype=np.float32) * np.float32(scale)


def quantize_tensor(x, scale: Optional[float] = None) -> Tensor:
    x = np.asarray(x, dtype=np.float32)
    if scale is None:
        scale = scale_for(np.max(np.abs(x)))
    return Tensor(quantize(x, scale), qscale=scale)


# ----------------------------------------------------------------------------
# f32 path
# ----------------------------------------------------------------------------

def _f32(model: Model, ref: Optional[str]):
    if ref is None:
        return None
    t = model.weights[ref]
    return t.dequantize() if t.dtype == "i8" else t.data


def _apply_f32(layer: LayerSpec, model: Model, x: np.ndarray) -> np.ndarray:
    refs = layer.weight_refs
    k = layer.kind
    if k == "conv2d":
        return K.conv2d(x, _f32(model, refs["weight"]), _f32(model, refs.get("bias")),
                        layer.stride, layer.padding)
    if k == "depthwise_conv2d":
        return K.depthwise_conv2d(x, _f32(model, refs["weight"]), _f32(model, refs.get("bias")),
                                  layer.stride, layer.padding)
    if k == "global_depthwise":
        return K.global_depthwise(x, _f32(model, refs["weight"]), _f32(model, refs.get("bias")))
    if k == "linear":
        return K.linear(x, _f32(model, refs["weight"]), _f32(model, refs.get("bias")))
    if k == "prelu":
        return K.prelu(x, _f32(model, refs["alpha"]))
    if k == "add_bias":
        return K.add_bias(x, _f32(model, refs["bias"]))
    if k == "flatten":
        return K.flatten(x)
    return K.l2norm(x)


def _check_input(model: Model, input: Tensor) -> np.ndarray:
    if not isinstance(input, Tensor):
        raise InvalidInputError("forward expects a Tensor")
    if input.shape != model.input_shape:
        raise InvalidInputError(f"input shape {input.shape} != model input {model.input_shape}")
    if input.dtype != "f32":
        raise InvalidInputError("forward expects an f32 input tensor")
    return input.data


def forward_trace(model: Model, input: Tensor) -> List[np.ndarray]:
    """f32 forward returning every intermediate: [input, out_0, out_1, ...]."""
    x = np.array(_check_input(model, input), dtype=np.float32)
    trace = [x]
    for layer in model.layers:
        x = _apply_f32(layer, model, x).astype(np.float32, copy=False)
        trace.append(x)
    return trace


def forward_f32(model: Model, input: Tensor) -> Tensor:
    return Tensor(forward_trace(model, input)[-1])


# ----------------------------------------------------------------------------
# calibration and quantization
# ----------------------------------------------------------------------------

def calibrate(model: Model, samples: Sequence[Tensor]) -> Dict[str, QuantParams]:
    """Min/max calibration over ``samples``.

    Returns one entry per layer name plus ``"input"`` for the network input.
    """
    samples = list(samples)
    if not samples:
        raise QuantizationError("calibration needs at least one sample")
    n = len(model.layers) + 1
    peaks = np.zeros(n)
    for sample in samples:
        for i, act in enumerate(forward_trace(model, sample)):
            peaks[i] = max(peaks[i], float(np.max(np.abs(act))))
    params = {"input": QuantParams(scale_for(peaks[0]))}
    for i, layer in enumerate(model.layers):
        wscale = None
        if layer.kind in MAC_KINDS:
            w = model.weights[layer.weight_refs["weight"]]
            wscale = scale_for(np.max(np.abs(w.dequantize())))
        params[layer.name] = QuantParams(scale_for(peaks[i + 1]), wscale)
    return params


def quantize_model(model: Model, params: Dict[str, QuantParams]) -> Model:
    """Convert MAC weights to i8 and attach activation scales.

    Biases and PReLU slopes stay f32; biases are folded into the int32
    accumulator at run time.
    """
    needed = ["input"] + [l.name for l in model.layers]
    missing = [name for name in needed if name not in params]
    if missing:
        raise QuantizationError(f"missing QuantParams for: {', '.join(missing)}")
    weights = dict(model.weights)
    for layer in model.layers:
        if layer.kind not in MAC_KINDS:
            continue
        ref = layer.weight_refs["weight"]
        w = model.weights[ref].dequantize()
        wscale = params[layer.name].weight_scale or scale_for(np.max(np.abs(w)))
        weights[ref] = Tensor(quantize(w, wscale), qscale=wscale)
    act_scales = {name: params[name].scale for name in needed}
    return replace(model, weights=weights, act_scales=act_scales)


# ----------------------------------------------------------------------------
# int8 path
# ----------------------------------------------------------------------------

def _requantize(acc: np.ndarray, multiplier: float) -> np.ndarray:
    q = round_half_away(acc.astype(np.float64) * multiplier)
    return np.clip(q, -QMAX, QMAX).astype(np.int32)


def forward_i8(model: Model, input: Tensor) -> Tensor:
    """Integer inference; the final activation is dequantized to f32."""
    if not model.quantized:
        raise QuantizationError("forward_i8 needs a model produced by quantize_model")
    x = _check_input(model, input)
    scales = model.act_scales
    for name in ["input"] + [l.name for l in model.layers]:
        if name not in scales:
            raise QuantizationError(f"missing activation scale for {name!r}")
    s = scales["input"]
    q = quantize(x, s).astype(np.int32)

    for layer in model.layers:
        s_out = scales[layer.name]
        refs = layer.weight_refs
        if layer.kind in MAC_KINDS:
            w = model.weights[refs["weight"]]
            if w.dtype != "i8":
                raise QuantizationError(f"{layer.name}: weights are not quantized")
            wq = w.data.astype(np.int32)
            acc_scale = s * w.qscale
            bias = None
            if "bias" in refs:
                b = model.weights[refs["bias"]].dequantize()
                bias = round_half_away(b.astype(np.float64) / acc_scale).astype(np.int32)
            if layer.kind == "conv2d":
                acc = K.conv2d(q, wq, bias, layer.stride, layer.padding)
            elif layer.kind == "depthwise_conv2d":
                acc = K.depthwise_conv2d(q, wq, bias, layer.stride, layer.padding)
            elif layer.kind == "global_depthwise":
                acc = K.global_depthwise(q, wq, bias)
            else:
                acc = K.linear(q, wq, bias)
            q = _requantize(acc, acc_scale / s_out)
        elif layer.kind == "flatten":
            q = K.flatten(q)
            # values are untouched, so keep the incoming scale
            s_out = s
        else:
            # elementwise ops run on dequantized values, then requantize
            real = _apply_f32(layer, model, dequantize(q, s))
            q = quantize(real, s_out).astype(np.int32)
        s = s_out
    return Tensor(dequantize(q, s))


# ----------------------------------------------------------------------------
# FLOPs
# ----------------------------------------------------------------------------

def layer_flops(layer: LayerSpec, in_shape, out_shape) -> int:
    """2 x output elements x MACs per output element; elementwise layers count 0."""
    out_elems = int(np.prod(out_shape))
    kh, kw = layer.kernel
    if layer.kind == "conv2d":
        per = layer.in_channels * kh * kw
    elif layer.kind == "depthwise_conv2d":
        per = kh * kw
    elif layer.kind == "global_depthwise":
        per = int(in_shape[2] * in_shape[3])
    elif layer.kind == "linear":
        per = layer.in_channels
    else:
        return 0
    return 2 * out_elems * per


def count_flops(model: Model) -> int:
    shapes = model.shapes()
    return sum(layer_flops(layer, shapes[i], shapes[i + 1])
               for i, layer in enumerate(model.layers))
