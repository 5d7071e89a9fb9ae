"""Layer kernels on plain ndarrays.

The MAC kernels are dtype-generic: called with float32 arrays they compute in
f32, called with int32 arrays they accumulate in int32 (the i8 path).
Activations are always batch-1 NCHW or (1, F).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatchError

L2_EPS = 1e-12


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation with zero padding. weight is (O, C, kh, kw)."""
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeMismatchError(f"conv2d: input has {x.shape[1]} channels, weight expects {c}")
    win = _windows(x, kh, kw, stride, pad)  # (1, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (1, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def depthwise_conv2d(x, weight, bias=None, stride=1, pad=0):
    """Per-channel cross-correlation. weight is (C, 1, kh, kw)."""
    c, _, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeMismatchError(f"depthwise_conv2d: input has {x.shape[1]} channels, weight expects {c}")
    win = _windows(x, kh, kw, stride, pad)
    out = np.einsum("nchwij,cij->nchw", win, weight[:, 0])
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def global_depthwise(x, weight, bias=None):
    """Depthwise conv whose kernel covers the whole feature map; output (1, C, 1, 1)."""
    if weight.shape[0] != x.shape[1] or weight.shape[2:] != x.shape[2:]:
        raise ShapeMismatchError(f"global_depthwise: weight {weight.shape} vs input {x.shape}")
    out = np.einsum("nchw,chw->nc", x, weight[:, 0])[:, :, None, None]
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def linear(x, weight, bias=None):
    """y = x W^T (+ b). weight is (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out += bias.reshape(1, -1)
    return out


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x, alpha):
    return np.where(x >= 0, x, _channel_view(alpha, x.ndim) * x)


def add_bias(x, bias):
    return x + _channel_view(bias, x.ndim)


def flatten(x):
    return x.reshape(x.shape[0], -1)


def l2norm(x):
    flat = x.reshape(x.shape[0], -1)
    norm = np.sqrt(np.sum(flat.astype(np.float64) ** 2, axis=1))
    denom = np.maximum(norm, L2_EPS).astype(x.dtype)
    return (flat / denom[:, None]).reshape(x.shape).astype(x.dtype)
