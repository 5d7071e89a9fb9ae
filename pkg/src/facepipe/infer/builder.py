"""Incremental construction of sequential models."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor
from .model import LayerSpec, Model, layer_output_shape


class ModelBuilder:
    """Appends layers while tracking the running activation shape.

    >>> b = ModelBuilder((1, 4))
    >>> _ = b.linear(np.eye(2, 4))
    >>> b.build().output_shape
    (1, 2)
    """

    def __init__(self, input_shape, meta=None):
        self.input_shape = tuple(input_shape)
        self.shape = self.input_shape
        self.layers = []
        self.weights = {}
        self.meta = dict(meta or {})

    def _add(self, kind, out_channels, kernel=(1, 1), stride=1, padding=0, **tensors):
        name = f"{kind}_{len(self.layers)}"
        refs = {}
        for role, value in tensors.items():
            if value is None:
                continue
            ref = f"{name}.{role}"
            self.weights[ref] = Tensor(np.asarray(value, dtype=np.float32))
            refs[role] = ref
        layer = LayerSpec(kind=kind, name=name, in_channels=self.shape[1],
                          out_channels=out_channels, kernel=kernel, stride=stride,
                          padding=padding, weight_refs=refs)
        self.shape = layer_output_shape(layer, self.shape)
        self.layers.append(layer)
        return self

    def conv2d(self, weight, bias=None, stride=1, padding=0):
        weight = np.asarray(weight)
        return self._add("conv2d", weight.shape[0], weight.shape[2:], stride, padding,
                         weight=weight, bias=bias)

    def depthwise(self, weight, bias=None, stride=1, padding=0):
        weight = np.asarray(weight)
        return self._add("depthwise_conv2d", weight.shape[0], weight.shape[2:], stride,
                         padding, weight=weight, bias=bias)

    def global_depthwise(self, weight, bias=None):
        weight = np.asarray(weight)
        return self._add("global_depthwise", weight.shape[0], weight.shape[2:],
                         weight=weight, bias=bias)

    def linear(self, weight, bias=None):
        weight = np.asarray(weight)
        return self._add("linear", weight.shape[0], weight=weight, bias=bias)

    def prelu(self, alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float32), (self.shape[1],))
        return self._add("prelu", self.shape[1], alpha=alpha)

    def add_bias(self, bias):
        return self._add("add_bias", self.shape[1], bias=bias)

    def flatten(self):
        return self._add("flatten", int(np.prod(self.shape[1:])))

    def l2norm(self):
        return self._add("l2norm", self.shape[1])

    def build(self) -> Model:
        dim = self.shape[1]
        return Model(layers=self.layers, weights=self.weights, input_shape=self.input_shape,
                     embedding_dim=dim, meta=self.meta)
