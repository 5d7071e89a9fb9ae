"""Layer and model descriptions, shape inference, and the FTM container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from ..errors import (BadMagicError, DanglingRefError, ModelFormatError,
                      ShapeMismatchError, TruncatedError)
from ..tensor import Tensor

MAGIC = b"FTM1"
FORMAT_VERSION = 1

LAYER_KINDS = ("conv2d", "depthwise_conv2d", "linear", "prelu", "add_bias",
               "global_depthwise", "flatten", "l2norm")
MAC_KINDS = ("conv2d", "depthwise_conv2d", "linear", "global_depthwise")

# weight_refs each kind must (or may) carry
_REQUIRED_REFS = {
    "conv2d": ("weight",),
    "depthwise_conv2d": ("weight",),
    "linear": ("weight",),
    "global_depthwise": ("weight",),
    "prelu": ("alpha",),
    "add_bias": ("bias",),
    "flatten": (),
    "l2norm": (),
}
_OPTIONAL_REFS = {k: ("bias",) if k in MAC_KINDS else () for k in LAYER_KINDS}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    weight_refs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind {self.kind!r}")
        if self.name == "input":
            raise ModelFormatError("layer name 'input' is reserved")
        if self.stride < 1 or self.padding < 0:
            raise ShapeMismatchError(f"{self.name}: bad stride/padding")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatchError(f"{self.name}: channel counts must be positive")
        missing = [r for r in _REQUIRED_REFS[self.kind] if r not in self.weight_refs]
        extra = [r for r in self.weight_refs
                 if r not in _REQUIRED_REFS[self.kind] + _OPTIONAL_REFS[self.kind]]
        if missing or extra:
            raise ModelFormatError(
                f"{self.name}: bad weight_refs (missing {missing}, unexpected {extra})")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "weight_refs", dict(self.weight_refs))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "padding": self.padding,
            "weight_refs": dict(self.weight_refs),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        try:
            return cls(kind=d["kind"], name=d["name"],
                       in_channels=int(d["in_channels"]),
                       out_channels=int(d["out_channels"]),
                       kernel=tuple(d.get("kernel", (1, 1))),
                       stride=int(d.get("stride", 1)),
                       padding=int(d.get("padding", 0)),
                       weight_refs=d.get("weight_refs", {}))
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"malformed layer entry: {exc}") from exc


def _expected_weight_shapes(layer: LayerSpec, in_shape: Tuple[int, ...]) -> Dict[str, tuple]:
    kh, kw = layer.kernel
    c_in, c_out = layer.in_channels, layer.out_channels
    k = layer.kind
    if k == "conv2d":
        return {"weight": (c_out, c_in, kh, kw), "bias": (c_out,)}
    if k == "depthwise_conv2d":
        return {"weight": (c_out, 1, kh, kw), "bias": (c_out,)}
    if k == "global_depthwise":
        return {"weight": (c_out, 1, in_shape[2], in_shape[3]), "bias": (c_out,)}
    if k == "linear":
        return {"weight": (c_out, c_in), "bias": (c_out,)}
    if k == "prelu":
        return {"alpha": (c_out,)}
    if k == "add_bias":
        return {"bias": (c_out,)}
    return {}


def layer_output_shape(layer: LayerSpec, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Output shape for one layer, raising ShapeMismatchError on inconsistent geometry."""
    k = layer.kind
    name = layer.name
    if k in ("conv2d", "depthwise_conv2d", "global_depthwise"):
        if len(in_shape) != 4:
            raise ShapeMismatchError(f"{name}: expects a 4-D input, got {in_shape}")
        _, c, h, w = in_shape
        if c != layer.in_channels:
            raise ShapeMismatchError(f"{name}: in_channels {layer.in_channels} != {c}")
        if k == "global_depthwise":
            if layer.out_channels != c:
                raise ShapeMismatchError(f"{name}: depthwise layer must keep channels")
            return (1, c, 1, 1)
        if k == "depthwise_conv2d" and layer.out_channels != c:
            raise ShapeMismatchError(f"{name}: depthwise layer must keep channels")
        kh, kw = layer.kernel
        ho = (h + 2 * layer.padding - kh) // layer.stride + 1
        wo = (w + 2 * layer.padding - kw) // layer.stride + 1
        if kh < 1 or kw < 1 or ho < 1 or wo < 1:
            raise ShapeMismatchError(f"{name}: kernel does not fit input {in_shape}")
        return (1, layer.out_channels, ho, wo)
    if k == "linear":
        if len(in_shape) != 2 or in_shape[1] != layer.in_channels:
            raise ShapeMismatchError(f"{name}: linear expects (1, {layer.in_channels}), got {in_shape}")
        return (1, layer.out_channels)
    if k == "flatten":
        if len(in_shape) != 4:
            raise ShapeMismatchError(f"{name}: flatten expects a 4-D input")
        if in_shape[1] != layer.in_channels:
            raise ShapeMismatchError(f"{name}: in_channels {layer.in_channels} != {in_shape[1]}")
        feats = int(np.prod(in_shape[1:]))
        if layer.out_channels != feats:
            raise ShapeMismatchError(f"{name}: flatten out_channels must be {feats}")
        return (1, feats)
    # prelu, add_bias, l2norm: elementwise over channels
    if in_shape[1] != layer.in_channels or layer.out_channels != layer.in_channels:
        raise ShapeMismatchError(f"{name}: channel mismatch for {k} on {in_shape}")
    return tuple(in_shape)


@dataclass(frozen=True, eq=False)
class Model:
    """Sequential network. Quantized models carry ``act_scales`` for every layer."""

    layers: Tuple[LayerSpec, ...]
    weights: Mapping[str, Tensor]
    input_shape: Tuple[int, ...]
    embedding_dim: int
    act_scales: Optional[Mapping[str, float]] = None
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "weights", dict(self.weights))
        object.__setattr__(self, "_shapes", self._infer_shapes())

    @property
    def quantized(self) -> bool:
        return self.act_scales is not None

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self._shapes[-1]

    def shapes(self) -> List[Tuple[int, ...]]:
        """[input_shape, out_0, out_1, ...]."""
        return list(self._shapes)

    def _infer_shapes(self) -> List[Tuple[int, ...]]:
        if len(self.input_shape) not in (2, 4) or self.input_shape[0] != 1:
            raise ShapeMismatchError(f"input_shape must be (1,C,H,W) or (1,F), got {self.input_shape}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ModelFormatError("duplicate layer names")
        shapes = [self.input_shape]
        for layer in self.layers:
            in_shape = shapes[-1]
            out_shape = layer_output_shape(layer, in_shape)
            expected = _expected_weight_shapes(layer, in_shape)
            for role, ref in layer.weight_refs.items():
                if ref not in self.weights:
                    raise DanglingRefError(f"{layer.name}: weight_ref {ref!r} not in tensors")
                got = self.weights[ref].shape
                if got != expected[role]:
                    raise ShapeMismatchError(
                        f"{layer.name}.{role}: tensor {ref!r} has shape {got}, expected {expected[role]}")
            shapes.append(out_shape)
        if self.embedding_dim < 1:
            raise ShapeMismatchError("embedding_dim must be positive")
        out = shapes[-1]
        if self.layers and out[1] != self.embedding_dim:
            raise ShapeMismatchError(f"embedding_dim {self.embedding_dim} != output channels {out[1]}")
        return shapes


# ----------------------------------------------------------------------------
# FTM container
# ----------------------------------------------------------------------------

def dump_model(model: Model) -> bytes:
    blob = bytearray()
    records = []
    for name in sorted(model.weights):
        t = model.weights[name]
        raw = t.data.astype("<f4" if t.dtype == "f32" else "i1").tobytes()
        rec = {"name": name, "shape": list(t.shape), "dtype": t.dtype,
               "offset": len(blob), "byte_len": len(raw)}
        if t.dtype == "i8":
            rec["qscale"] = t.qscale
        records.append(rec)
        blob += raw
    header = {
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "embedding_dim": model.embedding_dim,
        "layers": [l.to_json() for l in model.layers],
        "tensors": records,
    }
    if model.act_scales is not None:
        header["act_scales"] = dict(model.act_scales)
    if model.meta:
        header["meta"] = model.meta
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + bytes(blob)


def load_model(data: bytes) -> Model:
    data = bytes(data)
    if data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedError("file shorter than the magic number")
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncatedError("missing header length")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if 8 + hlen > len(data):
        raise TruncatedError(f"header declares {hlen} bytes but only {len(data) - 8} remain")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ModelFormatError("header must be a JSON object")
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported version {header.get('version')!r}")
    blob = memoryview(data)[8 + hlen:]

    weights = {}
    try:
        records = header["tensors"]
        layer_entries = header["layers"]
        input_shape = tuple(header["input_shape"])
        embedding_dim = int(header["embedding_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"header missing field: {exc}") from exc

    for rec in records:
        try:
            name, shape, dtype = rec["name"], tuple(rec["shape"]), rec["dtype"]
            offset, nbytes = int(rec["offset"]), int(rec["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed tensor record: {exc}") from exc
        if dtype not in ("f32", "i8"):
            raise ModelFormatError(f"tensor {name!r}: unknown dtype {dtype!r}")
        if name in weights:
            raise ModelFormatError(f"duplicate tensor {name!r}")
        if offset < 0 or offset + nbytes > len(blob):
            raise TruncatedError(f"tensor {name!r} extends past end of blob")
        itemsize = 4 if dtype == "f32" else 1
        count = int(np.prod(shape)) if shape else 0
        if count <= 0 or count * itemsize != nbytes:
            raise ShapeMismatchError(f"tensor {name!r}: shape {shape} does not match {nbytes} bytes")
        arr = np.frombuffer(blob[offset:offset + nbytes],
                            dtype="<f4" if dtype == "f32" else "i1").reshape(shape)
        if dtype == "f32":
            weights[name] = Tensor(arr.astype(np.float32))
        else:
            qscale = rec.get("qscale")
            if not isinstance(qscale, (int, float)) or qscale <= 0:
                raise ModelFormatError(f"tensor {name!r}: i8 tensor needs positive qscale")
            weights[name] = Tensor(arr.astype(np.int8), qscale=float(qscale))

    layers = [LayerSpec.from_json(d) for d in layer_entries]
    return Model(layers=layers, weights=weights, input_shape=input_shape,
                 embedding_dim=embedding_dim, act_scales=header.get("act_scales"),
                 meta=header.get("meta", {}))


def read_model(path) -> Model:
    return load_model(Path(path).read_bytes())


def write_model(model: Model, path) -> None:
    Path(path).write_bytes(dump_model(model))
