"""Numeric array and image types, plus the preprocessing shared by both networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import InvalidInputError

DEFAULT_FILL = 114


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major n-d array, either f32 or symmetric-quantized i8.

    For i8 tensors the real value of an element is ``qscale * data``.
    """

    data: np.ndarray
    qscale: Optional[float] = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.dtype == np.float32:
            if self.qscale is not None:
                raise InvalidInputError("f32 tensor must not carry a qscale")
            if not np.all(np.isfinite(data)):
                raise InvalidInputError("f32 tensor contains non-finite values")
        elif data.dtype == np.int8:
            if self.qscale is None or not self.qscale > 0:
                raise InvalidInputError("i8 tensor needs a positive qscale")
        else:
            raise InvalidInputError(f"unsupported tensor dtype {data.dtype}")
        if data.ndim == 0 or any(d <= 0 for d in data.shape):
            raise InvalidInputError(f"tensor shape must be positive, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> str:
        return "i8" if self.data.dtype == np.int8 else "f32"

    def dequantize(self) -> np.ndarray:
        if self.dtype == "i8":
            return self.data.astype(np.float32) * np.float32(self.qscale)
        return self.data

    @classmethod
    def f32(cls, values) -> "Tensor":
        return cls(np.asarray(values, dtype=np.float32))

    def __repr__(self):
        q = f", qscale={self.qscale:g}" if self.qscale is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{q})"


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(f"image must be HxWx3, got {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise InvalidInputError("zero-sized image")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width: int, height: int, color=(0, 0, 0)) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = np.asarray(color, dtype=np.uint8)
        return cls(px)


@dataclass(frozen=True)
class LetterboxMeta:
    scale: float
    pad_left: float
    pad_top: float
    src_width: int
    src_height: int

    def to_letterbox(self, x, y):
        return x * self.scale + self.pad_left, y * self.scale + self.pad_top

    def to_source(self, x, y):
        return (x - self.pad_left) / self.scale, (y - self.pad_top) / self.scale


def sample_bilinear(img: Image, xs, ys) -> np.ndarray:
    """Vectorized bilinear lookup; coordinates outside the image clamp to the edge.

    Returns float64 values with shape ``xs.shape + (3,)``.
    """
    px = img.pixels.astype(np.float64)
    h, w = img.height, img.width
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = px[y0, x0] * (1 - fx) + px[y0, x1] * fx
    bottom = px[y1, x0] * (1 - fx) + px[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def bilinear_sample(img: Image, x: float, y: float) -> Tuple[float, float, float]:
    r, g, b = sample_bilinear(img, np.array(x), np.array(y))
    return float(r), float(g), float(b)


def to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def resize_bilinear(img: Image, new_w: int, new_h: int) -> Image:
    # pixel-center convention, so equal sizes reproduce the source exactly
    sx = img.width / new_w
    sy = img.height / new_h
    us = (np.arange(new_w) + 0.5) * sx - 0.5
    vs = (np.arange(new_h) + 0.5) * sy - 0.5
    xs, ys = np.meshgrid(us, vs)
    return Image(to_u8(sample_bilinear(img, xs, ys)))


def letterbox(img: Image, target_w: int, target_h: int,
              fill: int = DEFAULT_FILL) -> Tuple[Image, LetterboxMeta]:
    if target_w <= 0 or target_h <= 0:
        raise InvalidInputError("letterbox target must be positive")
    w, h = img.width, img.height
    r = min(target_w / w, target_h / h)
    new_w = min(target_w, max(1, round_half_up(w * r)))
    new_h = min(target_h, max(1, round_half_up(h * r)))
    pad_left = (target_w - new_w) // 2
    pad_top = (target_h - new_h) // 2

    if new_w == w and new_h == h:
        scaled = img.pixels
    else:
        scaled = resize_bilinear(img, new_w, new_h).pixels
    out = np.full((target_h, target_w, 3), fill, dtype=np.uint8)
    out[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = scaled
    meta = LetterboxMeta(scale=r, pad_left=float(pad_left), pad_top=float(pad_top),
                         src_width=w, src_height=h)
    return Image(out), meta


def normalize_to_tensor(img: Image) -> Tensor:
    """RGB u8 image -> f32 tensor (1, 3, H, W) with values pixel/255."""
    chw = img.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return Tensor(chw[None])
