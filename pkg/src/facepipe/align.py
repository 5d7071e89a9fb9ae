"""Five-point similarity alignment onto the canonical 112x112 face template."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detect import Detection
from .errors import DegenerateConfigurationError, InvalidInputError
from .tensor import Image, sample_bilinear, to_u8

log = logging.getLogger(__name__)

ALIGNED_SIZE = 112

# Reference five-point layout for 112x112 crops used across public
# face-recognition toolkits (eyes, nose tip, mouth corners).
DEFAULT_TEMPLATE = (
    (38.2946, 51.6963),
    (73.5318, 51.5014),
    (56.0252, 71.7366),
    (41.5493, 92.3655),
    (70.7299, 92.2041),
)


@dataclass(frozen=True)
class SimilarityTransform:
    """x' = a*x - b*y + tx,  y' = b*x + a*y + ty."""

    a: float
    b: float
    tx: float
    ty: float

    @property
    def scale(self) -> float:
        return float(np.hypot(self.a, self.b))

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.b, self.a))

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([self.a * x - self.b * y + self.tx,
                         self.b * x + self.a * y + self.ty], axis=-1)

    def inverse(self) -> "SimilarityTransform":
        d = self.a * self.a + self.b * self.b
        if d == 0:
            raise DegenerateConfigurationError("transform has zero scale")
        a, b = self.a / d, -self.b / d
        return SimilarityTransform(a, b, -(a * self.tx - b * self.ty), -(b * self.tx + a * self.ty))

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, -self.b, self.tx], [self.b, self.a, self.ty]])


IDENTITY = SimilarityTransform(1.0, 0.0, 0.0, 0.0)


def residual(T: SimilarityTransform, src, dst) -> float:
    """Sum of squared distances between T(src) and dst."""
    return float(np.sum((T.apply(src) - np.asarray(dst, dtype=np.float64)) ** 2))


def solve_similarity(src, dst) -> SimilarityTransform:
    """Least-squares 4-parameter similarity mapping ``src`` points onto ``dst``.

    Solves the normal equations in centered coordinates, where they decouple
    into closed form.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise InvalidInputError(f"point sets must be matching (N, 2) arrays, got {src.shape}, {dst.shape}")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    s, d = src - ms, dst - md
    denom = float(np.sum(s * s))
    if denom <= 1e-12 * max(1.0, float(np.max(np.abs(src)))) ** 2:
        raise DegenerateConfigurationError("source points are coincident")
    a = float(np.sum(s[:, 0] * d[:, 0] + s[:, 1] * d[:, 1])) / denom
    b = float(np.sum(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0])) / denom
    tx = md[0] - (a * ms[0] - b * ms[1])
    ty = md[1] - (b * ms[0] + a * ms[1])
    return SimilarityTransform(a, b, float(tx), float(ty))


def warp_crop(img: Image, T: SimilarityTransform, out_w: int, out_h: int) -> Image:
    """Output pixel (u, v) samples the source at T^-1(u, v)."""
    if T.scale == 0:
        raise DegenerateConfigurationError("transform is not invertible")
    inv = T.inverse()
    us, vs = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    src = inv.apply(np.stack([us, vs], axis=-1))
    return Image(to_u8(sample_bilinear(img, src[..., 0], src[..., 1])))


def eye_order_ok(T: SimilarityTransform, landmarks) -> bool:
    mapped = T.apply(np.asarray(landmarks[:2], dtype=np.float64))
    return bool(mapped[0, 0] < mapped[1, 0])


def align_transform(det: Detection, template: Sequence = DEFAULT_TEMPLATE) -> SimilarityTransform:
    T = solve_similarity(det.landmarks, template)
    if not eye_order_ok(T, det.landmarks):
        log.warning("eye order inverted after alignment (box %s); landmark order may be wrong",
                    [round(v, 1) for v in det.box])
    return T


def align_face(img: Image, det: Detection, template: Sequence = DEFAULT_TEMPLATE,
               size: int = ALIGNED_SIZE) -> Image:
    return warp_crop(img, align_transform(det, template), size, size)


def crop_face(img: Image, det: Detection, size: int = ALIGNED_SIZE) -> Image:
    """Unaligned alternative: stretch the detection box to ``size`` x ``size``."""
    x1, y1, x2, y2 = det.box
    us = x1 + (np.arange(size) + 0.5) * (x2 - x1) / size - 0.5
    vs = y1 + (np.arange(size) + 0.5) * (y2 - y1) / size - 0.5
    xs, ys = np.meshgrid(us, vs)
    return Image(to_u8(sample_bilinear(img, xs, ys)))
