"""Deterministic fixture models and synthetic frames.

The fixture detector is a single stride-32 head: a 32x32 patchify
convolution whose objectness responds to strongly red patches. Synthetic
faces are 32x32 red tiles, aligned to the detector grid, with an
identity-specific texture in the green and blue channels, so the whole
detect -> align -> embed -> identify chain runs without downloaded weights.
"""

from __future__ import annotations

import copy
from typing import List, Sequence, Tuple

import numpy as np

from .align import DEFAULT_TEMPLATE
from .infer import Model, ModelBuilder, calibrate, forward_f32, quantize_model
from .tensor import Image, normalize_to_tensor

FACE_SIZE = 32
DETECTOR_STRIDE = 32
BACKGROUND = (96, 96, 96)

# objectness logit = OBJ_GAIN * (mean red - mean green) - OBJ_OFFSET
OBJ_GAIN = 40.0
OBJ_OFFSET = 10.0
CLASS_LOGIT = 20.0

TEXTURE_CELLS = 8

# identities at or above this are reserved for fitting/calibrating fixtures
REFERENCE_IDENTITIES = 5000


def make_detector(input_size: int = 640) -> Model:
    s = DETECTOR_STRIDE
    n = s * s
    w = np.zeros((16, 3, s, s), dtype=np.float32)
    bias = np.zeros(16, dtype=np.float32)
    w[4, 0] = OBJ_GAIN / n
    w[4, 1] = -OBJ_GAIN / n
    bias[4] = -OBJ_OFFSET
    # landmarks sit at the template layout scaled into the cell: lm = t * anchor + j * stride
    tpl = np.asarray(DEFAULT_TEMPLATE) / 112.0
    bias[5:15:2] = tpl[:, 0]
    bias[6:15:2] = tpl[:, 1]
    bias[15] = CLASS_LOGIT
    meta = {"role": "detector", "head": {"stride": s, "anchors": [[FACE_SIZE, FACE_SIZE]]}}
    return ModelBuilder((1, 3, input_size, input_size), meta).conv2d(w, bias, stride=s).build()


def make_embedder(embedding_dim: int = 128, seed: int = 7, width: int = 64) -> Model:
    """MobileFaceNet-flavoured micro-net: conv/depthwise/pointwise blocks with
    PReLU, a global depthwise pool, a linear projection, and l2norm.

    Weights are random except for two fitted pieces: the pool bias centers
    the pooled features over a bank of reference identities (so embeddings of
    different identities are near-orthogonal), and the projection is
    semi-orthogonal, which preserves those cosines.
    """
    rng = np.random.default_rng(seed)

    def he(*shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def small(n):
        return rng.normal(0.0, 0.05, size=n)

    stem = he(8, 3, 3, 3, fan_in=27)
    # zero-mean stem kernels ignore flat colour and respond to texture
    stem -= stem.mean(axis=(1, 2, 3), keepdims=True)
    b = ModelBuilder((1, 3, 112, 112), {"role": "embedder"})
    b.conv2d(stem, small(8), stride=2, padding=1).prelu(0.25)
    b.depthwise(he(8, 1, 3, 3, fan_in=9), small(8), stride=2, padding=1).prelu(0.25)
    b.conv2d(he(16, 8, 1, 1, fan_in=8), small(16)).prelu(0.25)
    b.depthwise(he(16, 1, 3, 3, fan_in=9), small(16), stride=2, padding=1)
    b.conv2d(he(width, 16, 1, 1, fan_in=16), small(width)).prelu(0.25)
    pool = he(width, 1, b.shape[2], b.shape[3], fan_in=b.shape[2] * b.shape[3])

    trunk = copy.deepcopy(b).global_depthwise(pool).build()
    feats = np.array([forward_f32(trunk, normalize_to_tensor(f)).data.ravel()
                      for f in aligned_faces(64, start=REFERENCE_IDENTITIES)], dtype=np.float64)
    b.global_depthwise(pool, -feats.mean(axis=0))
    b.flatten()
    if embedding_dim >= width:
        proj, _ = np.linalg.qr(rng.normal(size=(embedding_dim, width)))
    else:
        proj = np.linalg.qr(rng.normal(size=(width, embedding_dim)))[0].T
    b.linear(proj)
    b.l2norm()
    return b.build()


def render_face(identity: int, size: int = FACE_SIZE) -> np.ndarray:
    """size x size x 3 tile: saturated red with an identity texture in G/B."""
    rng = np.random.default_rng(10_000 + identity)
    coarse = rng.uniform(0.0, 1.0, size=(2, TEXTURE_CELLS, TEXTURE_CELLS))
    # nearest-neighbour upsample keeps the texture blocky
    rep = -(-size // TEXTURE_CELLS)
    tex = np.repeat(np.repeat(coarse, rep, axis=1), rep, axis=2)[:, :size, :size]
    tile = np.empty((size, size, 3), dtype=np.uint8)
    tile[..., 0] = 235
    tile[..., 1] = np.round(tex[0] * 60).astype(np.uint8)
    tile[..., 2] = np.round(tex[1] * 255).astype(np.uint8)
    for x, y in np.asarray(DEFAULT_TEMPLATE[:2]) * size / 112.0:
        xi, yi = int(x), int(y)
        tile[max(yi - 1, 0):yi + 2, max(xi - 1, 0):xi + 2, 2] = 0
    return tile


def face_cells(k: int, grid: int) -> List[Tuple[int, int]]:
    """Row-major (row, col) cells two apart, so planted faces never overlap."""
    cells = [(i, j) for i in range(1, grid - 1, 2) for j in range(1, grid - 1, 2)]
    if k > len(cells):
        raise ValueError(f"at most {len(cells)} faces fit a {grid}x{grid} grid")
    return cells[:k]


def synthetic_frame(k: int, size: int = 640, identities: Sequence[int] = None
                    ) -> Tuple[Image, List[Tuple[float, float, float, float]]]:
    """Frame with ``k`` planted faces; returns the image and their boxes."""
    identities = list(range(k)) if identities is None else list(identities)
    if len(identities) != k:
        raise ValueError("need one identity per face")
    px = np.empty((size, size, 3), dtype=np.uint8)
    px[...] = BACKGROUND
    boxes = []
    for (i, j), ident in zip(face_cells(k, size // DETECTOR_STRIDE), identities):
        y, x = i * DETECTOR_STRIDE, j * DETECTOR_STRIDE
        px[y:y + FACE_SIZE, x:x + FACE_SIZE] = render_face(ident)
        boxes.append((float(x), float(y), float(x + FACE_SIZE), float(y + FACE_SIZE)))
    return Image(px), boxes


def aligned_faces(n: int, start: int = 0) -> List[Image]:
    """Pre-aligned 112x112 crops of synthetic identities start..start+n-1."""
    from .align import align_face
    from .detect import Detection

    out = []
    for ident in range(start, start + n):
        img, boxes = synthetic_frame(1, size=3 * DETECTOR_STRIDE, identities=[ident])
        x1, y1, _, _ = boxes[0]
        lms = tuple((x1 + x * FACE_SIZE / 112.0, y1 + y * FACE_SIZE / 112.0)
                    for x, y in DEFAULT_TEMPLATE)
        out.append(align_face(img, Detection(boxes[0], 1.0, lms)))
    return out


def calibrated_embedder(model: Model, n_samples: int = 16) -> Model:
    """int8 copy of ``model`` calibrated on synthetic aligned faces."""
    samples = [normalize_to_tensor(f) for f in aligned_faces(n_samples, start=REFERENCE_IDENTITIES + 1000)]
    return quantize_model(model, calibrate(model, samples))


def calibrated_detector(model: Model, n_samples: int = 4) -> Model:
    size = model.input_shape[2]
    samples = [normalize_to_tensor(synthetic_frame(k, size)[0]) for k in range(1, n_samples + 1)]
    return quantize_model(model, calibrate(model, samples))
