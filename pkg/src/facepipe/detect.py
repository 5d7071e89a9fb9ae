"""Detector post-processing: head decoding, NMS, and letterbox unmapping."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, ShapeMismatchError
from .infer import Model, forward_f32, forward_i8
from .tensor import DEFAULT_FILL, Image, LetterboxMeta, Tensor, letterbox, normalize_to_tensor

CHANNELS_PER_ANCHOR = 16
STRIDES = (8, 16, 32)
DEFAULT_CONF = 0.5
DEFAULT_IOU = 0.45

Box = Tuple[float, float, float, float]
Point = Tuple[float, float]


@dataclass(frozen=True)
class Detection:
    """Face box, confidence, and five landmarks.

    Landmark order: left eye, right eye, nose, left mouth corner, right mouth corner.
    """

    box: Box
    score: float
    landmarks: Tuple[Point, ...]

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.box)
        if not (x1 < x2 and y1 < y2):
            raise InvalidInputError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError(f"score {self.score} outside [0, 1]")
        lms = tuple((float(x), float(y)) for x, y in self.landmarks)
        if len(lms) != 5:
            raise InvalidInputError("a detection needs exactly 5 landmarks")
        object.__setattr__(self, "box", (x1, y1, x2, y2))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "landmarks", lms)

    def to_json(self) -> dict:
        return {"box": list(self.box), "score": self.score,
                "landmarks": [list(p) for p in self.landmarks]}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(tuple(d["box"]), d["score"], tuple(tuple(p) for p in d["landmarks"]))


@dataclass(frozen=True)
class HeadSpec:
    stride: int
    anchors: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if self.stride not in STRIDES:
            raise ShapeMismatchError(f"stride must be one of {STRIDES}, got {self.stride}")
        anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        if not anchors:
            raise ShapeMismatchError("a head needs at least one anchor")
        object.__setattr__(self, "anchors", anchors)

    def grid(self, input_w: int, input_h: int) -> Tuple[int, int]:
        if input_w % self.stride or input_h % self.stride:
            raise ShapeMismatchError(f"input {input_w}x{input_h} not divisible by stride {self.stride}")
        return input_h // self.stride, input_w // self.stride


def decode_head(raw: Tensor, head: HeadSpec, conf_thresh: float) -> List[Detection]:
    """Decode one head into detections in letterboxed pixel coordinates.

    Per anchor the 16 channels are: tx, ty, tw, th, objectness,
    10 landmark offsets (x, y interleaved), class.
    """
    data = raw.dequantize() if raw.dtype == "i8" else raw.data
    if data.ndim != 4 or data.shape[0] != 1:
        raise ShapeMismatchError(f"head tensor must be (1, A*16, H, W), got {raw.shape}")
    n_anchor = len(head.anchors)
    if data.shape[1] != n_anchor * CHANNELS_PER_ANCHOR:
        raise ShapeMismatchError(
            f"head has {data.shape[1]} channels, expected {n_anchor}x{CHANNELS_PER_ANCHOR}")
    _, _, gh, gw = data.shape
    t = data.reshape(n_anchor, CHANNELS_PER_ANCHOR, gh, gw).astype(np.float64)
    s = float(head.stride)
    ii, jj = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64),
                         indexing="ij")
    out = []
    for a, (aw, ah) in enumerate(head.anchors):
        ta = t[a]
        score = expit(ta[4]) * expit(ta[15])
        keep = (score >= conf_thresh)
        if not keep.any():
            continue
        cx = (2.0 * expit(ta[0]) - 0.5 + jj) * s
        cy = (2.0 * expit(ta[1]) - 0.5 + ii) * s
        w = (2.0 * expit(ta[2])) ** 2 * aw
        h = (2.0 * expit(ta[3])) ** 2 * ah
        lx = ta[5:15:2] * aw + jj * s
        ly = ta[6:15:2] * ah + ii * s
        for i, j in zip(*np.nonzero(keep)):
            if w[i, j] <= 0 or h[i, j] <= 0:
                continue
            box = (cx[i, j] - w[i, j] / 2, cy[i, j] - h[i, j] / 2,
                   cx[i, j] + w[i, j] / 2, cy[i, j] + h[i, j] / 2)
            if not (box[0] < box[2] and box[1] < box[3]):
                continue
            lms = tuple((float(lx[k, i, j]), float(ly[k, i, j])) for k in range(5))
            out.append(Detection(box, float(min(score[i, j], 1.0)), lms))
    return out


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def rank_key(det: Detection):
    """Total order used by NMS: score descending, then x1, then y1."""
    return (-det.score, det.box[0], det.box[1])


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    if any(not np.isfinite(d.score) for d in dets):
        raise InvalidInputError("NMS needs finite scores")
    kept: List[Detection] = []
    for det in sorted(dets, key=rank_key):
        if all(iou(det.box, k.box) < iou_thresh for k in kept):
            kept.append(det)
    return kept


def unmap_coords(dets: Sequence[Detection], meta: LetterboxMeta) -> List[Detection]:
    """Letterboxed coordinates -> source image pixels, clamped to the image.

    Boxes that collapse to zero area after clamping (e.g. entirely inside the
    padding) are dropped.
    """
    w, h = meta.src_width, meta.src_height
    out = []
    for d in dets:
        x1, y1 = meta.to_source(d.box[0], d.box[1])
        x2, y2 = meta.to_source(d.box[2], d.box[3])
        x1, x2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
        y1, y2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
        if not (x1 < x2 and y1 < y2):
            continue
        lms = []
        for lx, ly in d.landmarks:
            px, py = meta.to_source(lx, ly)
            lms.append((min(max(px, 0.0), w), min(max(py, 0.0), h)))
        out.append(Detection((x1, y1, x2, y2), d.score, tuple(lms)))
    return out


# ----------------------------------------------------------------------------
# full detector
# ----------------------------------------------------------------------------

def head_for(model: Model, anchors: Optional[Mapping[int, Sequence]] = None) -> HeadSpec:
    """Head spec for a single-output detector model.

    The model's own ``meta["head"]`` wins; otherwise the stride is inferred
    from the output grid and anchors come from ``anchors``.
    """
    head_meta = model.meta.get("head") if model.meta else None
    if head_meta:
        return HeadSpec(int(head_meta["stride"]), tuple(map(tuple, head_meta["anchors"])))
    _, _, in_h, _ = model.input_shape
    out_h = model.output_shape[2]
    stride = in_h // out_h
    if anchors is None or stride not in anchors:
        raise ShapeMismatchError(f"no anchors configured for stride {stride}")
    return HeadSpec(stride, tuple(map(tuple, anchors[stride])))


def _as_heads(model) -> List[Model]:
    heads = [model] if isinstance(model, Model) else list(model)
    if not heads:
        raise InvalidInputError("detector needs at least one head model")
    shape = heads[0].input_shape
    if len(shape) != 4 or shape[1] != 3:
        raise ShapeMismatchError(f"detector input must be (1, 3, H, W), got {shape}")
    if any(m.input_shape != shape for m in heads):
        raise ShapeMismatchError("all detector heads must share one input shape")
    return heads


def detect_faces_timed(model: Union[Model, Sequence[Model]], img: Image,
                       conf: float = DEFAULT_CONF, iou_t: float = DEFAULT_IOU,
                       anchors: Optional[Mapping[int, Sequence]] = None,
                       fill: int = DEFAULT_FILL) -> Tuple[List[Detection], Dict[str, float]]:
    """Like :func:`detect_faces` but also returns per-phase wall times in ms."""
    heads = _as_heads(model)
    _, _, in_h, in_w = heads[0].input_shape
    specs = [head_for(m, anchors) for m in heads]
    for spec in specs:
        spec.grid(in_w, in_h)

    t0 = time.perf_counter()
    boxed, meta = letterbox(img, in_w, in_h, fill)
    x = normalize_to_tensor(boxed)
    t1 = time.perf_counter()
    raws = [forward_i8(m, x) if m.quantized else forward_f32(m, x) for m in heads]
    t2 = time.perf_counter()
    cands = []
    for raw, spec in zip(raws, specs):
        cands.extend(decode_head(raw, spec, conf))
    dets = unmap_coords(nms(cands, iou_t), meta)
    t3 = time.perf_counter()
    timings = {"pre_ms": (t1 - t0) * 1e3, "infer_ms": (t2 - t1) * 1e3,
               "post_ms": (t3 - t2) * 1e3}
    return dets, timings


def detect_faces(model: Union[Model, Sequence[Model]], img: Image,
                 conf: float = DEFAULT_CONF, iou_t: float = DEFAULT_IOU,
                 anchors: Optional[Mapping[int, Sequence]] = None,
                 fill: int = DEFAULT_FILL) -> List[Detection]:
    """letterbox -> normalize -> forward -> decode -> NMS -> unmap.

    ``model`` is one head model or a list of them sharing an input shape.
    """
    return detect_faces_timed(model, img, conf, iou_t, anchors, fill)[0]


def detections_to_json(dets: Sequence[Detection], image: str, width: int, height: int) -> dict:
    return {"image": image, "width": width, "height": height,
            "detections": [d.to_json() for d in dets]}


def detections_from_json(doc: dict) -> List[Detection]:
    return [Detection.from_json(d) for d in doc.get("detections", [])]
