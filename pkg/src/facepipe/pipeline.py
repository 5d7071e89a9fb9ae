"""End-to-end detect -> align -> embed -> identify, plus its benchmark drivers."""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

from . import fixtures
from .align import ALIGNED_SIZE, align_face, crop_face
from .bench import DEFAULT_WARMUP, PerfReport, measure, sweep_faces
from .config import Config
from .detect import Detection, detect_faces
from .errors import BenchmarkError, InvalidInputError, ModelError
from .infer import Model, read_model
from .recognize import Embedding, Gallery, MatchResult, embed_face, identify
from .tensor import Image

THREADS_ENV = "FACEPIPE_THREADS"

log = logging.getLogger(__name__)


def worker_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def load_or_fixture(path: Optional[str], role: str, cfg: Config) -> Model:
    """Model from ``path``; with no path, the built-in fixture for ``role``."""
    if path is None:
        if role == "detector":
            return fixtures.make_detector(cfg.detector.input_size)
        return fixtures.make_embedder(cfg.embedder.embedding_dim)
    if not os.path.isfile(path):
        raise ModelError(f"model not found: {path}")
    return read_model(path)


def input_size(detector: Union[Model, Sequence[Model]]) -> int:
    model = detector if isinstance(detector, Model) else detector[0]
    return model.input_shape[2]


@dataclass
class FacePipeline:
    """Bundles the models and settings for one run.

    ``detector`` may be a list of head models. ``embedder`` may be None for
    detection-only use. An f32 embedder asked to run at i8 is calibrated on
    synthetic faces first.
    """

    detector: Union[Model, Sequence[Model]]
    embedder: Optional[Model]
    config: Config = field(default_factory=Config)
    precision: str = "f32"

    def __post_init__(self):
        if self.embedder is not None and self.precision == "i8" and not self.embedder.quantized:
            log.warning("embedder is not quantized; calibrating on synthetic faces")
            self.embedder = fixtures.calibrated_embedder(self.embedder)

    @classmethod
    def from_config(cls, cfg: Config) -> "FacePipeline":
        det = load_or_fixture(cfg.detector.model_path, "detector", cfg)
        emb = load_or_fixture(cfg.embedder.model_path, "embedder", cfg)
        return cls(det, emb, cfg, cfg.embedder.precision)

    def detect(self, img: Image) -> List[Detection]:
        d = self.config.detector
        return detect_faces(self.detector, img, d.conf_thresh, d.iou_thresh, d.anchors, d.fill)

    def crop(self, img: Image, det: Detection) -> Image:
        size = self.embedder.input_shape[2] if self.embedder is not None else ALIGNED_SIZE
        if self.config.embedder.align:
            return align_face(img, det, self.config.embedder.template, size)
        return crop_face(img, det, size)

    def embed(self, crop: Image) -> Embedding:
        return embed_face(self.embedder, crop, self.precision)

    def process(self, img: Image, gallery: Gallery) -> List[Tuple[Detection, MatchResult]]:
        dets = self.detect(img)
        return self.recognize(img, dets, gallery)

    def recognize(self, img, dets, gallery) -> List[Tuple[Detection, MatchResult]]:
        threshold = self.config.verify.threshold
        return [(d, identify(gallery, self.embed(self.crop(img, d)), threshold)) for d in dets]


# ----------------------------------------------------------------------------
# benchmark drivers
# ----------------------------------------------------------------------------

def bench_detect(pipe: FacePipeline, faces: int, frames: int, warmup: int = DEFAULT_WARMUP,
                 precision: str = "f32") -> PerfReport:
    img, _ = fixtures.synthetic_frame(faces, input_size(pipe.detector))
    model = pipe.detector
    if precision == "i8":
        heads = [model] if isinstance(model, Model) else list(model)
        model = [h if h.quantized else fixtures.calibrated_detector(h) for h in heads]
    d = pipe.config.detector
    return measure(lambda im: detect_faces(model, im, d.conf_thresh, d.iou_thresh, d.anchors, d.fill),
                   img, warmup, frames, "detect", precision, faces)


def bench_embed(pipe: FacePipeline, face_counts: Sequence[int], frames: int,
                warmup: int = DEFAULT_WARMUP) -> List[PerfReport]:
    pool = fixtures.aligned_faces(max(max(face_counts, default=0), 1))
    return sweep_faces(pipe.embed, pool, face_counts, pipe.precision, frames, warmup)


def bench_pipeline(pipe: FacePipeline, faces: int, frames: int, warmup: int = DEFAULT_WARMUP,
                   gallery: Optional[Gallery] = None, threads: Optional[int] = None) -> PerfReport:
    """Per-frame end-to-end latency on a synthetic frame carrying ``faces`` faces.

    With two or more worker threads, detection of frame t+1 overlaps recognition
    of frame t through a queue of depth 2; latency is still start-of-detect to
    end-of-identify for each frame.
    """
    img, _ = fixtures.synthetic_frame(faces, input_size(pipe.detector))
    if gallery is None:
        gallery = Gallery()
        for ident, crop in enumerate(fixtures.aligned_faces(max(faces, 1))):
            gallery = gallery.enroll(f"id{ident:03d}", f"identity {ident}", pipe.embed(crop))
    threads = worker_threads() if threads is None else threads
    if threads <= 1:
        return measure(lambda im: pipe.process(im, gallery), img, warmup, frames,
                       "pipeline", pipe.precision, faces)

    for _ in range(warmup):
        pipe.process(img, gallery)
    samples = _overlapped(pipe, img, gallery, frames)
    return PerfReport.from_samples("pipeline", pipe.precision, faces, samples)


def _overlapped(pipe, img, gallery, frames) -> List[float]:
    q: "queue.Queue" = queue.Queue(maxsize=2)
    failure = []

    def producer():
        try:
            for _ in range(frames):
                t0 = time.perf_counter_ns()
                q.put((t0, pipe.detect(img)))
        except Exception as exc:  # surfaced to the consumer below
            failure.append(exc)
        finally:
            q.put(None)

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    samples = []
    while True:
        item = q.get()
        if item is None:
            break
        t0, dets = item
        pipe.recognize(img, dets, gallery)
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    worker.join()
    if failure:
        raise BenchmarkError(f"pipeline detection failed: {failure[0]}") from failure[0]
    return samples
