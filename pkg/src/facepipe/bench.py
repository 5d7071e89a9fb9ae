"""Latency/FPS measurement, face-count sweeps, report files, and detection AP."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from fractions import Fraction
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .detect import iou
from .errors import BenchmarkError, EmptyGroundTruthError, InvalidInputError

DEFAULT_WARMUP = 10
STAGES = ("detect", "embed", "pipeline")
PRECISIONS = ("f32", "i8")
CSV_COLUMNS = ["stage", "precision", "faces", "frames", "mean_ms", "p50", "p90", "p99",
               "min", "max", "fps"]
LATENCY_KEYS = ("mean", "p50", "p90", "p99", "min", "max")


def nearest_rank(sorted_samples: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of an ascending sample list."""
    n = len(sorted_samples)
    rank = max(1, math.ceil(pct * n / 100.0))
    return sorted_samples[min(rank, n) - 1]


@dataclass(frozen=True)
class PerfReport:
    stage: str
    precision: str
    faces_per_frame: int
    frames: int
    latency_ms: Mapping[str, float]
    fps: float

    def __post_init__(self):
        lat = self.latency_ms
        if not (lat["min"] <= lat["p50"] <= lat["p90"] <= lat["p99"] <= lat["max"]):
            raise InvalidInputError(f"percentiles out of order: {dict(lat)}")
        if not self.fps > 0:
            raise InvalidInputError("fps must be positive")

    @property
    def fps_p50(self) -> float:
        return 1000.0 / self.latency_ms["p50"] if self.latency_ms["p50"] > 0 else math.inf

    @classmethod
    def from_samples(cls, stage, precision, faces, samples_ms) -> "PerfReport":
        if not samples_ms:
            raise BenchmarkError("no timed samples")
        s = sorted(samples_ms)
        mean = math.fsum(s) / len(s)
        lat = {"mean": mean, "p50": nearest_rank(s, 50), "p90": nearest_rank(s, 90),
               "p99": nearest_rank(s, 99), "min": s[0], "max": s[-1]}
        # a zero mean only happens below timer resolution
        fps = 1000.0 / mean if mean > 0 else math.inf
        return cls(stage, precision, int(faces), len(s), lat, fps)

    def to_json(self) -> dict:
        d = asdict(self)
        d["latency_ms"] = dict(self.latency_ms)
        d["fps_p50"] = self.fps_p50
        return d

    def csv_row(self) -> List[str]:
        lat = self.latency_ms
        vals = [lat["mean"], lat["p50"], lat["p90"], lat["p99"], lat["min"], lat["max"], self.fps]
        return [self.stage, self.precision, str(self.faces_per_frame), str(self.frames)] + \
            [repr(float(v)) for v in vals]


def measure(stage_fn: Callable, workload=None, warmup: int = DEFAULT_WARMUP,
            frames: int = 100, stage: str = "pipeline", precision: str = "f32",
            faces: int = 0) -> PerfReport:
    """Time ``frames`` calls of ``stage_fn(workload)`` after ``warmup`` untimed calls."""
    if frames < 1:
        raise InvalidInputError("frames must be >= 1")
    if warmup < 0:
        raise InvalidInputError("warmup must be >= 0")
    clock = time.perf_counter_ns
    samples = []
    try:
        for _ in range(warmup):
            stage_fn(workload)
        for _ in range(frames):
            t0 = clock()
            stage_fn(workload)
            samples.append((clock() - t0) / 1e6)
    except Exception as exc:
        raise BenchmarkError(f"stage {stage!r} failed after {len(samples)} frames: {exc}") from exc
    return PerfReport.from_samples(stage, precision, faces, samples)


def sweep_faces(embed_fn: Callable, faces: Sequence, face_counts: Sequence[int],
                precision: str = "f32", frames: int = 20,
                warmup: int = DEFAULT_WARMUP) -> List[PerfReport]:
    """One embed-stage report per face count ``k``: each frame embeds k faces.

    ``faces`` is a pool of aligned crops, cycled when k exceeds its length.
    Counts are timed round-robin (one frame of every k per round) so that a
    burst of background load is shared across counts instead of landing on
    whichever count happened to be running.
    """
    if frames < 1:
        raise InvalidInputError("frames must be >= 1")
    if warmup < 0:
        raise InvalidInputError("warmup must be >= 0")
    counts = list(face_counts)
    for k in counts:
        if k < 0:
            raise InvalidInputError("face counts must be non-negative")
        if k and not faces:
            raise InvalidInputError("need at least one face crop to sweep")
    batches = [[faces[i % len(faces)] for i in range(k)] for k in counts]
    clock = time.perf_counter_ns
    samples: List[List[float]] = [[] for _ in counts]
    try:
        for batch in batches:
            for _ in range(warmup):
                for f in batch:
                    embed_fn(f)
        for _ in range(frames):
            for batch, out in zip(batches, samples):
                t0 = clock()
                for f in batch:
                    embed_fn(f)
                out.append((clock() - t0) / 1e6)
    except Exception as exc:
        raise BenchmarkError(f"embed sweep failed: {exc}") from exc
    return [PerfReport.from_samples("embed", precision, k, s) for k, s in zip(counts, samples)]


# ----------------------------------------------------------------------------
# report files
# ----------------------------------------------------------------------------

def format_report(reports: Sequence[PerfReport], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([r.to_json() for r in reports], indent=1) + "\n"
    raise InvalidInputError(f"unknown report format {fmt!r}")


def emit_report(reports: Sequence[PerfReport], fmt: str, path) -> Path:
    """Write reports as CSV or JSON. Floats are written with repr, so they reload exactly."""
    text = format_report(reports, fmt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path, fmt: Optional[str] = None) -> List[PerfReport]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        out = []
        for row in rows:
            lat = {"mean": float(row["mean_ms"])}
            lat.update({k: float(row[k]) for k in LATENCY_KEYS[1:]})
            out.append(PerfReport(row["stage"], row["precision"], int(row["faces"]),
                                  int(row["frames"]), lat, float(row["fps"])))
        return out
    if fmt == "json":
        with open(path, encoding="utf-8") as fh:
            docs = json.load(fh)
        return [PerfReport(d["stage"], d["precision"], d["faces_per_frame"], d["frames"],
                           d["latency_ms"], d["fps"]) for d in docs]
    raise InvalidInputError(f"unknown report format {fmt!r}")


# ----------------------------------------------------------------------------
# average precision
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


def _valid_box(b) -> bool:
    return b[0] < b[2] and b[1] < b[3]


def pr_curve(dets: Mapping[str, Sequence[Tuple[Sequence[float], float]]],
             gt: Mapping[str, Sequence[Sequence[float]]], iou_thresh: float = 0.5,
             ignore: Optional[Mapping[str, Sequence[Sequence[float]]]] = None) -> PRCurve:
    """Precision/recall at every distinct score threshold, and all-point interpolated AP.

    ``dets`` maps image -> [(box, score)], ``gt`` maps image -> [box].
    Detections matching no counted box but overlapping an ``ignore`` box at
    ``iou_thresh`` are dropped from the ranking instead of counting as false
    positives.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise InvalidInputError("iou_thresh must lie in (0, 1)")
    n_gt = sum(len(v) for v in gt.values())
    if n_gt == 0:
        raise EmptyGroundTruthError("empty ground truth")
    for boxes in list(gt.values()) + list((ignore or {}).values()):
        if not all(_valid_box(b) for b in boxes):
            raise InvalidInputError("ground-truth boxes need x1<x2 and y1<y2")

    ranked = []
    for img in sorted(dets):
        for k, (box, score) in enumerate(dets[img]):
            if not _valid_box(box):
                raise InvalidInputError(f"invalid detection box {box}")
            ranked.append((-float(score), img, k, box))
    ranked.sort(key=lambda r: r[:3])

    used = {img: [False] * len(v) for img, v in gt.items()}
    flags, scores = [], []
    for neg_score, img, _, box in ranked:
        best, best_j = -1.0, None
        for j, g in enumerate(gt.get(img, ())):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o >= iou_thresh and o > best:
                best, best_j = o, j
        if best_j is not None:
            used[img][best_j] = True
            flags.append(1)
        elif ignore and any(iou(box, g) >= iou_thresh for g in ignore.get(img, ())):
            continue
        else:
            flags.append(0)
        scores.append(-neg_score)

    tp = np.cumsum(flags, dtype=np.float64)
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    # one operating point per distinct score: tied detections enter together,
    # so the curve does not depend on how ties happen to be ordered
    scores = np.asarray(scores)
    last_of_tie = np.append(scores[1:] != scores[:-1], True) if len(flags) else np.zeros(0, bool)
    tp, ranks = tp[last_of_tie], ranks[last_of_tie]
    recall = tp / n_gt
    precision = tp / ranks if len(tp) else np.zeros(0)
    return PRCurve(recall, precision, _interpolated_ap(tp, ranks, n_gt))


def _interpolated_ap(tp, ranks, n_gt) -> float:
    """Area under the precision envelope (best precision at this recall or
    any higher one), accumulated in exact rationals from the integer counts
    and rounded once, so e.g. a 5/6 curve gives exactly ``5 / 6``.
    """
    best = Fraction(0)
    area = Fraction(0)
    for i in range(len(tp) - 1, -1, -1):
        best = max(best, Fraction(int(tp[i]), int(ranks[i])))
        gain = int(tp[i]) - (int(tp[i - 1]) if i else 0)
        area += gain * best
    return float(area / n_gt)


def average_precision(dets, gt, iou_thresh: float = 0.5, ignore=None) -> float:
    return pr_curve(dets, gt, iou_thresh, ignore).ap


def load_ground_truth(doc: dict, difficulty: str = "all"):
    """GT JSON -> (counted boxes, ignored boxes), both keyed by image.

    With ``difficulty`` easy or hard, boxes tagged otherwise become ignored.
    """
    if difficulty not in ("all", "easy", "hard"):
        raise InvalidInputError(f"unknown difficulty {difficulty!r}")
    counted, ignored = {}, {}
    for item in doc.get("images", []):
        boxes = [tuple(map(float, b)) for b in item.get("boxes", [])]
        tags = item.get("difficulty") or ["easy"] * len(boxes)
        if len(tags) != len(boxes):
            raise InvalidInputError(f"{item.get('image')}: difficulty list length mismatch")
        keep = [b for b, t in zip(boxes, tags) if difficulty == "all" or t == difficulty]
        skip = [b for b, t in zip(boxes, tags) if not (difficulty == "all" or t == difficulty)]
        counted.setdefault(item["image"], []).extend(keep)
        ignored.setdefault(item["image"], []).extend(skip)
    return counted, ignored


def load_detection_set(docs) -> Dict[str, list]:
    """Detection JSON document(s) -> image -> [(box, score)]."""
    if isinstance(docs, dict):
        docs = docs.get("results", [docs])
    out: Dict[str, list] = {}
    for doc in docs:
        out.setdefault(doc["image"], []).extend(
            (tuple(map(float, d["box"])), float(d["score"])) for d in doc.get("detections", []))
    return out
