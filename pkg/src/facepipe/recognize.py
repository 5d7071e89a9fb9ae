"""Embeddings, the identity gallery, and verification/identification decisions."""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (DimensionMismatchError, InvalidInputError, NotFoundError,
                     QuantizationError)
from .infer import Model, forward_f32, forward_i8
from .tensor import Image, normalize_to_tensor

DEFAULT_THRESHOLD = 0.5
GALLERY_VERSION = 1
NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise InvalidInputError("embedding must be a non-empty 1-D vector")
        norm = float(np.sqrt(np.sum(v.astype(np.float64) ** 2)))
        if abs(norm - 1.0) > NORM_TOL:
            raise InvalidInputError(f"embedding norm {norm} is not 1")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_vector(cls, values) -> "Embedding":
        v = np.asarray(values, dtype=np.float64).ravel()
        norm = np.sqrt(np.sum(v * v))
        if not norm > 0 or not np.isfinite(norm):
            raise InvalidInputError("cannot normalize a zero or non-finite vector")
        return cls((v / norm).astype(np.float32))

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class MatchResult:
    id: Optional[str]
    similarity: float
    accepted: bool

    def to_json(self) -> dict:
        return {"id": self.id, "similarity": self.similarity, "accepted": self.accepted}


@dataclass(frozen=True)
class GalleryEntry:
    id: str
    display_name: str
    embeddings: Tuple[Embedding, ...]
    enrolled_at: str

    def __post_init__(self):
        if not self.embeddings:
            raise InvalidInputError(f"entry {self.id!r} has no embeddings")
        if len({e.dim for e in self.embeddings}) != 1:
            raise DimensionMismatchError(f"entry {self.id!r} mixes embedding sizes")


def embed_face(model: Model, aligned: Image, precision: str = "f32") -> Embedding:
    want = model.input_shape[2:]
    if (aligned.height, aligned.width) != tuple(want):
        raise InvalidInputError(f"aligned face is {aligned.width}x{aligned.height}, "
                                f"model expects {want[1]}x{want[0]}")
    x = normalize_to_tensor(aligned)
    if precision == "f32":
        out = forward_f32(model, x)
    elif precision == "i8":
        if not model.quantized:
            raise QuantizationError("i8 precision needs a quantized embedder")
        out = forward_i8(model, x)
    else:
        raise InvalidInputError(f"unknown precision {precision!r}")
    return Embedding.from_vector(out.data)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise DimensionMismatchError(f"embedding sizes differ: {a.dim} vs {b.dim}")
    dot = float(np.sum(a.vector.astype(np.float64) * b.vector.astype(np.float64)))
    return min(1.0, max(-1.0, dot))


def verify(a: Embedding, b: Embedding, threshold: float = DEFAULT_THRESHOLD) -> MatchResult:
    """One-to-one decision. The result carries no gallery id."""
    sim = cosine(a, b)
    return MatchResult(None, sim, sim >= threshold)


def identify(gallery: "Gallery", probe: Embedding,
             threshold: float = DEFAULT_THRESHOLD) -> MatchResult:
    """Best-matching entry by max-over-embeddings cosine; ties go to the smallest id."""
    if not gallery.entries:
        return MatchResult(None, -1.0, False)
    if probe.dim != gallery.dim:
        raise DimensionMismatchError(f"probe has {probe.dim} dims, gallery {gallery.dim}")
    best_id, best_sim = None, -np.inf
    for entry in gallery.entries:
        sim = max(cosine(probe, e) for e in entry.embeddings)
        if sim > best_sim or (sim == best_sim and entry.id < best_id):
            best_id, best_sim = entry.id, sim
    return MatchResult(best_id, best_sim, best_sim >= threshold)


def pairwise_accuracy(pairs: Sequence[Tuple[Embedding, Embedding, bool]],
                      threshold: float = DEFAULT_THRESHOLD) -> float:
    if not pairs:
        raise InvalidInputError("no pairs to score")
    hits = sum(verify(a, b, threshold).accepted == bool(same) for a, b, same in pairs)
    return hits / len(pairs)


def sweep_thresholds(pairs, thresholds: Optional[Iterable[float]] = None):
    """Accuracy at each candidate threshold.

    By default the candidates are every observed similarity plus one value
    above the maximum, which covers every distinct decision rule.
    """
    sims = np.array([cosine(a, b) for a, b, _ in pairs])
    labels = np.array([bool(s) for _, _, s in pairs])
    if thresholds is None:
        thresholds = sorted(set(sims.tolist()) | {float(np.nextafter(sims.max(), np.inf))})
    return [(float(t), float(np.mean((sims >= t) == labels))) for t in thresholds]


def best_threshold(pairs) -> Tuple[float, float]:
    """(threshold, accuracy) with the highest accuracy; lowest threshold wins ties."""
    return max(sweep_thresholds(pairs), key=lambda ta: (ta[1], -ta[0]))


# ----------------------------------------------------------------------------
# gallery
# ----------------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


@dataclass(frozen=True)
class Gallery:
    """Immutable identity store; mutations return a new gallery."""

    dim: Optional[int] = None
    entries: Tuple[GalleryEntry, ...] = ()

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("gallery ids must be unique")
        for e in self.entries:
            if e.embeddings[0].dim != self.dim:
                raise DimensionMismatchError(f"entry {e.id!r} does not match gallery dim {self.dim}")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.id)))

    def __len__(self):
        return len(self.entries)

    def get(self, id: str) -> GalleryEntry:
        for e in self.entries:
            if e.id == id:
                return e
        raise NotFoundError(f"no gallery entry {id!r}")

    def enroll(self, id: str, name: str, embedding: Embedding,
               enrolled_at: Optional[str] = None) -> "Gallery":
        if self.dim is not None and embedding.dim != self.dim:
            raise DimensionMismatchError(f"embedding has {embedding.dim} dims, gallery {self.dim}")
        entries = list(self.entries)
        for i, e in enumerate(entries):
            if e.id == id:
                entries[i] = replace(e, embeddings=e.embeddings + (embedding,))
                break
        else:
            entries.append(GalleryEntry(id, name, (embedding,), enrolled_at or _now()))
        return Gallery(embedding.dim, tuple(entries))

    def remove(self, id: str) -> "Gallery":
        self.get(id)
        rest = tuple(e for e in self.entries if e.id != id)
        return Gallery(self.dim if rest else None, rest)

    def to_json(self) -> dict:
        return {
            "version": GALLERY_VERSION,
            "dim": self.dim,
            "entries": [{"id": e.id, "display_name": e.display_name,
                         "enrolled_at": e.enrolled_at,
                         "embeddings": [[float(v) for v in emb.vector] for emb in e.embeddings]}
                        for e in self.entries],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Gallery":
        if doc.get("version") != GALLERY_VERSION:
            raise InvalidInputError(f"unsupported gallery version {doc.get('version')!r}")
        entries = []
        for e in doc.get("entries", []):
            embs = tuple(Embedding(np.asarray(v, dtype=np.float32)) for v in e["embeddings"])
            entries.append(GalleryEntry(e["id"], e.get("display_name", e["id"]), embs,
                                        e.get("enrolled_at", "")))
        dim = doc.get("dim")
        return cls(int(dim) if dim is not None and entries else None, tuple(entries))

    def save(self, path) -> None:
        """Atomic write: readers of ``path`` see either the old or the new file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(self.to_json(), fh, indent=1)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "Gallery":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class GalleryStore:
    """Thread-safe holder: readers take immutable snapshots, writers swap under a lock."""

    gallery: Gallery = field(default_factory=Gallery)
    path: Optional[Path] = None

    def __post_init__(self):
        self._lock = threading.Lock()

    def snapshot(self) -> Gallery:
        return self.gallery

    def enroll(self, id, name, embedding) -> Gallery:
        with self._lock:
            self.gallery = self.gallery.enroll(id, name, embedding)
            if self.path is not None:
                self.gallery.save(self.path)
            return self.gallery

    def remove(self, id) -> Gallery:
        with self._lock:
            self.gallery = self.gallery.remove(id)
            if self.path is not None:
                self.gallery.save(self.path)
            return self.gallery
