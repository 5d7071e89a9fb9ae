"""Run configuration: INI-style ``key = value`` sections, overridden by CLI flags.

Example::

    [detector]
    input_size = 640
    conf_thresh = 0.5
    anchors_8 = 4,5 8,10 13,16

    [embedder]
    precision = i8
    align = true

    [verify]
    threshold = 0.5
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .align import DEFAULT_TEMPLATE
from .errors import ConfigError

# Anchor sizes (w, h) in pixels per stride, following the conventions of the
# YOLOv5 face-detector family.
DEFAULT_ANCHORS = {
    8: ((4, 5), (8, 10), (13, 16)),
    16: ((23, 29), (43, 55), (73, 105)),
    32: ((146, 217), (231, 300), (335, 433)),
}


@dataclass(frozen=True)
class DetectorConfig:
    model_path: Optional[str] = None
    input_size: int = 640
    conf_thresh: float = 0.5
    iou_thresh: float = 0.45
    fill: int = 114
    anchors: Dict[int, Tuple[Tuple[float, float], ...]] = field(
        default_factory=lambda: dict(DEFAULT_ANCHORS))


@dataclass(frozen=True)
class EmbedderConfig:
    model_path: Optional[str] = None
    embedding_dim: int = 128
    precision: str = "f32"
    align: bool = True
    template: Tuple[Tuple[float, float], ...] = DEFAULT_TEMPLATE


@dataclass(frozen=True)
class VerifyConfig:
    threshold: float = 0.5


@dataclass(frozen=True)
class BenchConfig:
    warmup: int = 10
    frames: int = 100


@dataclass(frozen=True)
class Config:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "Config":
        d, e = self.detector, self.embedder
        for name, v in (("detector.conf_thresh", d.conf_thresh),
                        ("detector.iou_thresh", d.iou_thresh),
                        ("verify.threshold", self.verify.threshold)):
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if d.input_size <= 0 or d.input_size % 32:
            raise ConfigError(f"detector.input_size must be a positive multiple of 32, got {d.input_size}")
        if not 0 <= d.fill <= 255:
            raise ConfigError("detector.fill must be a byte value")
        for stride, anchors in d.anchors.items():
            if stride not in (8, 16, 32) or not anchors:
                raise ConfigError(f"bad anchors for stride {stride}")
            if any(w <= 0 or h <= 0 for w, h in anchors):
                raise ConfigError(f"anchors for stride {stride} must be positive")
        if len(e.template) != 5:
            raise ConfigError("embedder.template needs exactly 5 points")
        if e.precision not in ("f32", "i8"):
            raise ConfigError(f"embedder.precision must be f32 or i8, got {e.precision!r}")
        if e.embedding_dim < 1:
            raise ConfigError("embedder.embedding_dim must be positive")
        if self.bench.warmup < 0 or self.bench.frames < 1:
            raise ConfigError("bench.warmup must be >= 0 and bench.frames >= 1")
        return self

    def override(self, section: str, **values) -> "Config":
        """Replace fields of one section, skipping ``None`` values (unset flags)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: replace(getattr(self, section), **values)})


def _points(text: str) -> Tuple[Tuple[float, float], ...]:
    try:
        return tuple(tuple(float(v) for v in p.split(",")) for p in text.split())
    except ValueError as exc:
        raise ConfigError(f"cannot parse point list {text!r}") from exc


def _coerce(section_cls, key: str, raw: str):
    types = {f.name: f.type for f in fields(section_cls)}
    kind = types[key]
    try:
        if kind in ("int",):
            return int(raw)
        if kind in ("float",):
            return float(raw)
        if kind in ("bool",):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"{section_cls.__name__}.{key}: cannot parse {raw!r}") from exc
    if key == "template":
        return _points(raw)
    return raw.strip() or None


_SECTIONS = {"detector": DetectorConfig, "embedder": EmbedderConfig,
             "verify": VerifyConfig, "bench": BenchConfig}


def load_config(path=None) -> Config:
    cfg = Config()
    if path is None:
        return cfg.validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name for f in fields(cls)}
        values = {}
        anchors = None
        for key, raw in parser.items(section):
            if section == "detector" and key.startswith("anchors_"):
                anchors = dict(anchors or cfg.detector.anchors)
                try:
                    stride = int(key.split("_", 1)[1])
                except ValueError as exc:
                    raise ConfigError(f"bad anchor key {key!r}") from exc
                anchors[stride] = _points(raw)
                continue
            if key not in known or key == "anchors":
                raise ConfigError(f"unknown key {section}.{key}")
            values[key] = _coerce(cls, key, raw)
        if anchors is not None:
            values["anchors"] = anchors
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **values)})
    return cfg.validate()
