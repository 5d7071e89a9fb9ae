"""Image file I/O. Binary PPM (P6) is always available; PNG needs Pillow."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .tensor import Image

_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                         rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_ppm(data: bytes) -> Image:
    m = _PPM_HEADER.match(data)
    if not m:
        raise InvalidInputError("not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise InvalidInputError(f"only 8-bit PPM is supported (maxval {maxval})")
    if w == 0 or h == 0:
        raise InvalidInputError("zero-sized image")
    body = data[m.end():m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise InvalidInputError("truncated PPM pixel data")
    return Image(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


def encode_ppm(img: Image) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def read_image(path) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InvalidInputError(f"cannot read image {path}: {exc}") from exc
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image as PILImage
        except ImportError as exc:
            raise InvalidInputError("PNG input needs Pillow (pip install facepipe[png])") from exc
        try:
            with PILImage.open(path) as im:
                return Image(np.asarray(im.convert("RGB")))
        except OSError as exc:
            raise InvalidInputError(f"cannot decode PNG {path}: {exc}") from exc
    raise InvalidInputError(f"unsupported image format: {path}")


def write_image(img: Image, path) -> Path:
    """Writes PNG when the suffix is .png (Pillow required), PPM otherwise."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage
        PILImage.fromarray(img.pixels).save(path)
    else:
        path.write_bytes(encode_ppm(img))
    return path
