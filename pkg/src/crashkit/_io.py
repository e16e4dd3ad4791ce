"""File helpers: atomic writes, JSON-lines with line numbers, image I/O."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class InputError(ValueError):
    """Unreadable or malformed input file; carries the location when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def iter_jsonl(path):
    """Yield ``(line_number, object)`` for each non-blank line."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(str(exc), path) from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"malformed JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise InputError("expected a JSON object", path, lineno)
            yield lineno, obj


def list_images(directory):
    """Image files in ``directory`` in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError("not a directory", directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_image(path):
    """Load an image as ``uint8``: ``(H, W)`` for grayscale, else ``(H, W, 3)``."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I", "F", "1"):
                return np.asarray(im.convert("L"))
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise InputError(str(exc), path) from None


def encode_png(img):
    """PNG bytes of an 8-bit gray or RGB array, no metadata chunks."""
    import io

    from PIL import Image

    arr = np.ascontiguousarray(img, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()
