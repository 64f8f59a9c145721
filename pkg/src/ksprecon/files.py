"""Small file formats: 16-bit PGM images and JSON documents."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PGM_MAXVAL = 65535


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary 16-bit PGM (big-endian samples), scaled so the image max is 65535."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape) if peak <= 0 else np.clip(img / peak, 0, 1) * PGM_MAXVAL
    data = np.rint(scaled).astype(">u2")
    rows, cols = img.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte before the raster
    magic, cols, rows, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=pos)
    return data.reshape(rows, cols).astype(np.float64) / maxval


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
