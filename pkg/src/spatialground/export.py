"""Portable graymap/pixmap writers and run-length mask encoding."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import Mask


def write_pgm(path, values: np.ndarray, vmax: float | None = None) -> None:
    """Binary P5; finite values are scaled to [0, 255] by ``vmax`` (default: their max), others map to 0."""
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    top = vmax if vmax is not None else (float(v[finite].max()) if finite.any() else 1.0)
    top = top if top > 0 else 1.0
    img = np.where(finite, np.clip(v / top, 0.0, 1.0) * 255.0, 0.0)
    img = np.round(img).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.round(np.clip(np.asarray(rgb, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, mx = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    body = np.frombuffer(data[pos + 1:], dtype=np.uint8)
    if mx != 255 or magic not in (b"P5", b"P6"):
        raise ValueError("only 8-bit binary P5/P6 is supported")
    return body.reshape(h, w) if magic == b"P5" else body.reshape(h, w, 3)


def rle_encode(mask: Mask) -> dict:
    """Alternating run lengths over the row-major bitmap, starting with a (possibly empty) run of zeros."""
    flat = mask.pixels.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(np.concatenate([[0], flat, [1 - flat[-1] if flat.size else 0]])))
    counts = np.diff(np.concatenate([[0], change, [flat.size]]))
    counts = counts[counts > 0] if flat.size else counts
    if flat.size and flat[0] == 1:
        counts = np.concatenate([[0], counts])
    return {"view_id": mask.view_id, "instance_id": mask.instance_id,
            "size": list(mask.pixels.shape), "counts": [int(c) for c in counts]}


def rle_decode(d: dict) -> Mask:
    h, w = d["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in d["counts"]:
        flat[pos:pos + c] = val
        pos += c
        val = not val
    if pos != h * w:
        raise ValueError("run lengths do not cover the bitmap")
    return Mask(int(d["view_id"]), flat.reshape(h, w), int(d["instance_id"]))
