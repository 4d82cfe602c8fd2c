"""Versioned little-endian float32 container for trained feature fields.

Layout: 8-byte magic, uint32 version, uint32 header length, a UTF-8 JSON
header (sorted keys, fixed separators), then every array as ``<f4`` in
header order. Identical fields produce identical bytes on every platform.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .field import FeatureField, SampleConfig, ScalePyramid

MAGIC = b"SGFIELD\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(fld: FeatureField) -> list[tuple[str, np.ndarray]]:
    out = [(f"language/{i}", g) for i, g in enumerate(fld.language.levels)]
    out += [(f"instance/{i}", g) for i, g in enumerate(fld.instance.levels)]
    out += [("vis_mod_lang", fld.vis_mod_lang), ("vis_mod_inst", fld.vis_mod_inst)]
    return out


def to_bytes(fld: FeatureField) -> bytes:
    arrays = _arrays(fld)
    header = {
        "resolutions": fld.language.resolutions,
        "lang_dim": fld.language.dim,
        "inst_dim": fld.instance.dim,
        "scale_edges": [float(x) for x in fld.language.scale_edges],
        "lo": [float(x) for x in fld.lo],
        "hi": [float(x) for x in fld.hi],
        "sampling": {"K": fld.sampling.K, "near": fld.sampling.near, "far": fld.sampling.far},
        "sigma_ref": float(fld.sigma_ref),
        "vp_center": [float(x) for x in fld.vp_center],
        "meta": fld.meta,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays]
    return b"".join(parts)


def from_bytes(data: bytes) -> FeatureField:
    if data[:8] != MAGIC:
        raise CheckpointError("not a field checkpoint (bad magic)")
    version, n = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + n].decode())
    off = 16 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        chunk = data[off:off + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError("truncated checkpoint")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        off += 4 * count
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    L = len(header["resolutions"])
    edges = np.asarray(header["scale_edges"], dtype=float)
    s = header["sampling"]
    return FeatureField(
        ScalePyramid([arrays[f"language/{i}"] for i in range(L)], edges.copy()),
        ScalePyramid([arrays[f"instance/{i}"] for i in range(L)], edges.copy()),
        arrays["vis_mod_lang"], arrays["vis_mod_inst"],
        np.asarray(header["lo"], dtype=float), np.asarray(header["hi"], dtype=float),
        SampleConfig(int(s["K"]), float(s["near"]), float(s["far"])), float(header["sigma_ref"]),
        header["meta"], np.asarray(header.get("vp_center", [0.0] * 4), dtype=float))


def save(fld: FeatureField, path) -> None:
    Path(path).write_bytes(to_bytes(fld))


def load(path) -> FeatureField:
    return from_bytes(Path(path).read_bytes())


def quantize(fld: FeatureField) -> FeatureField:
    """The field a save/load round trip would return, without touching disk."""
    return from_bytes(to_bytes(fld))
