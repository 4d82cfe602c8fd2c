"""Synthetic scene model: analytic primitives, pinhole cameras and ray casting.

Conventions: world z is up, scene units are metres. Cameras follow the
OpenCV frame (x right, y down, z forward). Images are stored row-major as
``(height, width)`` arrays, so pixel ``(u, v)`` is ``image[v, u]``. Depth
values are ray parameters ``t`` along the unit ray direction, not z-depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SIGMA_IN = 40.0
SHAPES = ("box", "sphere", "cylinder")


class DegenerateMaskError(ValueError):
    pass


class MissPixelError(ValueError):
    pass


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalized."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local coordinates to world coordinates."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float]) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=float))

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(quat_to_matrix(d["q"]), np.asarray(d["t"], dtype=float))

    def to_json(self) -> dict:
        return {"t": [float(x) for x in self.translation],
                "q": [float(x) for x in matrix_to_quat(self.rotation)]}

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Primitive:
    """An analytic solid. ``extents`` are half extents for boxes, ``(r, r, r)``
    for spheres and ``(r, r, half_height)`` for z-aligned cylinders."""

    id: int
    category: str
    shape: str
    pose: Pose
    extents: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if np.any(np.asarray(self.extents) <= 0):
            raise ValueError(f"primitive {self.id}: extents must be positive")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = self.pose.to_local(points)
        e = self.extents
        if self.shape == "box":
            return np.all(np.abs(p) <= e, axis=-1)
        if self.shape == "sphere":
            return np.einsum("...i,...i->...", p, p) <= e[0] ** 2
        return (p[..., 0] ** 2 + p[..., 1] ** 2 <= e[0] ** 2) & (np.abs(p[..., 2]) <= e[2])

    def volume(self) -> float:
        e = self.extents
        if self.shape == "box":
            return float(8 * e[0] * e[1] * e[2])
        if self.shape == "sphere":
            return float(4.0 / 3.0 * np.pi * e[0] ** 3)
        return float(np.pi * e[0] ** 2 * 2 * e[2])

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry and exit ray parameters (``inf`` for misses), vectorized over rays."""
        o = self.pose.to_local(origins)
        d = np.asarray(dirs) @ self.pose.rotation
        e = self.extents
        if self.shape == "box":
            return _slab(o, d, -e, e)
        if self.shape == "sphere":
            return _quadric(o, d, e[0], dims=3)
        t0, t1 = _quadric(o, d, e[0], dims=2)
        lo = np.array([-np.inf, -np.inf, -e[2]])
        hi = np.array([np.inf, np.inf, e[2]])
        s0, s1 = _slab(o, d, lo, hi)
        t_in = np.maximum(t0, s0)
        t_out = np.minimum(t1, s1)
        miss = ~(t_in <= t_out) | (t0 == np.inf) | (s0 == np.inf)
        t_in = np.where(miss, np.inf, t_in)
        t_out = np.where(miss, np.inf, t_out)
        return t_in, t_out

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        e = self.extents
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * e
        if self.shape == "sphere":
            c = self.pose.translation
            return c - e[0], c + e[0]
        if self.shape == "cylinder":
            # bounding box of the two cap discs
            R = self.pose.rotation
            r, h = e[0], e[2]
            axis = R[:, 2]
            radial = r * np.sqrt(np.clip(1.0 - axis ** 2, 0.0, None))
            c = self.pose.translation
            ext = np.abs(axis) * h + radial
            return c - ext, c + ext
        w = self.pose.to_world(corners)
        return w.min(axis=0), w.max(axis=0)


def _slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.fmin(ta, tb)
    tmax = np.fmax(ta, tb)
    # parallel rays: inside the slab -> unbounded, outside -> miss
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_in = tmin.max(axis=-1)
    t_out = tmax.min(axis=-1)
    miss = ~(t_in <= t_out)
    return np.where(miss, np.inf, t_in), np.where(miss, np.inf, t_out)


def _quadric(o, d, r, dims):
    o2, d2 = o[..., :dims], d[..., :dims]
    a = np.einsum("...i,...i->...", d2, d2)
    b = 2 * np.einsum("...i,...i->...", o2, d2)
    c = np.einsum("...i,...i->...", o2, o2) - r * r
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
    degenerate = a == 0
    if dims == 2:
        # ray parallel to the cylinder axis: inside the disc -> unbounded
        inside = c <= 0
        t0 = np.where(degenerate, np.where(inside, -np.inf, np.inf), t0)
        t1 = np.where(degenerate, np.inf, t1)
    miss = (disc < 0) & ~degenerate
    return np.where(miss, np.inf, t0), np.where(miss, np.inf, t1)


@dataclass(frozen=True)
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose
    view_id: int = 0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def look_at(cls, eye, target, *, fx, fy, width, height, view_id=0, cx=None, cy=None):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, Pose(R, eye), view_id)

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation

    def pixel_dirs(self, u, v) -> np.ndarray:
        """Unit world-space directions through (possibly fractional) pixels."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.pose.rotation.T

    def all_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and directions for every pixel, shaped ``(H*W, 3)`` in row-major order."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        d = self.pixel_dirs(u.ravel(), v.ravel())
        return np.broadcast_to(self.origin, d.shape).copy(), d

    def to_json(self) -> dict:
        return {"view_id": self.view_id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height, "pose": self.pose.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "CameraView":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["w"]), int(d["h"]), Pose.from_json(d["pose"]), int(d["view_id"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit norm")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class Hit:
    t: float
    instance_id: int


@dataclass
class Annotation:
    query_id: str
    target_id: int
    anchor_id: int
    relation: str
    text: str = ""


@dataclass
class Scene:
    primitives: list[Primitive]
    cameras: list[CameraView] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    units: str = "m"

    def __post_init__(self):
        ids = [p.id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise ValueError("primitive ids must be unique")
        self._by_id = {p.id: p for p in self.primitives}

    def primitive(self, instance_id: int) -> Primitive:
        return self._by_id[instance_id]

    def category_of(self, instance_id: int) -> str:
        return self._by_id[instance_id].category

    def bounds(self, pad: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        if not self.primitives:
            return -np.ones(3), np.ones(3)
        boxes = [p.aabb() for p in self.primitives]
        lo = np.min([b[0] for b in boxes], axis=0) - pad
        hi = np.max([b[1] for b in boxes], axis=0) + pad
        return lo, hi


@dataclass
class RenderedView:
    view_id: int
    rgb: np.ndarray
    depth: np.ndarray
    instance_ids: np.ndarray


@dataclass
class Mask:
    view_id: int
    pixels: np.ndarray
    instance_id: int

    @property
    def area(self) -> int:
        return int(self.pixels.sum())


def occupancy_batch(scene: Scene, points: np.ndarray, sigma_in: float = SIGMA_IN):
    """Density, colour and containing-instance id for an ``(..., 3)`` array of points.

    Where primitives overlap the smallest-volume one wins.
    """
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    flat = points.reshape(-1, 3)
    ids = np.full(flat.shape[0], -1, dtype=np.int64)
    best_vol = np.full(flat.shape[0], np.inf)
    color = np.zeros((flat.shape[0], 3))
    for prim in scene.primitives:
        lo, hi = prim.aabb()
        near = np.all((flat >= lo) & (flat <= hi), axis=1)
        if not near.any():
            continue
        idx = np.flatnonzero(near)
        inside = prim.contains(flat[idx])
        idx = idx[inside]
        vol = prim.volume()
        take = idx[vol < best_vol[idx]]
        ids[take] = prim.id
        best_vol[take] = vol
        color[take] = prim.albedo
    sigma = np.where(ids >= 0, sigma_in, 0.0)
    return sigma.reshape(shape), color.reshape(shape + (3,)), ids.reshape(shape)


def occupancy(scene: Scene, point, direction=None, sigma_in: float = SIGMA_IN):
    """Density and colour at a single point. ``direction`` is accepted and ignored."""
    sigma, color, _ = occupancy_batch(scene, np.asarray(point, dtype=float)[None], sigma_in)
    return float(sigma[0]), color[0]


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-surface ray parameters and ids for a batch of rays.

    Rays starting inside a primitive report ``t = 0`` and that primitive's id.
    Misses have ``t = inf`` and id ``-1``.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    for prim in scene.primitives:
        t_in, t_out = prim.intersect(origins, dirs)
        valid = np.isfinite(t_in) & (t_out >= 0)
        t_hit = np.where(valid, np.maximum(t_in, 0.0), np.inf)
        better = t_hit < best_t
        best_t = np.where(better, t_hit, best_t)
        best_id = np.where(better, prim.id, best_id)
    return best_t, best_id


def cast_ray(scene: Scene, ray: Ray) -> Hit | None:
    t, ids = cast_rays(scene, ray.origin[None], ray.direction[None])
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), int(ids[0]))


def render_view(scene: Scene, camera: CameraView) -> RenderedView:
    origins, dirs = camera.all_rays()
    t, ids = cast_rays(scene, origins, dirs)
    rgb = np.zeros((t.size, 3))
    for prim in scene.primitives:
        rgb[ids == prim.id] = prim.albedo
    shape = (camera.height, camera.width)
    return RenderedView(camera.view_id, rgb.reshape(shape + (3,)), t.reshape(shape), ids.reshape(shape))


def masks_from_view(view: RenderedView) -> list[Mask]:
    ids = np.unique(view.instance_ids)
    return [Mask(view.view_id, view.instance_ids == i, int(i)) for i in ids if i >= 0]


def deproject(camera: CameraView, pixel, depth) -> np.ndarray:
    """World point at ray parameter ``depth`` through pixel ``(u, v)``.

    Accepts scalars or arrays; ``pixel`` may be an ``(N, 2)`` array.
    """
    depth = np.asarray(depth, dtype=float)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise MissPixelError("depth must be finite and positive (miss pixel?)")
    pixel = np.asarray(pixel, dtype=float)
    d = camera.pixel_dirs(pixel[..., 0], pixel[..., 1])
    return camera.origin + d * depth[..., None]


def project(camera: CameraView, points) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of world points."""
    p = camera.pose.to_local(np.asarray(points, dtype=float))
    u = camera.fx * p[..., 0] / p[..., 2] + camera.cx
    v = camera.fy * p[..., 1] / p[..., 2] + camera.cy
    return np.stack([u, v], axis=-1)


def physical_scale(points: Iterable) -> float:
    """Norm of the per-axis population standard deviations of a point set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 2:
        raise DegenerateMaskError("physical scale needs at least two points")
    return float(np.linalg.norm(pts.std(axis=0)))
