"""Multi-scale voxel feature fields and their volume rendering.

A field holds two pyramids of vertex grids (language and instance) over the
scene bounding box. A query at a point interpolates the grid of the level
selected by the physical scale and adds a linear visual-property term
``W @ (v - v0)`` with ``v = (sigma / sigma_ref, r, g, b)``. The offset ``v0``
is the mean over supervised pixels, so the term carries how appearance
deviates from the scene average rather than a constant bias. Rendering is
linear in every parameter: a ray's feature is ``S @ grid + vp_c @ W.T`` where
``S`` holds the rendering-weighted trilinear coefficients of the ray's
samples and ``vp_c`` their weighted, centered visual properties.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .scene import SIGMA_IN, CameraView, Ray, Scene, occupancy_batch

log = logging.getLogger(__name__)

EPS_NORM = 1e-8
DEPTH_MIN_WEIGHT = 1e-6
# samples lighter than this are dropped from cached bundles; exact single-ray
# rendering keeps every nonzero weight
WEIGHT_FLOOR = 1e-9
KINDS = ("language", "instance")


@dataclass
class SampleConfig:
    K: int = 64
    near: float = 0.5
    far: float = 6.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")

    def ts(self) -> tuple[np.ndarray, np.ndarray]:
        delta = (self.far - self.near) / self.K
        t = self.near + (np.arange(self.K) + 0.5) * delta
        return t, np.full(self.K, delta)


class RenderWeights(NamedTuple):
    t_mid: np.ndarray | None
    delta: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray


def render_weights(sigmas, deltas, t_mid=None) -> RenderWeights:
    """Discrete volume-rendering weights along the last axis.

    ``T_k = exp(-sum_{j<k} sigma_j delta_j)`` and ``w_k = T_k (1 - exp(-sigma_k delta_k))``.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    deltas = np.broadcast_to(np.asarray(deltas, dtype=float), sigmas.shape)
    tau = sigmas * deltas
    acc = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1)
    T = np.exp(-excl)
    w = T * -np.expm1(-tau)
    return RenderWeights(t_mid, deltas, T, w)


def termination_points(t_mid, delta, sigma) -> np.ndarray:
    """Mean stopping point inside each constant-density segment, given the ray stops there.

    For optical thickness ``x = sigma * delta`` the segment entry is offset by
    ``delta * (1/x - 1/(e^x - 1))``, which tends to the midpoint as ``x -> 0``.
    """
    x = np.asarray(sigma, dtype=float) * delta
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        frac = np.where(x > 1e-6, 1.0 / x - 1.0 / np.expm1(x), 0.5)
    return t_mid - delta / 2.0 + frac * delta


@dataclass
class ScalePyramid:
    levels: list[np.ndarray]
    scale_edges: np.ndarray

    def __post_init__(self):
        res = [g.shape[0] for g in self.levels]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError("pyramid resolutions must be strictly increasing")
        if len(self.scale_edges) != len(self.levels) + 1 or np.any(np.diff(self.scale_edges) <= 0):
            raise ValueError("scale_edges must be L+1 strictly increasing values")

    @property
    def dim(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def resolutions(self) -> list[int]:
        return [g.shape[0] for g in self.levels]

    def level_of(self, scale) -> np.ndarray | int:
        """Coarse levels (index 0) hold large physical scales."""
        L = len(self.levels)
        b = np.clip(np.searchsorted(self.scale_edges[1:-1], scale, side="right"), 0, L - 1)
        lvl = L - 1 - b
        return int(lvl) if np.ndim(lvl) == 0 else lvl

    def flat(self, level: int) -> np.ndarray:
        g = self.levels[level]
        return g.reshape(-1, g.shape[-1])


def log_edges(scales: Sequence[float], L: int, low_quantile: float = 0.05) -> np.ndarray:
    """Log-spaced edges from a low quantile of the scales up to their maximum.

    The quantile keeps slivers of heavily occluded masks from stretching the
    finest bin; scales below the first edge still map to the finest level.
    """
    s = np.asarray(scales, dtype=float)
    lo, hi = float(np.quantile(s, low_quantile)), float(s.max())
    if hi <= lo * 1.0001:
        lo, hi = lo / 2.0, hi * 2.0
    return np.geomspace(lo, hi, L + 1)


@dataclass
class FeatureField:
    language: ScalePyramid
    instance: ScalePyramid
    vis_mod_lang: np.ndarray
    vis_mod_inst: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    sampling: SampleConfig = dc_field(default_factory=SampleConfig)
    sigma_ref: float = SIGMA_IN
    meta: dict = dc_field(default_factory=dict)
    vp_center: np.ndarray = dc_field(default_factory=lambda: np.zeros(4))  # subtracted before modulation

    def __post_init__(self):
        if self.vis_mod_lang.shape != (self.language.dim, 4):
            raise ValueError("vis_mod_lang must be (D, 4)")
        if self.vis_mod_inst.shape != (self.instance.dim, 4):
            raise ValueError("vis_mod_inst must be (D_inst, 4)")
        self.vp_center = np.asarray(self.vp_center, dtype=float).reshape(4)

    def pyramid(self, kind: str) -> ScalePyramid:
        return self.language if kind == "language" else self.instance

    def vis_mod(self, kind: str) -> np.ndarray:
        return self.vis_mod_lang if kind == "language" else self.vis_mod_inst

    def visual_properties(self, sigma, color) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        return np.concatenate([(sigma / self.sigma_ref)[..., None], np.asarray(color, dtype=float)], axis=-1)

    def centered_vp(self, vp_sum: np.ndarray, w_sum: np.ndarray) -> np.ndarray:
        """Weighted sums of centered visual properties, from raw sums and total weights."""
        return vp_sum - np.asarray(w_sum)[..., None] * self.vp_center

    def copy(self) -> "FeatureField":
        return FeatureField(
            ScalePyramid([g.copy() for g in self.language.levels], self.language.scale_edges.copy()),
            ScalePyramid([g.copy() for g in self.instance.levels], self.instance.scale_edges.copy()),
            self.vis_mod_lang.copy(), self.vis_mod_inst.copy(), self.lo.copy(), self.hi.copy(),
            SampleConfig(self.sampling.K, self.sampling.near, self.sampling.far), self.sigma_ref,
            dict(self.meta), self.vp_center.copy())

    @classmethod
    def zeros(cls, lo, hi, edges, resolutions=(16, 32, 64), lang_dim=64, inst_dim=16,
              sampling=None, inst_init_std=0.0, seed=0) -> "FeatureField":
        rng = np.random.default_rng(seed)
        lang = [np.zeros((r, r, r, lang_dim)) for r in resolutions]
        inst = [inst_init_std * rng.standard_normal((r, r, r, inst_dim)) for r in resolutions]
        edges = np.asarray(edges, dtype=float)
        return cls(ScalePyramid(lang, edges.copy()), ScalePyramid(inst, edges.copy()),
                   np.zeros((lang_dim, 4)), np.zeros((inst_dim, 4)),
                   np.asarray(lo, dtype=float), np.asarray(hi, dtype=float),
                   sampling or SampleConfig())


def trilinear(lo, hi, res: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat vertex indices and weights ``(N, 8)`` for points clamped to the grid box."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    c = (pts - lo) / (hi - lo) * (res - 1)
    c = np.clip(c, 0.0, res - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), res - 2)
    f = c - i0
    idx = np.empty((pts.shape[0], 8), dtype=np.int64)
    w = np.empty((pts.shape[0], 8))
    k = 0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                idx[:, k] = ((i0[:, 0] + dx) * res + i0[:, 1] + dy) * res + i0[:, 2] + dz
                w[:, k] = wx * wy * wz
                k += 1
    return idx, w


def query_field_batch(fld: FeatureField, kind: str, points, level: int, sigma, color) -> np.ndarray:
    pyr = fld.pyramid(kind)
    idx, w = trilinear(fld.lo, fld.hi, pyr.resolutions[level], points)
    grid = pyr.flat(level)
    out = np.einsum("nk,nkd->nd", w, grid[idx])
    vp = fld.visual_properties(sigma, color).reshape(-1, 4) - fld.vp_center
    return out + vp @ fld.vis_mod(kind).T


def query_field(fld: FeatureField, kind: str, point, scale: float, sigma: float, color) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    level = fld.pyramid(kind).level_of(scale)
    return query_field_batch(fld, kind, np.asarray(point, dtype=float)[None], level,
                             np.atleast_1d(sigma), np.asarray(color, dtype=float)[None])[0]


@dataclass
class RayBundle:
    """Nonzero-weight samples of a set of rays, padded to ``M`` per ray."""

    points: np.ndarray   # (R, M, 3)
    weights: np.ndarray  # (R, M), zero padding
    vp: np.ndarray       # (R, M, 4) visual properties (sigma / sigma_ref, rgb)
    t: np.ndarray        # (R, M)
    weight_sum: np.ndarray  # (R,) over all samples, untruncated
    depth: np.ndarray    # (R,) expected termination, inf when weight_sum < DEPTH_MIN_WEIGHT
    lead_weight: np.ndarray | None = None  # (R,) weight absorbed by the first instance sampled
    lead_id: np.ndarray | None = None      # (R,) that instance, -1 for empty rays
    in_lead: np.ndarray | None = None      # (R, M) samples inside that instance

    def __len__(self):
        return self.weights.shape[0]

    def _weights(self, lead_only: bool) -> np.ndarray:
        return self.weights * self.in_lead if lead_only else self.weights

    def vp_sum_of(self, lead_only: bool = False) -> np.ndarray:
        return np.einsum("rm,rmc->rc", self._weights(lead_only), self.vp)

    def w_sum_of(self, lead_only: bool = False) -> np.ndarray:
        return self._weights(lead_only).sum(axis=1)

    @property
    def vp_sum(self) -> np.ndarray:
        return self.vp_sum_of(False)

    def design(self, lo, hi, res: int, lead_only: bool = False) -> sp.csr_matrix:
        """Sparse ``(R, res**3)`` matrix of rendering-weighted trilinear coefficients.

        ``lead_only`` keeps just the samples inside the first instance each ray
        enters (the mask-conditioned rendering used for supervision).
        """
        R, M = self.weights.shape
        weights = self._weights(lead_only)
        keep = weights > 0
        rows = np.repeat(np.arange(R), M)[keep.ravel()]
        idx, w = trilinear(lo, hi, res, self.points[keep])
        vals = w * weights[keep][:, None]
        S = sp.csr_matrix((vals.ravel(), (np.repeat(rows, 8), idx.ravel())), shape=(R, res ** 3))
        S.sum_duplicates()
        return S


def build_bundle(scene: Scene, origins, dirs, sampling: SampleConfig, sigma_ref: float = SIGMA_IN,
                 floor: float = WEIGHT_FLOOR, chunk: int = 2048) -> RayBundle:
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    t, delta = sampling.ts()
    parts = []
    for s in range(0, origins.shape[0], chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        pts = o[:, None, :] + t[None, :, None] * d[:, None, :]
        sigma, color, ids = occupancy_batch(scene, pts)
        rw = render_weights(sigma, delta)
        w = rw.weight
        wsum = w.sum(axis=1)
        first = np.take_along_axis(ids, np.argmax(sigma > 0, axis=1)[:, None], axis=1)
        lead = np.where(ids == first, w, 0.0).sum(axis=1)
        first = np.where(sigma.max(axis=1) > 0, first[:, 0], -1)
        inl = ids == first[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            depth = np.where(wsum >= DEPTH_MIN_WEIGHT,
                             (w * termination_points(t, delta, sigma)).sum(axis=1) / wsum, np.inf)
        keep = w > floor
        parts.append((pts, w, sigma, color, keep, wsum, depth, lead, first, inl))
    M = max(1, max(int(p[4].sum(axis=1).max(initial=0)) for p in parts))
    R = origins.shape[0]
    P = np.zeros((R, M, 3))
    W = np.zeros((R, M))
    VP = np.zeros((R, M, 4))
    T = np.zeros((R, M))
    WS = np.zeros(R)
    D = np.full(R, np.inf)
    LW = np.zeros(R)
    LI = np.full(R, -1, dtype=np.int64)
    IN = np.zeros((R, M), dtype=bool)
    s = 0
    for pts, w, sigma, color, keep, wsum, depth, lead, first, inl in parts:
        n = pts.shape[0]
        # stable order keeps samples sorted by t within each ray
        order = np.argsort(~keep, axis=1, kind="stable")[:, :M]
        sel = np.take_along_axis(keep, order, axis=1)
        P[s:s + n] = np.take_along_axis(pts, order[..., None], axis=1) * sel[..., None]
        W[s:s + n] = np.take_along_axis(w, order, axis=1) * sel
        VP[s:s + n, :, 0] = np.take_along_axis(sigma, order, axis=1) / sigma_ref * sel
        VP[s:s + n, :, 1:] = np.take_along_axis(color, order[..., None], axis=1) * sel[..., None]
        T[s:s + n] = np.take_along_axis(np.broadcast_to(t, w.shape), order, axis=1) * sel
        WS[s:s + n] = wsum
        D[s:s + n] = depth
        LW[s:s + n] = lead
        LI[s:s + n] = first
        IN[s:s + n] = np.take_along_axis(inl, order, axis=1) & sel
        s += n
    return RayBundle(P, W, VP, T, WS, D, LW, LI, IN)


class RenderedFeature(NamedTuple):
    raw: np.ndarray
    normalized: np.ndarray
    degenerate: bool


def normalize_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    degenerate = norm[..., 0] <= EPS_NORM
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(degenerate[..., None], 0.0, raw / np.where(degenerate[..., None], 1.0, norm))
    return out, degenerate


def render_embedding(scene: Scene, fld: FeatureField, kind: str, ray: Ray, scale: float) -> RenderedFeature:
    bundle = build_bundle(scene, ray.origin[None], ray.direction[None], fld.sampling, fld.sigma_ref, floor=0.0)
    level = fld.pyramid(kind).level_of(scale)
    raw = render_bundle(fld, kind, bundle, level)[0]
    normalized, degenerate = normalize_rows(raw)
    return RenderedFeature(raw, normalized, bool(degenerate))


def render_bundle(fld: FeatureField, kind: str, bundle: RayBundle, level: int, design=None) -> np.ndarray:
    pyr = fld.pyramid(kind)
    S = design if design is not None else bundle.design(fld.lo, fld.hi, pyr.resolutions[level])
    return S @ pyr.flat(level) + fld.centered_vp(bundle.vp_sum, bundle.w_sum_of()) @ fld.vis_mod(kind).T


def render_depth(scene: Scene, ray: Ray, sampling: SampleConfig | None = None) -> float:
    sampling = sampling or SampleConfig()
    t, delta = sampling.ts()
    sigma, _, _ = occupancy_batch(scene, ray.at(t))
    w = render_weights(sigma, delta).weight
    ws = w.sum()
    return float((w * termination_points(t, delta, sigma)).sum() / ws) if ws >= DEPTH_MIN_WEIGHT else float("inf")


class ViewCache:
    """Per-camera ray bundle plus lazily built design matrices keyed by resolution."""

    def __init__(self, scene: Scene, camera: CameraView, sampling: SampleConfig, sigma_ref: float = SIGMA_IN):
        self.camera = camera
        origins, dirs = camera.all_rays()
        self.bundle = build_bundle(scene, origins, dirs, sampling, sigma_ref)
        self._designs: dict[tuple, sp.csr_matrix] = {}
        self._vp_sum: dict[bool, np.ndarray] = {}
        self._w_sum: dict[bool, np.ndarray] = {}

    @property
    def shape(self) -> tuple[int, int]:
        return self.camera.height, self.camera.width

    @property
    def depth(self) -> np.ndarray:
        return self.bundle.depth.reshape(self.shape)

    def vp_sum_of(self, lead_only: bool = False) -> np.ndarray:
        if lead_only not in self._vp_sum:
            self._vp_sum[lead_only] = self.bundle.vp_sum_of(lead_only)
        return self._vp_sum[lead_only]

    def w_sum_of(self, lead_only: bool = False) -> np.ndarray:
        if lead_only not in self._w_sum:
            self._w_sum[lead_only] = self.bundle.w_sum_of(lead_only)
        return self._w_sum[lead_only]

    def centered_vp(self, fld: FeatureField, lead_only: bool = False, rows=None) -> np.ndarray:
        vp, ws = self.vp_sum_of(lead_only), self.w_sum_of(lead_only)
        if rows is not None:
            vp, ws = vp[rows], ws[rows]
        return fld.centered_vp(vp, ws)

    @property
    def vp_sum(self) -> np.ndarray:
        return self.vp_sum_of(False)

    def design(self, fld: FeatureField, res: int, lead_only: bool = False) -> sp.csr_matrix:
        key = (res, tuple(fld.lo), tuple(fld.hi), lead_only)
        if key not in self._designs:
            self._designs[key] = self.bundle.design(fld.lo, fld.hi, res, lead_only)
        return self._designs[key]

    def render(self, fld: FeatureField, kind: str, level: int, rows=None, lead_only: bool = False) -> np.ndarray:
        pyr = fld.pyramid(kind)
        S = self.design(fld, pyr.resolutions[level], lead_only)
        if rows is not None:
            S = S[rows]
        return S @ pyr.flat(level) + self.centered_vp(fld, lead_only, rows) @ fld.vis_mod(kind).T


def build_caches(scene: Scene, cameras: Sequence[CameraView], sampling: SampleConfig,
                 sigma_ref: float = SIGMA_IN, threads: int = 1) -> dict[int, ViewCache]:
    if threads > 1 and len(cameras) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            caches = list(ex.map(lambda c: ViewCache(scene, c, sampling, sigma_ref), cameras))
    else:
        caches = [ViewCache(scene, c, sampling, sigma_ref) for c in cameras]
    return {c.view_id: vc for c, vc in zip(cameras, caches)}
