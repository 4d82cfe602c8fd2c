"""Query-time pipeline: relevance maps, candidates, instance graph, merging and relation checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _cc

from .embed import QueryContext, cosine
from .field import EPS_NORM, FeatureField, ViewCache, normalize_rows, query_field, render_depth
from .parse import Instruction
from .relations import Box, RelationConfig, check_relation, horizontal_distance
from .scene import CameraView, Ray, Scene, deproject, occupancy

log = logging.getLogger(__name__)

MIN_PIXELS = 6


class GroundError(RuntimeError):
    """``kind`` is AnchorNotFound or TargetNotFound."""

    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class CandidateRejected(ValueError):
    pass


@dataclass
class GroundConfig:
    tau: float = 0.55
    min_pixels: int = MIN_PIXELS
    epsilon: float | None = None      # graph threshold; None means 0.5 * lambda_in of the field
    min_feature_norm: float = 0.25    # rendered features weaker than this count as unsupported
    use_instance_graph: bool = True
    depth_k: float | None = 3.0       # MAD multiplier for the box outlier filter; None keeps every pixel
    depth_floor: float = 0.05
    min_opacity: float = 0.9    # peaks and boxes use pixels whose first surface absorbs this much
    split_regions: bool = True  # cut regions where neighbouring instance features disagree
    min_relative_relevance: float = 0.94  # merged candidates below this fraction of the best are dropped
    relation: RelationConfig = dc_field(default_factory=RelationConfig)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.min_pixels < 1:
            raise ValueError("min_pixels must be >= 1")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.min_opacity <= 1.0:
            raise ValueError("min_opacity must lie in [0, 1]")
        if not 0.0 <= self.min_relative_relevance <= 1.0:
            raise ValueError("min_relative_relevance must lie in [0, 1]")
        if isinstance(self.relation, dict):
            self.relation = RelationConfig(**self.relation)

    def graph_epsilon(self, fld: FeatureField) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 0.5 * float(fld.meta.get("train", {}).get("lambda_in", 1.0))


# --- relevance ---------------------------------------------------------------

def select_scale(supervision, instruction_embedding) -> float:
    """Scale of the most similar triplet; exact ties go to the smaller scale."""
    if not supervision:
        raise ValueError("select_scale needs supervision")
    best = max(supervision, key=lambda t: (cosine(t.embedding, instruction_embedding), -t.scale))
    return float(best.scale)


def relevance(phi_lang, ctx: QueryContext) -> float:
    phi = np.asarray(phi_lang, dtype=float)
    if np.linalg.norm(phi) <= EPS_NORM:
        return 0.0
    q = float(phi @ ctx.query)
    return min(1.0 / (1.0 + np.exp(float(phi @ c) - q)) for c in ctx.canonicals)


def relevance_batch(phis: np.ndarray, ctx: QueryContext) -> np.ndarray:
    """Row-wise relevance of unit (or zero) features; zero rows score 0."""
    phis = np.asarray(phis, dtype=float)
    q = phis @ ctx.query
    c = phis @ np.stack(ctx.canonicals).T
    # exp(q)/(exp(c)+exp(q)) written as a logistic for stability
    r = np.min(1.0 / (1.0 + np.exp(c - q[:, None])), axis=1)
    r[np.linalg.norm(phis, axis=1) <= EPS_NORM] = 0.0
    return r


@dataclass
class RelevanceMap:
    view_id: int
    values: np.ndarray  # (H, W)

    @property
    def argmax_pixel(self) -> tuple[int, int] | None:
        """(u, v) of the maximum, None for an all-zero map."""
        if not np.any(self.values > 0):
            return None
        v, u = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(u), int(v)

    @property
    def peak(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    def restricted(self, mask: np.ndarray | None) -> "RelevanceMap":
        if mask is None:
            return RelevanceMap(self.view_id, np.zeros_like(self.values))
        return RelevanceMap(self.view_id, np.where(mask, self.values, 0.0))


def relevance_map(scene: Scene, fld: FeatureField, camera: CameraView, ctx: QueryContext, scale: float,
                  cache: ViewCache | None = None, min_norm: float = 0.0) -> RelevanceMap:
    cache = cache or ViewCache(scene, camera, fld.sampling, fld.sigma_ref)
    level = fld.language.level_of(scale)
    raw = cache.render(fld, "language", level)
    phi, degenerate = normalize_rows(raw)
    r = relevance_batch(phi, ctx)
    if min_norm > 0:
        r[np.linalg.norm(raw, axis=1) < min_norm] = 0.0
    r[degenerate] = 0.0
    return RelevanceMap(camera.view_id, np.clip(r, 0.0, 1.0).reshape(camera.height, camera.width))


_FOUR = ndimage.generate_binary_structure(2, 1)


def extract_regions(rmap: RelevanceMap, tau: float, min_pixels: int = MIN_PIXELS) -> list[np.ndarray]:
    """4-connected components above ``tau`` in raster order of first pixel."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    labels, n = ndimage.label(rmap.values > tau, structure=_FOUR)
    out = []
    for k in range(1, n + 1):
        region = labels == k
        if region.sum() >= min_pixels:
            out.append(region)
    return out


def split_region(region: np.ndarray, inst: np.ndarray, opaque: np.ndarray, eps: float,
                 min_pixels: int = MIN_PIXELS) -> list[np.ndarray]:
    """Cut a region along instance-feature discontinuities.

    Two same-category objects that touch in the image share one region above
    tau. Opaque 4-neighbours (``inst`` is (H, W, D)) stay linked while their
    features are within ``eps``; components of at least ``min_pixels`` become
    seeds and every other region pixel joins the nearest seed. Grazing pixels
    carry blended features and never link anything by themselves.
    """
    core = region & opaque
    ids = np.flatnonzero(core)
    if ids.size < 2 * min_pixels:
        return [region]
    h, w = region.shape
    index = np.full(h * w, -1)
    index[ids] = np.arange(ids.size)
    index = index.reshape(h, w)
    src, dst = [], []
    for dv, du in ((0, 1), (1, 0)):
        a, b = (slice(0, h - dv), slice(0, w - du)), (slice(dv, h), slice(du, w))
        link = core[a] & core[b] & (np.linalg.norm(inst[a] - inst[b], axis=-1) <= eps)
        src.append(index[a][link])
        dst.append(index[b][link])
    src, dst = np.concatenate(src), np.concatenate(dst)
    graph = csr_matrix((np.ones(src.size), (src, dst)), shape=(ids.size, ids.size))
    _, labels = _cc(graph, directed=False)
    big = np.flatnonzero(np.bincount(labels) >= min_pixels)
    if big.size <= 1:
        return [region]
    seeds = np.zeros(h * w, dtype=int)
    seeds[ids] = np.where(np.isin(labels, big), labels + 1, 0)
    seeds = seeds.reshape(h, w)
    _, (iv, iu) = ndimage.distance_transform_edt(seeds == 0, return_indices=True)
    owner = seeds[iv, iu]
    parts = [region & (owner == k + 1) for k in big]
    return sorted(parts, key=lambda m: int(np.flatnonzero(m)[0]))


# --- candidates and graph ----------------------------------------------------

@dataclass
class Candidate:
    region: np.ndarray
    peak_pixel: tuple[int, int]
    point3d: np.ndarray
    feature: np.ndarray
    view_id: int
    peak_relevance: float


def make_candidate(region: np.ndarray, rmap: RelevanceMap, scene: Scene, fld: FeatureField,
                   camera: CameraView, scale: float, cache: ViewCache | None = None,
                   min_opacity: float = 0.0, inst: np.ndarray | None = None,
                   eps: float | None = None) -> Candidate:
    """Deproject the region's relevance peak and read the instance feature there.

    Rays that graze a silhouette leak part of their weight to whatever lies
    behind, so their expected depth misses the object. With a cache, the peak
    is taken over pixels whose first surface absorbs at least ``min_opacity``
    of the ray, falling back to the whole region when none qualify.
    Given rendered instance features ``inst`` (H, W, D) and ``eps``, the pool
    also drops pixels farther than ``eps`` from the pool's median feature:
    relevance often spills onto a small neighbouring object.
    """
    if not region.any():
        raise CandidateRejected("empty region")
    pool = region
    if cache is not None and min_opacity > 0 and cache.bundle.lead_weight is not None:
        solid = region & (cache.bundle.lead_weight.reshape(cache.shape) >= min_opacity)
        pool = solid if solid.any() else region
    if inst is not None and eps is not None:
        typical = np.median(inst[pool], axis=0)
        near = pool & (np.linalg.norm(inst - typical, axis=-1) <= eps)
        pool = near if near.any() else pool
    masked = np.where(pool, rmap.values, -np.inf)
    v, u = np.unravel_index(int(np.argmax(masked)), masked.shape)
    if cache is not None:
        depth = float(cache.depth[v, u])
    else:
        depth = render_depth(scene, Ray(camera.origin, camera.pixel_dirs(u, v)), fld.sampling)
    if not np.isfinite(depth):
        raise CandidateRejected(f"peak pixel {(int(u), int(v))} sees no surface")
    point = deproject(camera, (u, v), depth)
    sigma, color = occupancy(scene, point)
    feat = query_field(fld, "instance", point, scale, sigma, color)
    if not np.all(np.isfinite(feat)):
        raise CandidateRejected("non-finite instance feature")
    return Candidate(region, (int(u), int(v)), point, feat, camera.view_id, float(rmap.values[v, u]))


@dataclass
class InstanceGraph:
    nodes: np.ndarray
    affinity: np.ndarray
    edges: np.ndarray
    epsilon: float


def build_graph(candidates, epsilon: float) -> InstanceGraph:
    """Pairwise Euclidean feature distances; an edge wherever the distance is below ``epsilon``."""
    feats = [c.feature if isinstance(c, Candidate) else c for c in candidates]
    V = np.atleast_2d(np.asarray(feats, dtype=float))
    if V.shape[0] < 1:
        raise ValueError("build_graph needs at least one node")
    diff = V[:, None, :] - V[None, :, :]
    A = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
    np.fill_diagonal(A, 0.0)
    E = A < epsilon
    np.fill_diagonal(E, False)
    return InstanceGraph(V, A, E, float(epsilon))


def connected_components(graph: InstanceGraph) -> list[list[int]]:
    """Node partition by edge connectivity, ordered by smallest member."""
    n = graph.edges.shape[0]
    if n == 0:
        return []
    _, labels = _cc(csr_matrix(graph.edges), directed=False)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


@dataclass
class MergedCandidate:
    masks: dict[int, np.ndarray]
    aabb3d: tuple[np.ndarray, np.ndarray]
    mean_relevance: float
    component: list[int]

    @property
    def box(self) -> Box:
        return Box(*self.aabb3d)

    @property
    def pixel_count(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))


def _depth_inliers(d: np.ndarray, k: float, floor: float) -> np.ndarray:
    med = np.median(d)
    mad = np.median(np.abs(d - med))
    return np.abs(d - med) <= k * mad + floor


def merge(components: Sequence[Sequence[int]], candidates: Sequence[Candidate],
          cameras: dict[int, CameraView], depths: dict[int, np.ndarray],
          depth_k: float | None = None, depth_floor: float = 0.05,
          opacity: dict[int, np.ndarray] | None = None, min_opacity: float = 0.0) -> list[MergedCandidate]:
    """Bitwise-OR the member regions per view and box their deprojected pixels.

    With ``depth_k`` set, pixels whose depth strays from the view's median by
    more than ``depth_k * MAD + depth_floor`` are left out of the box; they are
    silhouette rays that slipped past the object onto the background.
    Given per-view ``opacity``, only pixels at or above ``min_opacity`` are
    boxed (all of them when a view has none): grazing rays deproject behind
    the surface by a few centimetres, too little for the MAD test to catch.
    """
    out = []
    for comp in components:
        masks: dict[int, np.ndarray] = {}
        for i in comp:
            c = candidates[i]
            masks[c.view_id] = masks[c.view_id] | c.region if c.view_id in masks else c.region.copy()
        pts = []
        for vid, m in masks.items():
            d = depths[vid]
            sel = m & np.isfinite(d)
            if opacity is not None and min_opacity > 0 and vid in opacity:
                solid = sel & (opacity[vid] >= min_opacity)
                sel = solid if solid.any() else sel
            v, u = np.nonzero(sel)
            if u.size and depth_k is not None:
                ok = _depth_inliers(d[v, u], depth_k, depth_floor)
                v, u = v[ok], u[ok]
            if u.size:
                pts.append(deproject(cameras[vid], np.stack([u, v], axis=1), d[v, u]))
        if pts:
            P = np.concatenate(pts)
        else:
            P = np.stack([candidates[i].point3d for i in comp])
        rel = float(np.mean([candidates[i].peak_relevance for i in comp]))
        out.append(MergedCandidate(masks, (P.min(axis=0), P.max(axis=0)), rel, list(comp)))
    return out


def drop_weak(merged: list[MergedCandidate], ratio: float) -> list[MergedCandidate]:
    """Keep candidates whose mean relevance reaches ``ratio`` times the best one.

    Genuine instances of a concept score alike, while other objects that
    barely clear tau trail well behind.
    """
    if not merged:
        return []
    best = max(m.mean_relevance for m in merged)
    return [m for m in merged if m.mean_relevance >= ratio * best]


# --- full pipeline -----------------------------------------------------------

@dataclass
class GroundingResult:
    query_id: str
    instruction: Instruction
    target: MergedCandidate
    anchor: MergedCandidate
    maps: dict[int, RelevanceMap]          # target relevance restricted to the selected target
    full_maps: dict[int, RelevanceMap]     # unrestricted target relevance
    anchor_maps: dict[int, RelevanceMap]
    satisfied: bool
    frame_view_id: int
    note: str = ""
    n_target_candidates: int = 0
    n_anchor_candidates: int = 0

    def to_json(self) -> dict:
        per_view = []
        for vid in sorted(self.maps):
            m = self.maps[vid]
            ap = m.argmax_pixel
            per_view.append({"view_id": vid, "argmax_pixel": list(ap) if ap else None,
                             "peak_relevance": round(m.peak, 6)})
        box = lambda mc: [[round(float(x), 6) for x in mc.aabb3d[0]], [round(float(x), 6) for x in mc.aabb3d[1]]]
        return {"query_id": self.query_id, "instruction": self.instruction.to_json(),
                "satisfied": bool(self.satisfied), "target_aabb": box(self.target),
                "anchor_aabb": box(self.anchor), "frame_view_id": self.frame_view_id,
                "per_view": per_view, "note": self.note}


@dataclass
class _Side:
    maps: dict[int, RelevanceMap]
    candidates: list[Candidate]
    merged: list[MergedCandidate]


def _side(scene, fld, views, caches, ctx, scale, cfg: GroundConfig) -> _Side:
    maps, cands = {}, []
    for cam in views:
        rmap = relevance_map(scene, fld, cam, ctx, scale, caches[cam.view_id], cfg.min_feature_norm)
        maps[cam.view_id] = rmap
        regions = extract_regions(rmap, cfg.tau, cfg.min_pixels)
        cache = caches[cam.view_id]
        inst = None
        if regions and cache.bundle.lead_weight is not None:
            inst = cache.render(fld, "instance", fld.instance.level_of(scale)).reshape(*cache.shape, -1)
        if cfg.split_regions and inst is not None:
            opaque = cache.bundle.lead_weight.reshape(cache.shape) >= cfg.min_opacity
            regions = [part for r in regions
                       for part in split_region(r, inst, opaque, cfg.graph_epsilon(fld), cfg.min_pixels)]
        for region in regions:
            try:
                cands.append(make_candidate(region, rmap, scene, fld, cam, scale, cache, cfg.min_opacity,
                                            inst, cfg.graph_epsilon(fld)))
            except CandidateRejected as e:
                log.debug("view %d: candidate rejected (%s)", cam.view_id, e)
    if not cands:
        return _Side(maps, cands, [])
    if cfg.use_instance_graph:
        comps = connected_components(build_graph(cands, cfg.graph_epsilon(fld)))
    else:
        comps = [[i] for i in range(len(cands))]
    cams = {c.view_id: c for c in views}
    depths = {c.view_id: caches[c.view_id].depth for c in views}
    opacity = {c.view_id: caches[c.view_id].bundle.lead_weight.reshape(caches[c.view_id].shape)
               for c in views if caches[c.view_id].bundle.lead_weight is not None}
    merged = merge(comps, cands, cams, depths, cfg.depth_k, cfg.depth_floor, opacity, cfg.min_opacity)
    return _Side(maps, cands, drop_weak(merged, cfg.min_relative_relevance))


def _same(a: MergedCandidate, b: MergedCandidate) -> bool:
    """Whether two merged candidates cover the same pixels (same-category proximity queries)."""
    inter = union = 0
    for vid in set(a.masks) | set(b.masks):
        ma, mb = a.masks.get(vid), b.masks.get(vid)
        if ma is None or mb is None:
            union += int((ma if ma is not None else mb).sum())
            continue
        inter += int((ma & mb).sum())
        union += int((ma | mb).sum())
    return union > 0 and inter / union > 0.5


def ground(scene: Scene, fld: FeatureField, supervision, instruction: Instruction, views: Sequence[CameraView],
           ctxs: tuple[QueryContext, QueryContext], config: GroundConfig | None = None,
           caches: dict[int, ViewCache] | None = None, query_id: str = "") -> GroundingResult:
    """Localize the target that stands in the instructed relation to the anchor.

    ``ctxs`` holds the target and anchor query contexts. Allocentric relations
    are judged in the frame of the first view in ``views``.
    """
    cfg = config or GroundConfig()
    if not views:
        raise ValueError("ground needs at least one view")
    caches = caches if caches is not None else {}
    for cam in views:
        if cam.view_id not in caches:
            caches[cam.view_id] = ViewCache(scene, cam, fld.sampling, fld.sigma_ref)
    t_ctx, a_ctx = ctxs
    t_side = _side(scene, fld, views, caches, t_ctx, select_scale(supervision, t_ctx.query), cfg)
    a_side = _side(scene, fld, views, caches, a_ctx, select_scale(supervision, a_ctx.query), cfg)
    if not a_side.merged:
        raise GroundError("AnchorNotFound", f"no region above tau for {instruction.anchor!r}")
    if not t_side.merged:
        raise GroundError("TargetNotFound", f"no region above tau for {instruction.target!r}")
    frame = views[0]
    rel = instruction.relation
    pairs = []
    for ti, t in enumerate(t_side.merged):
        for ai, a in enumerate(a_side.merged):
            if instruction.target == instruction.anchor and _same(t, a):
                continue
            others = [o.box for k, o in enumerate(t_side.merged)
                      if k != ti and not _same(o, a)]
            ok = check_relation(t.box, a.box, rel, frame, others, cfg.relation)
            pairs.append((ok, ti, ai, horizontal_distance(t.box, a.box)))
    satisfied = [p for p in pairs if p[0]]
    note = ""
    if satisfied:
        _, ti, ai, _ = min(satisfied, key=lambda p: (-t_side.merged[p[1]].mean_relevance,
                                                      -a_side.merged[p[2]].mean_relevance, p[3]))
    else:
        note = "no candidate pair satisfies the relation; best-relevance fallback"
        ti = max(range(len(t_side.merged)), key=lambda k: (t_side.merged[k].mean_relevance, -k))
        ai = max(range(len(a_side.merged)), key=lambda k: (a_side.merged[k].mean_relevance, -k))
    target, anchor = t_side.merged[ti], a_side.merged[ai]
    maps = {vid: m.restricted(target.masks.get(vid)) for vid, m in t_side.maps.items()}
    return GroundingResult(query_id, instruction, target, anchor, maps, t_side.maps, a_side.maps,
                           bool(satisfied), frame.view_id, note, len(t_side.candidates), len(a_side.candidates))
