"""Supervision triplets, field losses and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .embed import Vocabulary, mask_embedding
from .field import FeatureField, SampleConfig, ViewCache, build_caches, log_edges
from .scene import CameraView, DegenerateMaskError, Mask, Scene, masks_from_view, physical_scale, render_view

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SupervisionTriplet:
    mask: Mask
    scale: float
    embedding: np.ndarray
    category: str = ""

    @property
    def view_id(self) -> int:
        return self.mask.view_id


@dataclass
class TrainConfig:
    lambda_l: float = 1.0
    lambda_in: float = 1.0
    lr: float = 0.05
    lr_final_ratio: float = 0.1
    steps: int = 2000
    K: int = 64
    near: float = 0.5
    far: float = 6.0
    rays_per_step: int = 512
    seed: int = 0
    resolutions: tuple = (16, 32, 64)
    lang_dim: int = 64
    inst_dim: int = 16
    inst_init_std: float = 0.05
    use_vis_mod: bool = True
    vis_mod_lr_scale: float = 1.0
    max_row_norm: float = 1.0
    cascade_levels: bool = True
    area_power: float = 1.0
    vis_max_norm: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    bounds_pad: float = 0.05

    def __post_init__(self):
        if self.lambda_l <= 0 or self.lambda_in <= 0:
            raise ValueError("lambda_l and lambda_in must be positive")
        if self.steps < 0 or self.rays_per_step < 2:
            raise ValueError("steps must be >= 0 and rays_per_step >= 2")
        self.resolutions = tuple(int(r) for r in self.resolutions)
        SampleConfig(self.K, self.near, self.far)

    @property
    def sampling(self) -> SampleConfig:
        return SampleConfig(self.K, self.near, self.far)

    def to_json(self) -> dict:
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        return d


def build_supervision(scene: Scene, views: Sequence[CameraView], vocab: Vocabulary, noise: float,
                      caches: dict[int, ViewCache] | None = None, sampling: SampleConfig | None = None,
                      stats: dict | None = None, opaque_min: float = 0.9) -> list[SupervisionTriplet]:
    """One triplet per visible instance per view.

    Mask pixels are deprojected with the quadrature depth of the rendered
    occupancy. Pixels whose ray leaks more than ``1 - opaque_min`` of its
    weight past the masked instance (grazing rays at silhouettes) are dropped
    from the triplet, so they cannot smear the label onto surfaces behind.
    """
    if not views:
        raise ValueError("build_supervision needs at least one view")
    sampling = sampling or SampleConfig()
    caches = caches if caches is not None else build_caches(scene, views, sampling)
    out = []
    skipped = 0
    for cam in views:
        cache = caches[cam.view_id]
        depth = cache.depth
        lead_w = cache.bundle.lead_weight.reshape(cache.shape)
        lead_id = cache.bundle.lead_id.reshape(cache.shape)
        for m in masks_from_view(render_view(scene, cam)):
            solid = m.pixels & np.isfinite(depth) & (lead_id == m.instance_id) & (lead_w >= opaque_min)
            v, u = np.nonzero(solid)
            try:
                if u.size < 2:
                    raise DegenerateMaskError
                pts = cam.origin + cam.pixel_dirs(u, v) * depth[v, u][:, None]
                scale = physical_scale(pts)
                if scale <= 0:
                    raise DegenerateMaskError
            except DegenerateMaskError:
                skipped += 1
                continue
            cat = scene.category_of(m.instance_id)
            core = Mask(m.view_id, solid, m.instance_id)
            out.append(SupervisionTriplet(core, scale, mask_embedding(vocab, cat, cam.view_id, noise), cat))
    if skipped:
        log.info("skipped %d degenerate masks", skipped)
    if stats is not None:
        stats["skipped"] = skipped
    return out


def language_loss(rendered_raw, gt, lambda_l: float = 1.0):
    gt = np.asarray(gt, dtype=float)
    loss = -lambda_l * float(np.dot(rendered_raw, gt))
    return loss, -lambda_l * gt


def instance_loss(psi_i, psi_j, same_mask: bool, lambda_in: float = 1.0):
    """Margin contrastive loss and its (sub)gradients with respect to both features."""
    diff = np.asarray(psi_i, dtype=float) - np.asarray(psi_j, dtype=float)
    dist = float(np.linalg.norm(diff))
    unit = diff / dist if dist > 0 else np.zeros_like(diff)
    if same_mask:
        return dist, unit, -unit
    if dist < lambda_in:
        return lambda_in - dist, -unit, unit
    return 0.0, np.zeros_like(diff), np.zeros_like(diff)


def _instance_batch(psi, pi, pj, same, lambda_in):
    """Vectorized mean instance loss over pairs ``(pi[k], pj[k])`` and its gradient wrt ``psi``."""
    diff = psi[pi] - psi[pj]
    dist = np.linalg.norm(diff, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    active = same | (dist < lambda_in)
    per = np.where(same, dist, np.maximum(lambda_in - dist, 0.0))
    sign = np.where(same, 1.0, -1.0) * active
    g = unit * sign[:, None] / len(pi)
    grad = np.zeros_like(psi)
    np.add.at(grad, pi, g)
    np.add.at(grad, pj, -g)
    return float(per.mean()), grad


class _RowAdam:
    """Adam whose second moment is shared by the D entries of each grid vertex.

    Sharing the denominator keeps each update parallel to the accumulated
    gradient of the vertex feature, so directions learned from a linear
    loss are not distorted coordinate by coordinate.
    """

    def __init__(self, n_rows: int, dim: int, beta1: float, beta2: float, eps: float):
        self.m = np.zeros((n_rows, dim))
        self.v = np.zeros(n_rows)
        self.b1, self.b2, self.eps = beta1, beta2, eps

    def step(self, param: np.ndarray, rows: np.ndarray, grad: np.ndarray, lr: float, t: int,
             max_norm: float | None = None):
        m = self.m[rows]
        m *= self.b1
        m += (1 - self.b1) * grad
        self.m[rows] = m
        v = self.b2 * self.v[rows] + (1 - self.b2) * np.einsum("rd,rd->r", grad, grad) / grad.shape[1]
        self.v[rows] = v
        scale = lr / (1 - self.b1 ** t) / (np.sqrt(v / (1 - self.b2 ** t)) + self.eps)
        new = param[rows]
        new -= scale[:, None] * m
        if max_norm is not None:
            # projection onto the row-wise norm ball; the language loss is linear and unbounded otherwise
            norm = np.sqrt(np.einsum("rd,rd->r", new, new))
            new *= np.minimum(1.0, max_norm / np.maximum(norm, 1e-30))[:, None]
        param[rows] = new


@dataclass
class Batch:
    """Rays of one view with per-ray level, target embedding and mask label."""

    view_id: int
    rows: np.ndarray
    levels: np.ndarray
    gt: np.ndarray
    labels: np.ndarray
    pos: tuple[np.ndarray, np.ndarray]
    neg: tuple[np.ndarray, np.ndarray]


def _compact(S: sp.csr_matrix):
    cols, inv = np.unique(S.indices, return_inverse=True)
    Sc = sp.csr_matrix((S.data, inv.ravel(), S.indptr), shape=(S.shape[0], cols.size))
    return cols, Sc


def _forward(fld: FeatureField, kind: str, cache: ViewCache, batch: Batch):
    """Raw rendered features of the batch plus what the backward pass needs."""
    pyr = fld.pyramid(kind)
    out = np.zeros((batch.rows.size, pyr.dim))
    parts = []
    for level in np.unique(batch.levels):
        sel = np.flatnonzero(batch.levels == level)
        S = cache.design(fld, pyr.resolutions[level], lead_only=True)[batch.rows[sel]]
        cols, Sc = _compact(S)
        out[sel] = Sc @ pyr.flat(level)[cols]
        parts.append((int(level), sel, cols, Sc))
    vp = cache.centered_vp(fld, True, batch.rows)
    out += vp @ fld.vis_mod(kind).T
    return out, parts, vp


def _losses(fld: FeatureField, cache: ViewCache, batch: Batch, cfg: TrainConfig):
    phi, lparts, vp = _forward(fld, "language", cache, batch)
    psi, iparts, _ = _forward(fld, "instance", cache, batch)
    n = batch.rows.size
    l_lang = -cfg.lambda_l * float(np.einsum("nd,nd->", phi, batch.gt)) / n
    g_phi = -cfg.lambda_l * batch.gt / n
    pi = np.concatenate([batch.pos[0], batch.neg[0]])
    pj = np.concatenate([batch.pos[1], batch.neg[1]])
    same = np.concatenate([np.ones(batch.pos[0].size, bool), np.zeros(batch.neg[0].size, bool)])
    if pi.size:
        l_inst, g_psi = _instance_batch(psi, pi, pj, same, cfg.lambda_in)
    else:
        l_inst, g_psi = 0.0, np.zeros_like(psi)
    return l_lang, l_inst, (g_phi, lparts), (g_psi, iparts), vp


def batch_loss(fld: FeatureField, cache: ViewCache, batch: Batch, cfg: TrainConfig) -> float:
    l_lang, l_inst, *_ = _losses(fld, cache, batch, cfg)
    return l_lang + l_inst


def batch_gradients(fld: FeatureField, cache: ViewCache, batch: Batch, cfg: TrainConfig):
    """Total loss and sparse gradients ``{(kind, level): (rows, grad)}`` plus vis_mod gradients."""
    l_lang, l_inst, (g_phi, lparts), (g_psi, iparts), vp = _losses(fld, cache, batch, cfg)
    grads = {}
    for kind, g, parts in (("language", g_phi, lparts), ("instance", g_psi, iparts)):
        for level, sel, cols, Sc in parts:
            grads[(kind, level)] = (cols, Sc.T @ g[sel])
    gw = {"language": g_phi.T @ vp, "instance": g_psi.T @ vp}
    return l_lang, l_inst, grads, gw


class BatchSampler:
    """Draws one view per step and ``rays_per_step / 2`` triplets with two pixels each.

    With ``cascade`` a ray supervises its own level and every finer one, so
    large surfaces also occupy the fine grids and compete with small objects
    at their silhouettes instead of leaving blank cells to absorb them.
    """

    def __init__(self, supervision: Sequence[SupervisionTriplet], pyramid_level, rays_per_step: int, seed: int,
                 n_levels: int = 1, cascade: bool = False, area_power: float = 1.0):
        self.rng = np.random.default_rng(seed)
        self.by_view: dict[int, list[SupervisionTriplet]] = {}
        for tr in supervision:
            if tr.mask.pixels.any():
                self.by_view.setdefault(tr.view_id, []).append(tr)
        self.views = sorted(self.by_view)
        self.pixels = {id(tr): np.flatnonzero(tr.mask.pixels.ravel()) for tr in supervision}
        # area_power = 1 makes every pixel of a view equally likely
        self.probs = {}
        for view, trips in self.by_view.items():
            a = np.array([self.pixels[id(t)].size for t in trips], dtype=float) ** area_power
            self.probs[view] = a / a.sum()
        self.level = pyramid_level
        self.half = rays_per_step // 2
        self.n_levels = n_levels
        self.cascade = cascade

    def sample(self) -> Batch:
        rng = self.rng
        view = self.views[rng.integers(len(self.views))]
        trips = self.by_view[view]
        pick = rng.choice(len(trips), size=self.half, p=self.probs[view])
        rows = np.empty(2 * self.half, dtype=np.int64)
        for k, ti in enumerate(pick):
            px = self.pixels[id(trips[ti])]
            rows[2 * k:2 * k + 2] = px[rng.integers(px.size, size=2)]
        labels = np.repeat(pick, 2)
        levels = np.asarray(self.level(np.array([trips[ti].scale for ti in labels])), dtype=np.int64)
        first = np.arange(self.half) * 2
        partner = first[rng.permutation(self.half)]
        differ = labels[first] != labels[partner]
        pos = (first, first + 1)
        neg = (first[differ], partner[differ])
        if self.cascade:
            rows, levels, labels, pos, neg = _cascade(rows, levels, labels, pos, neg, self.n_levels)
        gt = np.stack([trips[ti].embedding for ti in labels])
        return Batch(view, rows, levels, gt, labels, pos, neg)


def _cascade(rows, levels, labels, pos, neg, n_levels):
    """Copy every ray to each finer level; pairs survive where both ends do."""
    out_idx, out_lvl, pos_out, neg_out = [], [], ([], []), ([], [])
    offset = 0
    for level in range(n_levels):
        keep = np.flatnonzero(levels <= level)
        remap = np.full(rows.size, -1)
        remap[keep] = offset + np.arange(keep.size)
        for src, dst in ((pos, pos_out), (neg, neg_out)):
            a, b = remap[src[0]], remap[src[1]]
            ok = (a >= 0) & (b >= 0)
            dst[0].append(a[ok])
            dst[1].append(b[ok])
        out_idx.append(keep)
        out_lvl.append(np.full(keep.size, level))
        offset += keep.size
    idx = np.concatenate(out_idx)
    cat = lambda xs: np.concatenate(xs).astype(np.int64)
    return (rows[idx], np.concatenate(out_lvl).astype(np.int64), labels[idx],
            (cat(pos_out[0]), cat(pos_out[1])), (cat(neg_out[0]), cat(neg_out[1])))


def init_field(scene: Scene, supervision: Sequence[SupervisionTriplet], cfg: TrainConfig) -> FeatureField:
    lo, hi = scene.bounds(cfg.bounds_pad)
    edges = log_edges([t.scale for t in supervision], len(cfg.resolutions))
    fld = FeatureField.zeros(lo, hi, edges, cfg.resolutions, cfg.lang_dim, cfg.inst_dim,
                             cfg.sampling, cfg.inst_init_std, cfg.seed)
    fld.meta["train"] = cfg.to_json()
    return fld


def supervised_vp_mean(supervision: Sequence[SupervisionTriplet], caches: dict[int, ViewCache]) -> np.ndarray:
    """Pixel-weighted mean visual properties of the supervised (lead-only) rays."""
    vp, ws = np.zeros(4), 0.0
    for t in supervision:
        rows = np.flatnonzero(t.mask.pixels.ravel())
        cache = caches[t.view_id]
        vp += cache.vp_sum_of(True)[rows].sum(axis=0)
        ws += float(cache.w_sum_of(True)[rows].sum())
    return vp / ws if ws > 0 else np.zeros(4)


def train_fields(scene: Scene, supervision: Sequence[SupervisionTriplet], config: TrainConfig | None = None,
                 caches: dict[int, ViewCache] | None = None, field: FeatureField | None = None,
                 history: list | None = None) -> FeatureField:
    """Fit language and instance pyramids plus visual-property maps by lazy row-wise Adam.

    The learning rate decays exponentially from ``lr`` to ``lr * lr_final_ratio``.
    """
    cfg = config or TrainConfig()
    if not supervision:
        raise ValueError("train_fields needs supervision")
    fld = field if field is not None else init_field(scene, supervision, cfg)
    if cfg.steps == 0:
        return fld
    if caches is None:
        caches = build_caches(scene, [scene.cameras[i] for i in sorted({t.view_id for t in supervision})],
                              fld.sampling, fld.sigma_ref)
    if field is None:
        fld.vp_center = supervised_vp_mean(supervision, caches)
    sampler = BatchSampler(supervision, fld.language.level_of, cfg.rays_per_step, cfg.seed + 1,
                           len(fld.language.levels), cfg.cascade_levels, cfg.area_power)
    opt = {}
    for kind in ("language", "instance"):
        pyr = fld.pyramid(kind)
        for level, g in enumerate(pyr.levels):
            opt[(kind, level)] = _RowAdam(g.shape[0] ** 3, pyr.dim, cfg.beta1, cfg.beta2, cfg.adam_eps)
    vis_opt = {k: _RowAdam(4, fld.pyramid(k).dim, cfg.beta1, cfg.beta2, cfg.adam_eps) for k in ("language", "instance")}
    for step in range(1, cfg.steps + 1):
        lr = cfg.lr * cfg.lr_final_ratio ** ((step - 1) / max(cfg.steps - 1, 1))
        batch = sampler.sample()
        l_lang, l_inst, grads, gw = batch_gradients(fld, caches[batch.view_id], batch, cfg)
        if not (np.isfinite(l_lang) and np.isfinite(l_inst)):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        for (kind, level), (rows, g) in grads.items():
            bound = cfg.max_row_norm if kind == "language" else cfg.lambda_in
            opt[(kind, level)].step(fld.pyramid(kind).flat(level), rows, g, lr, step, bound)
        if cfg.use_vis_mod:
            for kind in ("language", "instance"):
                # columns of the (D, 4) map are the optimizer rows
                W = fld.vis_mod(kind)
                Wt = W.T.copy()
                vis_opt[kind].step(Wt, np.arange(4), gw[kind].T, lr * cfg.vis_mod_lr_scale, step,
                                    cfg.vis_max_norm)
                W[...] = Wt.T
        if history is not None:
            history.append((step, l_lang, l_inst))
    return fld
