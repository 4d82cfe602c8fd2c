"""Seeded generation of desk-scale scenes with relation-disambiguated queries.

Every relation constraint becomes a small "station": one anchor instance
and two instances of the target category, placed so that exactly one of
them satisfies the relation. Stations are scattered over a floor slab and
viewed by cameras on a ring around the room.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .parse import TEMPLATES, Instruction, Relation, RelationClass, generate_query, relation_phrases
from .relations import Box, RelationConfig, check_relation
from .scene import Annotation, CameraView, Pose, Primitive, Scene


class GenerationError(RuntimeError):
    pass


# (shape, extents) with box half extents, sphere (r, r, r), cylinder (r, r, half height)
SMALL = {
    "book": ("box", (0.15, 0.11, 0.035)),
    "mug": ("cylinder", (0.08, 0.08, 0.09)),
    "laptop": ("box", (0.17, 0.12, 0.025)),
    "bottle": ("cylinder", (0.065, 0.065, 0.14)),
    "vase": ("cylinder", (0.085, 0.085, 0.13)),
    "bowl": ("cylinder", (0.11, 0.11, 0.05)),
    "ball": ("sphere", (0.1, 0.1, 0.1)),
    "apple": ("sphere", (0.075, 0.075, 0.075)),
    "lamp": ("cylinder", (0.08, 0.08, 0.16)),
    "clock": ("box", (0.12, 0.06, 0.12)),
    "plant": ("cylinder", (0.1, 0.1, 0.14)),
    "teapot": ("sphere", (0.1, 0.1, 0.1)),
    "basket": ("box", (0.15, 0.12, 0.1)),
    "pillow": ("box", (0.18, 0.13, 0.06)),
    "jar": ("cylinder", (0.075, 0.075, 0.1)),
    "kettle": ("cylinder", (0.09, 0.09, 0.11)),
    "radio": ("box", (0.14, 0.07, 0.08)),
    "speaker": ("box", (0.09, 0.09, 0.14)),
    "candle": ("cylinder", (0.055, 0.055, 0.11)),
    "toy": ("sphere", (0.085, 0.085, 0.085)),
    "shoe": ("box", (0.14, 0.07, 0.06)),
    "pot": ("cylinder", (0.1, 0.1, 0.09)),
}
MEDIUM = {
    "chair": ("box", (0.23, 0.23, 0.23)),
    "stool": ("cylinder", (0.2, 0.2, 0.23)),
    "cabinet": ("box", (0.26, 0.21, 0.3)),
    "bench": ("box", (0.4, 0.2, 0.21)),
    "box": ("box", (0.21, 0.21, 0.17)),
}
# raised slabs: (half extents, height of the slab centre)
SLABS = {
    "table": ((0.42, 0.3, 0.03), 0.62),
    "desk": ((0.45, 0.28, 0.03), 0.66),
    "shelf": ((0.38, 0.24, 0.03), 0.55),
}
FLOOR = "floor"


@dataclass
class RelationConstraint:
    relation: str
    target: str
    anchor: str

    def to_json(self) -> dict:
        return {"relation": self.relation, "target": self.target, "anchor": self.anchor}


@dataclass
class GenConfig:
    constraints: list[RelationConstraint]
    counts: dict[str, int] = field(default_factory=dict)
    n_views: int = 4
    width: int = 160
    height: int = 120
    focal: float = 150.0
    room_half: float = 1.4
    cam_radius: float = 2.7
    cam_height: float = 1.7
    max_retries: int = 200
    min_visible_pixels: int = 25

    def __post_init__(self):
        if not self.constraints:
            raise ValueError("at least one relation constraint is required")
        self.constraints = [c if isinstance(c, RelationConstraint) else RelationConstraint(**c)
                            for c in self.constraints]
        for c in self.constraints:
            Relation.parse(c.relation)
            _shape_of(c.target)
            _shape_of(c.anchor)

    @classmethod
    def from_json(cls, d: dict) -> "GenConfig":
        d = dict(d)
        return cls(**d)

    def to_json(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "constraints"}
        d["constraints"] = [c.to_json() for c in self.constraints]
        return d


def _shape_of(category: str):
    if category in SMALL:
        return SMALL[category]
    if category in MEDIUM:
        return MEDIUM[category]
    if category in SLABS:
        return ("box", SLABS[category][0])
    raise ValueError(f"no shape template for category {category!r}")


def category_albedo(category: str) -> np.ndarray:
    h = hashlib.blake2b(category.encode(), digest_size=3).digest()
    return 0.15 + 0.7 * np.frombuffer(h, dtype=np.uint8) / 255.0


def random_gen_config(seed: int, **kwargs) -> GenConfig:
    """One constraint per relation class with distinct categories."""
    rng = np.random.default_rng(seed)
    small = list(SMALL)
    medium = list(MEDIUM)
    slabs = list(SLABS)
    rng.shuffle(small)
    rng.shuffle(medium)
    rng.shuffle(slabs)
    cons = []
    support = rng.choice(["SupportedBy", "Supporting"])
    if support == "SupportedBy":
        cons.append(RelationConstraint("Support/SupportedBy", small.pop(), medium.pop()))
    else:
        cons.append(RelationConstraint("Support/Supporting", medium.pop(), small.pop()))
    vertical = rng.choice(["Above", "Below"])
    anchor = medium.pop() if vertical == "Above" else slabs.pop()
    cons.append(RelationConstraint(f"VerticalProximity/{vertical}", small.pop(), anchor))
    cons.append(RelationConstraint(f"HorizontalProximity/{rng.choice(['Near', 'Far'])}", small.pop(), small.pop()))
    allo = rng.choice(["Left", "Right", "Front", "Behind"])
    cons.append(RelationConstraint(f"Allocentric/{allo}", small.pop(), small.pop()))
    return GenConfig(cons, **kwargs)


def _cameras(cfg: GenConfig, rng) -> list[CameraView]:
    cams = []
    for k in range(cfg.n_views):
        az = -np.pi / 2 + 2 * np.pi * k / cfg.n_views + rng.uniform(-0.12, 0.12)
        r = cfg.cam_radius + rng.uniform(-0.1, 0.1)
        eye = [r * np.cos(az), r * np.sin(az), cfg.cam_height + rng.uniform(-0.1, 0.1)]
        cams.append(CameraView.look_at(eye, [0.0, 0.0, 0.15], fx=cfg.focal, fy=cfg.focal,
                                       width=cfg.width, height=cfg.height, view_id=k))
    return cams


@dataclass
class _Obj:
    category: str
    shape: str
    extents: np.ndarray
    center: np.ndarray
    yaw: float = 0.0
    role: str = ""

    def box(self) -> Box:
        p = self.prim(0)
        return Box(*p.aabb())

    def prim(self, pid: int, albedo=None) -> Primitive:
        return Primitive(pid, self.category, self.shape, Pose.from_yaw(self.yaw, self.center),
                         np.asarray(self.extents, dtype=float),
                         category_albedo(self.category) if albedo is None else albedo)


def _make(cat, xy, z_bottom, rng, role, yaw=None):
    if cat in SLABS:
        ext, zc = SLABS[cat]
        return _Obj(cat, "box", np.array(ext), np.array([xy[0], xy[1], zc]),
                    rng.uniform(-0.3, 0.3) if yaw is None else yaw, role)
    shape, ext = _shape_of(cat)
    ext = np.array(ext)
    return _Obj(cat, shape, ext, np.array([xy[0], xy[1], z_bottom + ext[2]]),
                rng.uniform(-np.pi, np.pi) if yaw is None else yaw, role)


def _radius(o: _Obj) -> float:
    return float(np.hypot(o.extents[0], o.extents[1]))


def _station(con: RelationConstraint, rng, frame: CameraView) -> list[_Obj]:
    """Objects around an anchor at the origin; roles 'anchor', 'gt', 'alt'."""
    rel = Relation.parse(con.relation)
    sub = rel.subtype
    T, A = con.target, con.anchor
    if rel.kind is RelationClass.SUPPORT:
        base_cat, top_cat = (A, T) if sub == "SupportedBy" else (T, A)
        base = _make(base_cat, (0.0, 0.0), 0.0, rng, "anchor" if sub == "SupportedBy" else "gt")
        top_z = base.center[2] + base.extents[2]
        top = _make(top_cat, rng.uniform(-0.04, 0.04, 2), top_z, rng, "gt" if sub == "SupportedBy" else "anchor")
        other_cat = T
        ang = rng.uniform(-np.pi, np.pi)
        d = _radius(base) + _radius(_make(other_cat, (0, 0), 0, rng, "")) + rng.uniform(0.15, 0.3)
        alt = _make(other_cat, (d * np.cos(ang), d * np.sin(ang)), 0.0, rng, "alt")
        return [base, top, alt]
    if rel.kind is RelationClass.VERTICAL:
        anchor = _make(A, (0.0, 0.0), 0.0, rng, "anchor")
        if sub == "Above":
            z = anchor.center[2] + anchor.extents[2] + rng.uniform(0.12, 0.3)
            gt = _make(T, rng.uniform(-0.03, 0.03, 2), z, rng, "gt")
        else:
            gt = _make(T, rng.uniform(-0.05, 0.05, 2), 0.0, rng, "gt")
        ang = rng.uniform(-np.pi, np.pi)
        d = _radius(anchor) + _radius(gt) + rng.uniform(0.15, 0.3)
        alt = _make(T, (d * np.cos(ang), d * np.sin(ang)), 0.0, rng, "alt")
        return [anchor, gt, alt]
    if rel.kind is RelationClass.HORIZONTAL:
        anchor = _make(A, (0.0, 0.0), 0.0, rng, "anchor")
        probe = _make(T, (0, 0), 0, rng, "")
        near_d = _radius(anchor) + _radius(probe) + rng.uniform(0.08, 0.15)
        far_d = near_d + rng.uniform(0.55, 0.75)
        a1, a2 = rng.uniform(-np.pi, np.pi), 0.0
        a2 = a1 + rng.uniform(2.0, 4.3)
        near = _make(T, (near_d * np.cos(a1), near_d * np.sin(a1)), 0.0, rng, "gt" if sub == "Near" else "alt")
        far = _make(T, (far_d * np.cos(a2), far_d * np.sin(a2)), 0.0, rng, "gt" if sub == "Far" else "alt")
        return [anchor, near, far]
    # allocentric: offsets along the reference camera's ground-plane axes
    R = frame.pose.rotation
    right = R[:2, 0] / np.linalg.norm(R[:2, 0])
    fwd = R[:2, 2] / np.linalg.norm(R[:2, 2])
    anchor = _make(A, (0.0, 0.0), 0.0, rng, "anchor")
    probe = _make(T, (0, 0), 0, rng, "")
    d = _radius(anchor) + _radius(probe) + rng.uniform(0.12, 0.22)
    if sub in ("Left", "Right"):
        axis, lateral = right, fwd
    else:
        axis, lateral = -fwd, right
    jitter = rng.uniform(-0.05, 0.05, 2)
    positive = (sub in ("Right", "Front"))
    side = 0.0 if sub in ("Left", "Right") else 0.18
    p1 = d * axis + side * lateral + jitter
    p2 = -d * axis - side * lateral - jitter
    o1 = _make(T, p1, 0.0, rng, "gt" if positive else "alt")
    o2 = _make(T, p2, 0.0, rng, "alt" if positive else "gt")
    return [anchor, o1, o2]


def _disjoint(a: Box, b: Box, margin: float) -> bool:
    return bool(np.any(a.lo - margin >= b.hi) or np.any(b.lo - margin >= a.hi))


def _interpenetrate(a: Box, b: Box) -> bool:
    return bool(np.all(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo) > 1e-6))


def generate_scene(config: GenConfig, seed: int, template_ids=None) -> Scene:
    """Deterministic scene satisfying every constraint, with one annotated query each."""
    rng = np.random.default_rng(seed)
    anchors = [c.anchor for c in config.constraints]
    if len(set(anchors)) != len(anchors) or set(anchors) & {c.target for c in config.constraints}:
        raise GenerationError("anchor categories must be unique and distinct from targets")
    targets = [c.target for c in config.constraints]
    if len(set(targets)) != len(targets):
        raise GenerationError("each constraint needs its own target category")
    for cat, n in config.counts.items():
        need = 2 if cat in targets else (1 if cat in anchors else 0)
        if n < need:
            raise GenerationError(f"count {n} for {cat!r} is below the {need} instances the constraints need")
    cams = _cameras(config, rng)
    for attempt in range(config.max_retries):
        placed: list[_Obj] = []
        contacts: set[tuple[int, int]] = set()
        roles = []
        ok = True
        for con in config.constraints:
            group = None
            for _ in range(60):
                objs = _station(con, rng, cams[0])
                c = rng.uniform(-config.room_half + 0.4, config.room_half - 0.4, 2)
                for o in objs:
                    o.center = o.center + np.array([c[0], c[1], 0.0])
                boxes = [o.box() for o in objs]
                inside = all(np.all(np.abs(b.lo[:2]) < config.room_half - 0.05)
                             and np.all(np.abs(b.hi[:2]) < config.room_half - 0.05) for b in boxes)
                if inside and all(_disjoint(b, p.box(), 0.12) for b in boxes for p in placed):
                    group = objs
                    break
            if group is None:
                ok = False
                break
            base = len(placed)
            placed.extend(group)
            roles.append({o.role: base + i for i, o in enumerate(group)})
            if Relation.parse(con.relation).kind is RelationClass.SUPPORT:
                contacts.add((base, base + 1))
        if not ok:
            continue
        extra = _fill_counts(config, placed, rng)
        if extra is None:
            continue
        placed.extend(extra)
        scene = _assemble(placed, cams, rng, config.room_half + 0.1)
        if _check(scene, config, placed, roles, contacts):
            scene.annotations = _annotate(config, roles, rng, template_ids)
            return scene
    raise GenerationError(f"could not satisfy constraints after {config.max_retries} attempts")


def _fill_counts(config, placed, rng):
    have: dict[str, int] = {}
    for o in placed:
        have[o.category] = have.get(o.category, 0) + 1
    extra = []
    for cat, n in sorted(config.counts.items()):
        for _ in range(n - have.get(cat, 0)):
            for _ in range(100):
                xy = rng.uniform(-config.room_half + 0.3, config.room_half - 0.3, 2)
                o = _make(cat, xy, 0.0, rng, "extra")
                if all(_disjoint(o.box(), p.box(), 0.12) for p in placed + extra):
                    extra.append(o)
                    break
            else:
                return None
    return extra


def _assemble(placed, cams, rng, half) -> Scene:
    floor = Primitive(0, FLOOR, "box", Pose(np.eye(3), np.array([0.0, 0.0, -0.03])),
                      np.array([half, half, 0.03]), np.array([0.45, 0.45, 0.42]))
    prims = [floor]
    for i, o in enumerate(placed):
        albedo = np.clip(category_albedo(o.category) + rng.uniform(-0.04, 0.04, 3), 0.0, 1.0)
        prims.append(o.prim(i + 1, albedo))
    return Scene(prims, cams)


def _check(scene, config, placed, roles, contacts) -> bool:
    boxes = [o.box() for o in placed]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _interpenetrate(boxes[i], boxes[j]):
                return False
    rcfg = RelationConfig()
    for con, r in zip(config.constraints, roles):
        rel = Relation.parse(con.relation)
        gt, alt, anc = boxes[r["gt"]], boxes[r["alt"]], boxes[r["anchor"]]
        if not check_relation(gt, anc, rel, scene.cameras[0], [alt], rcfg):
            return False
        if check_relation(alt, anc, rel, scene.cameras[0], [gt], rcfg):
            return False
    return _visible_enough(scene, config, [r["gt"] + 1 for r in roles])


def _visible_enough(scene, config, ids) -> bool:
    from .scene import render_view
    counts = {i: 0 for i in ids}
    for cam in scene.cameras:
        v = render_view(scene, cam).instance_ids
        for i in ids:
            if (v == i).sum() >= config.min_visible_pixels:
                counts[i] += 1
    # every ground-truth target must be seen well in at least half the views
    return all(c >= max(1, config.n_views // 2) for c in counts.values())


def _annotate(config, roles, rng, template_ids) -> list[Annotation]:
    out = []
    for k, (con, r) in enumerate(zip(config.constraints, roles)):
        rel = Relation.parse(con.relation)
        ins = Instruction(con.target, con.anchor, rel)
        tid = int(rng.integers(len(TEMPLATES))) if template_ids is None else template_ids[k % len(template_ids)]
        phrases = relation_phrases(rel)
        phrase = phrases[int(rng.integers(len(phrases)))]
        text = generate_query(ins, tid, phrase)
        out.append(Annotation(f"q{k}", r["gt"] + 1, r["anchor"] + 1, str(rel), text))
    return out


def scene_to_json(scene: Scene) -> dict:
    return {
        "units": scene.units,
        "primitives": [{"id": p.id, "category": p.category, "shape": p.shape, "pose": p.pose.to_json(),
                        "extents": [float(x) for x in p.extents], "albedo": [float(x) for x in p.albedo]}
                       for p in scene.primitives],
        "cameras": [c.to_json() for c in scene.cameras],
        "annotations": [{"query_id": a.query_id, "target_id": a.target_id, "anchor_id": a.anchor_id,
                         "relation": a.relation} for a in scene.annotations],
    }


def scene_from_json(d: dict, queries: list | None = None) -> Scene:
    prims = [Primitive(int(p["id"]), p["category"], p["shape"], Pose.from_json(p["pose"]),
                       np.asarray(p["extents"], dtype=float), np.asarray(p["albedo"], dtype=float))
             for p in d["primitives"]]
    cams = [CameraView.from_json(c) for c in d.get("cameras", [])]
    texts = {q["query_id"]: q["text"] for q in (queries or [])}
    anns = [Annotation(a["query_id"], int(a["target_id"]), int(a["anchor_id"]), a["relation"],
                       texts.get(a["query_id"], "")) for a in d.get("annotations", [])]
    return Scene(prims, cams, anns, d.get("units", "m"))


def write_scene_dir(scene: Scene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene.json").write_text(json.dumps(scene_to_json(scene), indent=1))
    queries = [{"query_id": a.query_id, "text": a.text} for a in scene.annotations]
    (out / "queries.json").write_text(json.dumps(queries, indent=1))


def read_scene_dir(scene_dir) -> Scene:
    d = Path(scene_dir)
    queries = json.loads((d / "queries.json").read_text()) if (d / "queries.json").exists() else None
    return scene_from_json(json.loads((d / "scene.json").read_text()), queries)
