"""Localization accuracy, mask IoU and the dataset benchmark harness."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .embed import make_context
from .field import build_caches
from .ground import GroundError, GroundingResult, ground
from .parse import ParseError, parse_query
from .scene import Mask, Scene, render_view
from .scenegen import read_scene_dir
from .train import TrainingDiverged, build_supervision, train_fields

log = logging.getLogger(__name__)

Box2D = tuple[int, int, int, int]    # u_min, v_min, u_max, v_max; inclusive


class MetricError(ValueError):
    pass


def mask_box(pixels: np.ndarray) -> Box2D:
    v, u = np.nonzero(pixels)
    if u.size == 0:
        raise MetricError("empty mask has no box")
    return int(u.min()), int(v.min()), int(u.max()), int(v.max())


def box_contains(box: Box2D, pixel) -> bool:
    u, v = pixel
    return box[0] <= u <= box[2] and box[1] <= v <= box[3]


@dataclass
class QueryCase:
    query_id: str
    text: str
    gt_target_id: int
    gt_masks: dict[int, Mask]
    gt_boxes: dict[int, Box2D]
    relation: str = ""
    scene_name: str = ""

    def __post_init__(self):
        if set(self.gt_masks) != set(self.gt_boxes):
            raise ValueError("gt masks and boxes must cover the same evaluation views")
        for vid, m in self.gt_masks.items():
            if m.area == 0:
                raise ValueError(f"empty ground-truth mask in view {vid}")

    @property
    def views(self) -> list[int]:
        return sorted(self.gt_masks)


def cases_from_scene(scene: Scene, name: str = "", min_pixels: int = 20) -> list[QueryCase]:
    """Ground-truth cases for every annotation; a view is scored when the target covers ``min_pixels``."""
    ids = {c.view_id: render_view(scene, c).instance_ids for c in scene.cameras}
    cases = []
    for a in scene.annotations:
        masks = {}
        for vid, im in ids.items():
            px = im == a.target_id
            if px.sum() >= min_pixels:
                masks[vid] = Mask(vid, px, a.target_id)
        cases.append(QueryCase(a.query_id, a.text, a.target_id, masks,
                               {v: mask_box(m.pixels) for v, m in masks.items()}, a.relation, name))
    return cases


def _map(result: GroundingResult, view_id: int):
    if view_id not in result.maps:
        raise MetricError(f"result has no relevance map for view {view_id}")
    return result.maps[view_id]


def localization_hit(result: GroundingResult, case: QueryCase, view_id: int) -> bool:
    """Whether the highest-relevance pixel of the target map falls inside the inclusive gt box."""
    rmap = _map(result, view_id)
    if view_id not in case.gt_boxes:
        raise MetricError(f"case {case.query_id} has no ground truth for view {view_id}")
    pixel = rmap.argmax_pixel
    return pixel is not None and box_contains(case.gt_boxes[view_id], pixel)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise MetricError("IoU of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def miou(result: GroundingResult, case: QueryCase, view_id: int, tau_bin: float = 0.5) -> float:
    """IoU between the binarized target map (restricted to the selected target) and the gt mask."""
    if not 0.0 < tau_bin < 1.0:
        raise ValueError("tau_bin must lie in (0, 1)")
    rmap = _map(result, view_id)
    gt = case.gt_masks.get(view_id)
    if gt is None or gt.area == 0:
        raise MetricError(f"empty ground-truth mask for view {view_id}")
    return mask_iou(rmap.values > tau_bin, gt.pixels)


# --- report ------------------------------------------------------------------

@dataclass
class CaseResult:
    scene: str
    query_id: str
    relation: str
    hit: bool
    iou: float
    runtime_s: float = 0.0
    satisfied: bool = False
    error: str | None = None
    message: str = ""

    def to_json(self, timing: bool = True) -> dict:
        d = {"scene": self.scene, "query_id": self.query_id, "relation": self.relation,
             "hit": self.hit, "iou": round(self.iou, 6), "satisfied": self.satisfied,
             "error": self.error, "message": self.message}
        if timing:
            d["runtime_s"] = round(self.runtime_s, 4)
        return d


def _mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else 0.0


@dataclass
class Report:
    header: dict
    cases: list[CaseResult] = field(default_factory=list)
    scene_times: dict[str, float] = field(default_factory=dict)
    record_timing: bool = True

    @property
    def accuracy(self) -> float:
        return 100.0 * _mean(c.hit for c in self.cases)

    @property
    def miou(self) -> float:
        return 100.0 * _mean(c.iou for c in self.cases)

    @property
    def mean_runtime(self) -> float:
        return _mean(c.runtime_s for c in self.cases)

    def by_relation(self) -> dict[str, dict]:
        out = {}
        for cls in sorted({c.relation.split("/")[0] for c in self.cases}):
            sub = [c for c in self.cases if c.relation.split("/")[0] == cls]
            out[cls] = {"n": len(sub), "accuracy": round(100.0 * _mean(c.hit for c in sub), 4),
                        "miou": round(100.0 * _mean(c.iou for c in sub), 4)}
        return out

    def aggregates(self) -> dict:
        d = {"n_cases": len(self.cases), "n_failures": sum(c.error is not None for c in self.cases),
             "accuracy": round(self.accuracy, 4), "miou": round(self.miou, 4),
             "by_relation": self.by_relation()}
        if self.record_timing:
            d["mean_runtime"] = round(self.mean_runtime, 4)
        return d

    def to_json(self) -> dict:
        d = {"header": self.header, "aggregates": self.aggregates(),
             "cases": [c.to_json(self.record_timing) for c in self.cases]}
        if self.record_timing:
            d["scene_train_s"] = {k: round(v, 3) for k, v in sorted(self.scene_times.items())}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        cols = ["scene", "query", "relation", "hit", "iou", "status"] + (["runtime_s"] if self.record_timing else [])
        rows = []
        for c in self.cases:
            r = [c.scene, c.query_id, c.relation, "yes" if c.hit else "no", f"{c.iou:.3f}", c.error or "ok"]
            if self.record_timing:
                r.append(f"{c.runtime_s:.2f}")
            rows.append(r)
        widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(cols)]
        line = lambda r: "  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip()
        out = [f"# tau_bin={self.header.get('tau_bin')} seed={self.header.get('seed')}",
               line(cols), line(["-" * w for w in widths])]
        out += [line(r) for r in rows]
        out.append(f"accuracy {self.accuracy:.2f}%  miou {self.miou:.2f}%  cases {len(self.cases)}"
                   + (f"  mean_runtime {self.mean_runtime:.3f}s" if self.record_timing else ""))
        for cls, agg in self.by_relation().items():
            out.append(f"  {cls:<20} n={agg['n']:<3} accuracy {agg['accuracy']:.2f}%  miou {agg['miou']:.2f}%")
        return "\n".join(out) + "\n"


# --- harness -----------------------------------------------------------------

def score_case(result: GroundingResult, case: QueryCase, tau_bin: float) -> tuple[bool, float]:
    """A case is a hit when every scored view is; its IoU is the mean over scored views."""
    if not case.views:
        raise MetricError(f"case {case.query_id} has no evaluation view")
    hits = [localization_hit(result, case, v) for v in case.views]
    ious = [miou(result, case, v, tau_bin) for v in case.views]
    return all(hits), float(np.mean(ious))


def scene_dirs(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    if (root / "scene.json").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "scene.json").is_file()) if root.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no scene.json under {root}")
    return dirs


def prepare_scene(scene: Scene, config: RunConfig, ckpt=None, threads: int = 1):
    """Field, caches and supervision for one scene; trains unless a checkpoint is given."""
    tcfg = config.train_config
    fld = checkpoint.load(ckpt) if ckpt is not None else None
    sampling = fld.sampling if fld is not None else tcfg.sampling
    sigma_ref = fld.sigma_ref if fld is not None else None
    kw = {} if sigma_ref is None else {"sigma_ref": sigma_ref}
    caches = build_caches(scene, scene.cameras, sampling, threads=threads, **kw)
    sup = build_supervision(scene, scene.cameras, config.vocab, config.noise, caches=caches,
                            sampling=sampling, opaque_min=config.opaque_min)
    if fld is None:
        # quantize so a freshly trained run and a checkpoint reload score identically
        fld = checkpoint.quantize(train_fields(scene, sup, tcfg, caches=caches))
    return fld, caches, sup


def ground_text(scene: Scene, fld, sup, caches, text: str, config: RunConfig, query_id: str = "",
                views=None) -> GroundingResult:
    ins = parse_query(text)
    vocab = config.vocab
    ctxs = (make_context(vocab, ins.target, config.canonicals), make_context(vocab, ins.anchor, config.canonicals))
    return ground(scene, fld, sup, ins, views or scene.cameras, ctxs, config.ground, caches, query_id)


def _evaluate(case: QueryCase, scene, fld, sup, caches, config: RunConfig) -> CaseResult:
    t0 = time.perf_counter()
    res = CaseResult(case.scene_name, case.query_id, case.relation, False, 0.0)
    try:
        result = ground_text(scene, fld, sup, caches, case.text, config, case.query_id)
        res.hit, res.iou = score_case(result, case, config.eval.tau_bin)
        res.satisfied = bool(result.satisfied)
        res.message = result.note
    except ParseError as e:
        res.error, res.message = "ParseError", str(e)
    except GroundError as e:
        res.error, res.message = e.kind, str(e)
    except MetricError as e:
        res.error, res.message = "MetricError", str(e)
    res.runtime_s = time.perf_counter() - t0
    return res


def run_benchmark(dataset_dir, config: RunConfig | None = None, use_checkpoints: bool = True,
                  progress=None, save_checkpoints: bool = False) -> Report:
    """Train (or load) each scene's field, then parse, ground and score every query.

    ``save_checkpoints`` writes each freshly trained field to ``scene_dir/field.ckpt``.

    Failures are recorded per case and never abort the run. Without timing the
    report bytes depend only on the dataset and the configuration.
    """
    config = config or RunConfig()
    threads = config.n_threads()
    header = {"tau_bin": config.eval.tau_bin, "seed": config.seed, "config": config.to_json()}
    header["config"].pop("threads", None)
    report = Report(header, record_timing=config.eval.record_timing)
    for sdir in scene_dirs(dataset_dir):
        name = sdir.name
        scene = read_scene_dir(sdir)
        cases = cases_from_scene(scene, name, config.eval.min_eval_pixels)
        ckpt = sdir / "field.ckpt"
        reuse = use_checkpoints and ckpt.is_file()
        t0 = time.perf_counter()
        try:
            fld, caches, sup = prepare_scene(scene, config, ckpt if reuse else None, threads)
        except (TrainingDiverged, ValueError, checkpoint.CheckpointError) as e:
            log.error("scene %s: %s", name, e)
            report.cases += [CaseResult(name, c.query_id, c.relation, False, 0.0, error=type(e).__name__,
                                        message=str(e)) for c in cases]
            continue
        report.scene_times[name] = time.perf_counter() - t0
        if save_checkpoints and not reuse:
            checkpoint.save(fld, ckpt)
        run = lambda c: _evaluate(c, scene, fld, sup, caches, config)
        if threads > 1 and len(cases) > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(run, cases))
        else:
            results = [run(c) for c in cases]
        report.cases += results
        if progress is not None:
            for r in results:
                progress(r)
    return report
