"""Command line for spatial-relation grounding on synthetic scenes.

Exit codes (stable):
  0  success
  2  input or configuration error (missing files, bad flags, malformed spec, unsatisfiable spec)
  3  query parse error
  4  grounding failure (target or anchor not found)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, load_config
from .eval import prepare_scene, run_benchmark
from .export import rle_encode, write_pgm, write_ppm
from .ground import GroundError
from .parse import ParseError, parse_query
from .scene import masks_from_view, render_view
from .scenegen import GenConfig, GenerationError, generate_scene, random_gen_config, read_scene_dir, write_scene_dir
from .train import TrainingDiverged

EXIT_OK, EXIT_INPUT, EXIT_PARSE, EXIT_GROUND = 0, 2, 3, 4

log = logging.getLogger("spatialground")


class InputError(Exception):
    pass


def _config(args) -> RunConfig:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    if getattr(args, "steps", None) is not None:
        over["train"] = {"steps": args.steps}
    if getattr(args, "no_timing", False):
        over["eval"] = {"record_timing": False}
    return load_config(args.config, over)


def _scene(scene_dir):
    d = Path(scene_dir)
    if not (d / "scene.json").is_file():
        raise InputError(f"missing {d / 'scene.json'}")
    try:
        return read_scene_dir(d)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"malformed scene in {d}: {e}") from None


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.spec:
        try:
            gen = GenConfig.from_json(json.loads(Path(args.spec).read_text()))
        except OSError as e:
            raise InputError(f"cannot read spec {args.spec}: {e.strerror}") from None
        except (json.JSONDecodeError, TypeError, ValueError, KeyError) as e:
            raise InputError(f"malformed spec {args.spec}: {e}") from None
    else:
        gen = None
    out = Path(args.out_dir)
    for i in range(args.n_scenes):
        seed = cfg.seed + i
        scene = generate_scene(gen or random_gen_config(seed), seed)
        target = out if args.n_scenes == 1 else out / f"scene_{i:03d}"
        write_scene_dir(scene, target)
        print(f"{target}: {len(scene.primitives)} objects, {len(scene.annotations)} queries")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        raise InputError("resuming from a checkpoint is not supported; retrain from scratch")
    cfg = _config(args)
    scene = _scene(args.scene_dir)
    from .field import build_caches
    from .train import build_supervision, train_fields
    tcfg = cfg.train_config
    caches = build_caches(scene, scene.cameras, tcfg.sampling, threads=cfg.n_threads())
    sup = build_supervision(scene, scene.cameras, cfg.vocab, cfg.noise, caches=caches,
                            sampling=tcfg.sampling, opaque_min=cfg.opaque_min)
    history = []
    fld = train_fields(scene, sup, tcfg, caches=caches, history=history)
    out = Path(args.out) if args.out else Path(args.scene_dir) / "field.ckpt"
    checkpoint.save(fld, out)
    if history:
        window = max(1, min(50, len(history) // 10))
        first = np.mean([h[1] + h[2] for h in history[:window]])
        last = np.mean([h[1] + h[2] for h in history[-window:]])
        l_lang, l_inst = np.mean([h[1] for h in history[-window:]]), np.mean([h[2] for h in history[-window:]])
        print(f"steps {len(history)}  initial loss {first:.4f}  final loss {last:.4f}"
              f"  (language {l_lang:.4f}, instance {l_inst:.4f})")
    else:
        print("steps 0  untrained checkpoint written")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ground(args) -> int:
    cfg = _config(args)
    parse_query(args.query)   # fail fast, before the caches are built
    scene = _scene(args.scene_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.scene_dir) / "field.ckpt"
    if not ckpt.is_file():
        raise InputError(f"missing checkpoint {ckpt}; run `spatialground train` first")
    ids = [c.view_id for c in scene.cameras]
    views = scene.cameras
    if args.view is not None:
        if args.view not in ids:
            raise InputError(f"--view {args.view} out of range (views: {ids})")
        # the chosen view becomes the allocentric frame
        views = [c for c in scene.cameras if c.view_id == args.view] + \
                [c for c in scene.cameras if c.view_id != args.view]
    from .eval import ground_text
    fld, caches, sup = prepare_scene(scene, cfg, ckpt, cfg.n_threads())
    result = ground_text(scene, fld, sup, caches, args.query, cfg, "cli", views)
    out = Path(args.out) if args.out else Path(args.scene_dir) / "maps"
    out.mkdir(parents=True, exist_ok=True)
    for vid, rmap in result.maps.items():
        if args.view is None or vid == args.view:
            write_pgm(out / f"relevance_view{vid}.pgm", rmap.values, vmax=1.0)
            write_pgm(out / f"relevance_full_view{vid}.pgm", result.full_maps[vid].values, vmax=1.0)
    doc = result.to_json()
    if args.view is not None:
        doc["per_view"] = [p for p in doc["per_view"] if p["view_id"] == args.view]
    doc["maps_dir"] = str(out)
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    report = run_benchmark(args.dataset_dir, cfg, use_checkpoints=not args.retrain)
    out = Path(args.out) if args.out else Path(args.dataset_dir) / "report.json"
    out.write_text(report.dumps())
    sys.stdout.write(report.to_text())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = _scene(args.scene_dir)
    cams = {c.view_id: c for c in scene.cameras}
    if args.view not in cams:
        raise InputError(f"--view {args.view} out of range (views: {sorted(cams)})")
    view = render_view(scene, cams[args.view])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / f"rgb_view{args.view}.ppm", view.rgb)
    write_pgm(out / f"depth_view{args.view}.pgm", view.depth)
    masks = [rle_encode(m) for m in masks_from_view(view)]
    (out / f"masks_view{args.view}.json").write_text(json.dumps(masks))
    print(f"wrote view {args.view} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--seed", type=int, help="single seed for every random draw")
    common.add_argument("--threads", type=int,
                        help="worker threads (default: $SPATIAL_THREADS, else available cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spatialground", description=__doc__.splitlines()[0],
                                epilog="exit codes: 0 ok, 2 input/config error, 3 parse error, 4 grounding failure",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic scene with relation queries")
    g.add_argument("out_dir")
    g.add_argument("--spec", help="JSON with relation constraints and object counts")
    g.add_argument("--n-scenes", type=int, default=1, help="write N scenes as out_dir/scene_XXX")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="fit feature fields and write field.ckpt")
    t.add_argument("scene_dir")
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="checkpoint path (default: scene_dir/field.ckpt)")
    t.add_argument("--resume", action="store_true", help="unsupported; exits with code 2")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("ground", parents=[common], help="ground one query and write relevance maps")
    q.add_argument("scene_dir")
    q.add_argument("--query", required=True)
    q.add_argument("--view", type=int, help="frame view for allocentric relations; limits map output")
    q.add_argument("--checkpoint")
    q.add_argument("--out", help="directory for relevance maps (default: scene_dir/maps)")
    q.set_defaults(func=cmd_ground)

    e = sub.add_parser("eval", parents=[common], help="run the benchmark over a dataset directory")
    e.add_argument("dataset_dir")
    e.add_argument("--out", help="report JSON path (default: dataset_dir/report.json)")
    e.add_argument("--retrain", action="store_true", help="ignore existing checkpoints")
    e.add_argument("--no-timing", action="store_true", help="omit timings so reports are byte-stable")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], help="write RGB, depth and instance masks of one view")
    r.add_argument("scene_dir")
    r.add_argument("--view", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParseError as e:
        print(f"error: ParseError: {e}", file=sys.stderr)
        return EXIT_PARSE
    except GroundError as e:
        print(f"error: GroundError: {e}", file=sys.stderr)
        return EXIT_GROUND
    except (InputError, ConfigError, GenerationError, checkpoint.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
