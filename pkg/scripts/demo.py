#!/usr/bin/env python3
"""One scene end to end: generate, train, ground every annotated query and save relevance maps."""

import argparse
from pathlib import Path

from spatialground.config import load_config
from spatialground.eval import cases_from_scene, ground_text, prepare_scene, score_case
from spatialground.export import write_pgm
from spatialground.scenegen import generate_scene, random_gen_config, write_scene_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, help="override training steps (fewer is faster and blurrier)")
    args = ap.parse_args()

    cfg = load_config(overrides={"seed": args.seed, **({"train": {"steps": args.steps}} if args.steps else {})})
    scene = generate_scene(random_gen_config(args.seed), args.seed)
    write_scene_dir(scene, args.out)
    fld, caches, sup = prepare_scene(scene, cfg, threads=cfg.n_threads())
    for case in cases_from_scene(scene, args.out.name):
        res = ground_text(scene, fld, sup, caches, case.text, cfg, case.query_id)
        hit, iou = score_case(res, case, cfg.eval.tau_bin)
        print(f"{case.query_id}: {case.text!r} -> relation satisfied={res.satisfied} hit={hit} iou={iou:.2f}")
        for vid, rmap in res.maps.items():
            write_pgm(args.out / f"{case.query_id}_view{vid}.pgm", rmap.values, vmax=1.0)


if __name__ == "__main__":
    main()
