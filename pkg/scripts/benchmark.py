#!/usr/bin/env python3
"""Generate a synthetic benchmark dataset, train every scene and write the report.

    python3 scripts/benchmark.py /tmp/bench --scenes 20
"""

import argparse
import logging
from pathlib import Path

from spatialground.config import load_config
from spatialground.eval import run_benchmark
from spatialground.scenegen import generate_scene, random_gen_config, write_scene_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--no-timing", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    over = {"eval": {"record_timing": False}} if args.no_timing else {}
    cfg = load_config(args.config, over)
    for seed in range(args.first_seed, args.first_seed + args.scenes):
        d = args.out / f"scene_{seed:03d}"
        if not (d / "scene.json").exists():
            write_scene_dir(generate_scene(random_gen_config(seed), seed), d)

    def progress(c):
        print(f"{c.scene} {c.query_id} {c.relation:<28} {'hit ' if c.hit else 'miss'} iou {c.iou:.3f}"
              + (f" [{c.error}]" if c.error else ""), flush=True)

    report = run_benchmark(args.out, cfg, use_checkpoints=True, progress=progress, save_checkpoints=True)
    (args.out / "report.json").write_text(report.dumps())
    print(report.to_text())


if __name__ == "__main__":
    main()
