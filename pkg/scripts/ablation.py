#!/usr/bin/env python3
"""Instance-graph and visual-modulation ablations on a dataset made by benchmark.py.

The instance-graph run reuses the saved checkpoints; the modulation run retrains.
"""

import argparse
import dataclasses
import json
from pathlib import Path

from spatialground.config import load_config
from spatialground.eval import run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset", type=Path)
    ap.add_argument("--config")
    ap.add_argument("--skip-vp", action="store_true", help="skip the (slow) retraining without modulation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    rows = {"full": run_benchmark(args.dataset, cfg)}
    rows["no_instance_graph"] = run_benchmark(
        args.dataset, dataclasses.replace(cfg, ground=dataclasses.replace(cfg.ground, use_instance_graph=False)))
    if not args.skip_vp:
        rows["no_visual_modulation"] = run_benchmark(
            args.dataset, dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, use_vis_mod=False)),
            use_checkpoints=False)
    summary = {k: {"accuracy": round(r.accuracy, 2), "miou": round(r.miou, 2)} for k, r in rows.items()}
    for k, v in summary.items():
        print(f"{k:<22} accuracy {v['accuracy']:6.2f}%  miou {v['miou']:6.2f}%")
    (args.dataset / "ablation.json").write_text(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
