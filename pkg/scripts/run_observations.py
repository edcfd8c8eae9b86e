#!/usr/bin/env python3
"""Train a score model and emit its augmentation-strength observation tables.

Runs the same subcommands a user would type: one train-score pass, then a
magnitude curve per transform, a view histogram, and a same-transform pair
grid.  Everything lands under --out:

    score/score.ckpt          trained score model
    curve_<transform>/        analysis_curve.csv per transform
    hist/                     analysis_hist.csv
    pair_grid/                analysis_pair_grid.csv
"""

import argparse
import json
import sys
from pathlib import Path

from augscore import cli

DEFAULT_TRANSFORMS = "brightness,contrast,saturation,gaussian_blur"


def build_config(args) -> dict:
    return {
        "seed": args.seed,
        "dataset": {"n": args.n, "n_test": args.n_test,
                    "resolution": args.resolution},
        "score": {"epochs": args.epochs, "batch_size": args.batch_size},
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/observations")
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--steps", type=int, default=9,
                   help="magnitude grid resolution")
    p.add_argument("--transforms", default=DEFAULT_TRANSFORMS,
                   help="comma-separated transforms for the curves")
    args = p.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(build_config(args), indent=2) + "\n")

    rc = cli.main(["train-score", "--config", str(cfg_path),
                   "--out", str(out / "score")])
    if rc:
        return rc
    ckpt = str(out / "score" / "score.ckpt")

    for tid in [t for t in args.transforms.split(",") if t]:
        rc = cli.main(["analyze", "--config", str(cfg_path),
                       "--out", str(out / f"curve_{tid}"), "--score", ckpt,
                       "--kind", "curve", "--transform-a", tid,
                       "--steps", str(args.steps)])
        if rc:
            return rc

    rc = cli.main(["analyze", "--config", str(cfg_path),
                   "--out", str(out / "hist"), "--score", ckpt,
                   "--kind", "hist"])
    if rc:
        return rc
    return cli.main(["analyze", "--config", str(cfg_path),
                     "--out", str(out / "pair_grid"), "--score", ckpt,
                     "--kind", "pair_grid", "--transform-a", "brightness",
                     "--transform-b", "brightness",
                     "--steps", str(args.steps)])


if __name__ == "__main__":
    sys.exit(main())
