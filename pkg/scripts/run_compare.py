#!/usr/bin/env python3
"""Method-by-weight-mode comparison sweep with a k-NN readout.

Thin wrapper over the compare subcommand: writes the run config, sweeps
every (method, weight mode) cell with shared data and seed, and echoes the
resulting table.  Outputs under --out: compare.csv, score.ckpt when any
mode needs one, and the resolved config.
"""

import argparse
import json
import sys
from pathlib import Path

from augscore import cli


def build_config(args) -> dict:
    return {
        "seed": args.seed,
        "dataset": {"n": args.n, "n_test": args.n_test,
                    "resolution": args.resolution},
        "score": {"epochs": args.score_epochs,
                  "batch_size": args.score_batch_size},
        "cl": {"epochs": args.epochs, "batch_size": args.batch_size},
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--score-epochs", type=int, default=30)
    p.add_argument("--score-batch-size", type=int, default=100)
    p.add_argument("--methods", default="simclr,simsiam")
    p.add_argument("--weight-modes", default="constant,score")
    p.add_argument("--k", type=int, default=5)
    args = p.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(build_config(args), indent=2) + "\n")

    rc = cli.main(["compare", "--config", str(cfg_path), "--out", str(out),
                   "--methods", args.methods,
                   "--weight-modes", args.weight_modes, "--k", str(args.k)])
    if rc:
        return rc
    print((out / "compare.csv").read_text().strip())
    return 0


if __name__ == "__main__":
    sys.exit(main())
