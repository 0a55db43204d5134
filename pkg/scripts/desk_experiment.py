"""CE-only vs CE+BACE on the synthetic benchmark, several seeds.

    python scripts/desk_experiment.py --out runs/desk --seeds 0 1 2

Prints one line per (config, seed), then a JSON summary with per-config
means and the scores of a "predict the whole box" baseline on the same
validation split.
"""

import argparse
import json
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from baris.config import RunConfig
from baris.harness.experiment import desk_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None)
    ap.add_argument("--scenes", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--batch-size", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    base = RunConfig()
    if args.batch_size:
        base.train.batch_size = args.batch_size
    with threadpool_limits(limits=1):
        summary = desk_comparison(args.scenes, tuple(args.seeds), args.epochs, base, out=args.out,
                                  report=lambda s: print(s, flush=True))
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
