"""No averaging vs EMA vs SWA off a single trajectory per seed.

    python3 scripts/compare_averaging.py --config configs/blobs.cfg --seeds 5
"""

import argparse

from mfrl import runner
from mfrl.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/blobs.cfg")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    for seed in range(args.seeds):
        cfg = load_config(args.config, {"experiment.seed": seed})
        out, _ = runner.compare_averaging(cfg)
        print(f"seed {seed}: " + "  ".join(out.summary), flush=True)


if __name__ == "__main__":
    main()
