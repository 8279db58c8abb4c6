"""Grid over the averaging learning rate and length, one SGD run shared by all cells.

    python3 scripts/sweep_swa.py --config configs/sine.cfg
"""

import argparse

from mfrl import runner
from mfrl.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/sine.cfg")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = runner.sweep(load_config(args.config, {"experiment.seed": args.seed}))
    print("\n".join(out.summary))


if __name__ == "__main__":
    main()
