"""Sine-wave regression over several seeds: SGD vs SWA backbones, MSE and noise recovery.

    python3 scripts/run_sine.py --seeds 5 --activation erf
"""

import argparse
import time

import numpy as np

from mfrl import runner
from mfrl.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/sine.cfg")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--activation", choices=("erf", "tanh", "relu"))
    args = ap.parse_args()

    over = {"backbone.activation": args.activation} if args.activation else {}
    sgd, swa = [], []
    for seed in range(args.seeds):
        cfg = load_config(args.config, {**over, "experiment.seed": seed})
        t = time.time()
        setup = runner.build_setup(cfg)
        ck, _, _ = runner.train(cfg, setup)
        a = runner.regression_metrics(setup, ck.theta_sgd)
        b = runner.regression_metrics(setup, ck.theta_swa)
        sgd.append(a.mse_mean)
        swa.append(b.mse_mean)
        print(f"seed {seed}: sgd {a.mse_mean:.4f}  swa {b.mse_mean:.4f} +- {b.mse_std:.4f}  "
              f"noise std {b.noise_std_median:.4f}  ({time.time() - t:.0f}s)", flush=True)
    print(f"mean over seeds: sgd {np.mean(sgd):.4f}  swa {np.mean(swa):.4f}  "
          f"swa better in {sum(b <= a for a, b in zip(sgd, swa))}/{len(sgd)}")


if __name__ == "__main__":
    main()
