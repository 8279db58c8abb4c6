"""Few-shot classification over several seeds: accuracy, calibration and feature spectra.

    python3 scripts/run_classification.py --seeds 5
"""

import argparse

from mfrl import experiments as ex, runner
from mfrl.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/blobs.cfg")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--episodes", type=int, help="test episodes per run (default from config)")
    args = ap.parse_args()

    over = {"protocol.episodes": args.episodes} if args.episodes else {}
    for seed in range(args.seeds):
        cfg = load_config(args.config, {**over, "experiment.seed": seed})
        setup = runner.build_setup(cfg)
        ck, _, _ = runner.train(cfg, setup)
        for which in ("sgd", "swa"):
            theta = ck.params(which)
            r = runner.classification_metrics(setup, theta)
            _, spec = runner.spectrum(cfg, ck, which, setup)
            k = ex.top_share_k(spec.sigma.size)
            print(f"seed {seed} {runner.LABELS[which]:16s} acc {100 * r.accuracy:.2f} +- {100 * r.ci:.2f}  "
                  f"ECE {r.report_t1.ece:.4f} -> {r.report_t.ece:.4f} (T={r.grid.chosen_temperature}, "
                  f"lambda={r.grid.chosen_lambda:g})  top-{k} share {spec.top_share(k):.3f}  "
                  f"metric {spec.metric:.3f}", flush=True)


if __name__ == "__main__":
    main()
