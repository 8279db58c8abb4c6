"""End-to-end acceptance checks. Each test records a PASS/FAIL line in the terminal summary.

The full suite trains about twenty small networks and takes about twenty minutes on one CPU core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from mfrl import bayes_cls as bc, calibration as cal, experiments as ex, logreg, nn, runner
from mfrl.bayes_reg import HyperPrior, fit_evidence
from mfrl.cli import main
from mfrl.config import load_config
from mfrl.data import make_rng
from mfrl.nn import ForwardCache, MlpSpec, ParamVector

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(5)
FLAT = HyperPrior(0.0, 0.0, 0.0, 0.0)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


def _seed_cfg(name, seed, **extra):
    return load_config(CONFIGS / name, {"experiment.seed": seed, **extra})


# ---------------------------------------------------------------- shared training runs


@pytest.fixture(scope="session")
def sine_runs():
    """(activation, seed) -> (sgd summary, swa summary), trained lazily."""
    cache = {}

    def get(activation, seed):
        key = (activation, seed)
        if key not in cache:
            cfg = _seed_cfg("sine.cfg", seed, **{"backbone.activation": activation})
            setup = runner.build_setup(cfg)
            ck, _, _ = runner.train(cfg, setup)
            cache[key] = (runner.regression_metrics(setup, ck.theta_sgd), runner.regression_metrics(setup, ck.theta_swa))
        return cache[key]

    return get


CLS_PROTOCOL = {"protocol.runs": 2, "protocol.episodes": 300, "protocol.val_episodes": 50}


@pytest.fixture(scope="session")
def blob_runs():
    out = []
    for seed in SEEDS:
        cfg = _seed_cfg("blobs.cfg", seed, **CLS_PROTOCOL)
        setup = runner.build_setup(cfg)
        ck, _, result = runner.train(cfg, setup, keep_snapshots=True)
        out.append((cfg, setup, ck, result))
    return out


# ---------------------------------------------------------------- 1-3: sine regression


def test_01_sine_mse_and_swa_gain(sine_runs):
    t0 = time.time()
    rows = [sine_runs("erf", s) for s in SEEDS]
    sgd = [r[0].mse_mean for r in rows]
    swa = [r[1].mse_mean for r in rows]
    wins = sum(a <= b for a, b in zip(swa, sgd))
    ok = max(swa) <= 0.05 and wins >= 4
    record("1 sine MSE", ok, f"SWA MSE per seed {[round(v, 4) for v in swa]} (max {max(swa):.4f} <= 0.05), "
           f"SGD {[round(v, 4) for v in sgd]}, SWA <= SGD in {wins}/5 seeds, {time.time() - t0:.0f}s")


def test_02_noise_recovery(sine_runs):
    med = sine_runs("erf", 0)[1].noise_std_median
    record("2 noise std", 0.07 <= med <= 0.13, f"median estimated noise std {med:.4f} in [0.07, 0.13]")


def test_03_activation_ordering(sine_runs):
    mse = {act: float(np.mean([sine_runs(act, s)[1].mse_mean for s in SEEDS])) for act in ("erf", "tanh", "relu")}
    ok = mse["erf"] <= 0.05 and mse["tanh"] <= 0.05 and mse["relu"] > max(mse["erf"], mse["tanh"])
    record("3 activations", ok, ", ".join(f"{k} {v:.4f}" for k, v in mse.items()) + " (mean SWA MSE over 5 seeds)")


# ---------------------------------------------------------------- 4-5: numerical oracles


def test_04_evidence_oracle():
    worst, worst_drop = 0.0, 0.0
    for seed in range(100):
        rng = make_rng(seed, 4)
        # n > M keeps the unpenalised evidence bounded (n <= M lets the noise precision run off to infinity)
        M = int(rng.integers(2, 12))
        n = int(rng.integers(M + 2, 40))
        Phi = rng.normal(size=(n, M))
        y = Phi @ rng.normal(size=M) + 0.3 * rng.normal(size=n)
        lam, beta = math.exp(rng.uniform(-3, 3)), math.exp(rng.uniform(-2, 4))
        post = fit_evidence(Phi, y, lam0=lam, beta0=beta, update=False)
        Sigma = np.linalg.inv(lam * np.eye(M) + beta * Phi.T @ Phi)
        m = beta * Sigma @ Phi.T @ y
        worst = max(worst, np.max(np.abs(post.m - m)), np.max(np.abs(post.Sigma - Sigma)))
        ev = [t[2] for t in fit_evidence(Phi, y, FLAT, strict=False).trace]
        worst_drop = max([worst_drop] + [a - b for a, b in zip(ev, ev[1:])])
    ok = worst <= 1e-8 and worst_drop <= 1e-10
    record("4 evidence oracle", ok, f"max abs posterior error {worst:.2e} <= 1e-8, "
           f"largest evidence decrease {worst_drop:.2e} <= 1e-10 over 100 instances")


def _fd_rel_error(spec, seed):
    rng = make_rng(seed, 5)
    p = nn.init_params(spec, rng)
    x = rng.normal(size=(4, spec.input_dim))
    R = rng.normal(size=(4, spec.output_dim))

    def loss(vals):
        return float(np.sum(nn.forward(spec, ParamVector(vals, p.shapes), x)[1] * R))

    cache = ForwardCache()
    nn.forward(spec, p, x, cache)
    g = nn.backward(spec, p, cache, R).values
    h = 1e-6
    fd = np.array([(loss(p.values + h * e) - loss(p.values - h * e)) / (2 * h) for e in np.eye(g.size)])
    return np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)


def test_05_finite_differences():
    t0 = time.time()
    errs = []
    for i in range(50):
        rng = make_rng(i, 55)
        hidden = tuple(int(v) for v in rng.integers(2, 9, size=int(rng.integers(1, 4))))
        spec = MlpSpec(int(rng.integers(1, 5)), hidden, int(rng.integers(1, 5)), ("tanh", "erf")[i % 2])
        errs.append(_fd_rel_error(spec, i))
    dt = time.time() - t0
    record("5 gradients", max(errs) <= 1e-4 and dt <= 60,
           f"max relative error {max(errs):.2e} <= 1e-4 over 50 nets in {dt:.1f}s")


# ---------------------------------------------------------------- 6-7: calibration


def test_06_temperature_preserves_accuracy(blob_runs):
    rng = make_rng(6)
    same = 0
    for _ in range(10 ** 4):
        K = int(rng.integers(2, 10))
        logits = rng.normal(size=K) * rng.uniform(0.01, 20)
        T = float(rng.choice(logreg.DEFAULT_TEMPERATURE_GRID))
        same += int(np.argmax(logreg.softmax(logits, T)) == np.argmax(logreg.softmax(logits, 1.0)))
    _, _, ck, _ = blob_runs[0]
    full = load_config(CONFIGS / "blobs.cfg", {"experiment.seed": 0})
    r = runner.classification_metrics(runner.build_setup(full), ck.theta_swa)
    ok = same == 10 ** 4 and r.accuracy_t == r.accuracy_t1 and r.val_ece_t <= r.val_ece_t1
    record("6 temperature", ok, f"{same}/10000 random instances keep argmax; full evaluation pooled accuracy "
           f"{r.accuracy_t:.6f} at T={r.grid.chosen_temperature} vs {r.accuracy_t1:.6f} at T=1; "
           f"pooled val ECE {r.val_ece_t1:.4f} at T=1 -> {r.val_ece_t:.4f}")


def _brute(conf, correct, B=15):
    n = len(conf)
    ece, mce = 0.0, 0.0
    for b in range(B):
        members = [i for i in range(n) if b / B <= conf[i] < (b + 1) / B or (b == B - 1 and conf[i] == 1.0)]
        if members:
            gap = abs(sum(correct[i] for i in members) / len(members) - sum(conf[i] for i in members) / len(members))
            ece += len(members) / n * gap
            mce = max(mce, gap)
    return ece, mce


def test_07_calibration_oracles():
    worst, mce_ok = 0.0, True
    for seed in range(500):
        rng = make_rng(seed, 7)
        n, K = int(rng.integers(1, 60)), int(rng.integers(2, 6))
        probs = rng.dirichlet(np.full(K, rng.uniform(0.1, 3)), size=n)
        labels = rng.integers(0, K, size=n)
        conf, correct = probs.max(axis=1), probs.argmax(axis=1) == labels
        e, m = _brute(list(conf), list(correct))
        b = sum(sum((probs[i, k] - (k == labels[i])) ** 2 for k in range(K)) for i in range(n)) / n
        worst = max(worst, abs(cal.ece(conf, correct) - e), abs(cal.mce(conf, correct) - m),
                    abs(cal.brier(probs, labels) - b))
        mce_ok &= cal.mce(conf, correct) >= cal.ece(conf, correct)
    record("7 calibration oracles", worst <= 1e-12 and mce_ok,
           f"max deviation from brute force {worst:.2e} <= 1e-12 on 500 batches, MCE >= ECE: {mce_ok}")


# ---------------------------------------------------------------- 8, 10: synthetic classification


def test_08_spectrum_energy_share(blob_runs):
    lines, wins = [], 0
    for cfg, setup, ck, _ in blob_runs:
        _, sgd = runner.spectrum(cfg, ck, "sgd", setup)
        _, swa = runner.spectrum(cfg, ck, "swa", setup)
        k = ex.top_share_k(sgd.sigma.size)
        a, b = swa.top_share(k), sgd.top_share(k)
        wins += a > b
        lines.append(f"share {a:.3f}/{b:.3f} metric {swa.metric:.3f}/{sgd.metric:.3f}")
    record("8 spectrum", wins >= 4, f"top-k energy share SWA > SGD in {wins}/5 seeds; SWA/SGD per seed: "
           + "; ".join(lines))


def test_10_ema_comparison(blob_runs):
    good, lines = 0, []
    for cfg, setup, _, result in blob_runs:
        cfg.averaging.ema = (0.9, 0.99)
        _, rows = runner.compare_averaging(cfg, setup, result)
        acc = {name: v for name, v, _ in rows}
        ema_ok = acc["ema-0.9"] >= acc["no-averaging"] and acc["ema-0.99"] >= acc["no-averaging"]
        swa_ok = acc["swa"] >= max(acc["ema-0.9"], acc["ema-0.99"]) - 0.005
        good += ema_ok and swa_ok
        lines.append("/".join(f"{100 * acc[k]:.2f}" for k in ("no-averaging", "ema-0.9", "ema-0.99", "swa")))
    record("10 EMA vs SWA", good >= 4, f"conditions hold in {good}/5 seeds; none/ema0.9/ema0.99/swa accuracy: "
           + ", ".join(lines))


# ---------------------------------------------------------------- 9: SWA sensitivity


def test_09_swa_sweep():
    cfg = _seed_cfg("sine.cfg", 0)
    out = runner.sweep(cfg)
    _, rows = runner.read_csv(out.files["sweep.csv"])
    cells = np.array([float(r[2]) for r in rows])
    base = float(json.loads(out.files["sweep.json"])["no_swa"]["mse_mean"])
    ratio = cells.max() / cells.min()
    ok = len(cells) == 9 and ratio <= 2 and np.all(cells <= 1.1 * base)
    record("9 SWA sweep", ok, f"max/min {ratio:.3f} <= 2, worst cell {cells.max():.4f} <= 1.1 x no-SWA "
           f"{base:.4f}; cells {[round(float(c), 4) for c in cells]}")


# ---------------------------------------------------------------- 11: MCMC head


def test_11_mcmc_sanity(blob_runs):
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    P = np.linalg.inv(cov)
    res = bc.adaptive_rwm(lambda x: -0.5 * x @ P @ x, np.zeros(2), 5000, 5000, make_rng(11), thin=2)
    s = res.samples
    z_mean = [abs(s[:, i].mean()) / bc.mc_standard_error(s[:, i]) for i in range(2)]
    z_var = [abs(np.mean(s[:, i] ** 2) - cov[i, i]) / bc.mc_standard_error(s[:, i] ** 2) for i in range(2)]
    toy_ok = max(z_mean + z_var) <= 3

    x = np.array([[1.0, 1], [-1, 1], [0.5, 1], [-0.5, 1]])
    y = np.array([0, 1, 0, 1])
    post = bc.fit_mcmc(x, y, bc.McmcConfig(warmup=5000, samples=4000, thin=3, seed=11), K=2)
    p = logreg.softmax(np.einsum("m,smk->sk", np.array([0.0, 1.0]), post.W))[:, 0]
    z_mid = abs(p.mean() - 0.5) / bc.mc_standard_error(p)

    cfg, setup, ck, _ = blob_runs[0]
    feats = ex.normalized_features(setup.spec, ck.theta_swa, setup.dataset.x)
    gap = runner.mcmc_gap(setup, ck.theta_swa, feats, 10)
    record("11 MCMC head", toy_ok and z_mid <= 2,
           f"Gaussian toy max |z| {max(z_mean + z_var):.2f} <= 3, midpoint {p.mean():.4f} at "
           f"{z_mid:.2f} SE <= 2; on 10 episodes MCMC {100 * gap['mcmc_accuracy']:.2f} vs logistic "
           f"{100 * gap['logreg_accuracy']:.2f} (gap {100 * gap['gap']:+.2f} points, reported only)")


# ---------------------------------------------------------------- 12: determinism

SMALL_SINE = {"repr.iterations": 4000, "repr.swa_epochs": 2, "data.tasks_per_split": 60, "sweep.swa_lr": "0.05,0.1",
              "sweep.swa_epochs": "1,2"}


def _cli_all(cfg_path, out, overrides):
    text = Path(cfg_path).read_text() + "".join(f"\n{k} = {v}" for k, v in overrides.items()) + "\n"
    out.mkdir(parents=True)
    cfg = out / "exp.cfg"
    cfg.write_text(text)
    ck = str(out / "train" / "checkpoint.bin")
    cmds = [["train"], ["evaluate", "--checkpoint", ck, "--which", "sgd"], ["evaluate", "--checkpoint", ck],
            ["spectrum", "--checkpoint", ck], ["sweep"], ["compare-averaging"]]
    for i, c in enumerate(cmds):
        sub = out / ("train" if i == 0 else f"{i}-{c[0]}")
        assert main([c[0], "--config", str(cfg), "--out", str(sub), *c[1:]]) == 0
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file() and p.name != "exp.cfg"}


def test_12_determinism(tmp_path):
    mismatched, n = [], 0
    cases = [("sine.cfg", SMALL_SINE),
             ("blobs.cfg", {"protocol.runs": 1, "protocol.episodes": 100, "protocol.val_episodes": 20,
                            "sweep.swa_lr": "0.02", "sweep.swa_epochs": "5"})]
    for name, over in cases:
        a = _cli_all(CONFIGS / name, tmp_path / name / "a", over)
        b = _cli_all(CONFIGS / name, tmp_path / name / "b", over)
        n += len(a)
        mismatched += [f"{name}:{k}" for k in a if a[k] != b.get(k)]
        mismatched += [f"{name}:{k}" for k in b if k not in a]
    record("12 determinism", not mismatched and n > 0,
           f"{n} output files from train/evaluate/spectrum/sweep/compare-averaging, "
           f"{len(mismatched)} differ between reruns {mismatched[:3]}")
