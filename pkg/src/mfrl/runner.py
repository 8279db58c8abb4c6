"""Config-driven experiment runner shared by the CLI and the scripts.

Every function computes its full result in memory before anything is
written, so a failing command leaves no partial outputs behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import bayes_cls, bayes_reg, calibration, experiments as ex, logreg
from .checkpoint import Checkpoint
from .config import ConfigError, ExperimentConfig, dump_config
from .data import make_rng
from .nn import MlpSpec, ParamVector
from .training import ReprTrainConfig, TrainResult, run_swa, train_sgd

TRAINING_SECTIONS = ("data", "backbone", "repr")
LABELS = {"sgd": "MFRL (w.o. SWA)", "swa": "MFRL"}


def training_hash(cfg: ExperimentConfig) -> bytes:
    """sha256 over everything that determines the trained weights."""
    lines = [f"experiment.kind = {cfg.experiment.kind}", f"experiment.seed = {cfg.experiment.seed}"]
    lines += [ln for ln in dump_config(cfg).splitlines() if ln.split(".", 1)[0] in TRAINING_SECTIONS]
    return hashlib.sha256("\n".join(lines).encode()).digest()


# ---------------------------------------------------------------- setup


@dataclass
class Setup:
    cfg: ExperimentConfig
    spec: MlpSpec
    merged: object
    sine: ex.SineSetup | None = None
    dataset: object = None

    @property
    def regression(self) -> bool:
        return self.sine is not None


def build_setup(cfg: ExperimentConfig) -> Setup:
    d, b = cfg.data, cfg.backbone
    kind = cfg.experiment.kind
    if kind == "sine-regression":
        sine = ex.sine_setup(d.tasks_per_split, d.data_seed, b.hidden, b.activation, d.samples)
        return Setup(cfg, sine.spec, sine.merged, sine=sine)
    if kind == "synthetic-classification":
        ds = ex.blob_dataset(classes=d.classes, dim=d.dim, per_class=d.per_class, std=d.std, seed=d.data_seed,
                             latent_dim=d.latent_dim, mean_scale=d.mean_scale, way=cfg.protocol.way)
    else:
        ds = ex.feature_file_dataset(d.path)
    cs = ex.classification_setup(ds, b.hidden, b.activation)
    return Setup(cfg, cs.spec, cs.merged, dataset=ds)


def repr_config(cfg: ExperimentConfig) -> ReprTrainConfig:
    r = cfg.repr
    try:
        return ReprTrainConfig(loss="mse" if cfg.is_regression else "ce", epochs=r.epochs, iterations=r.iterations,
                               epoch_iters=r.epoch_iters, batch_size=r.batch_size, base_lr=r.base_lr,
                               milestones=r.milestones, gamma=r.gamma, momentum=r.momentum,
                               weight_decay=r.weight_decay, swa_epochs=r.swa_epochs, swa_lr=r.swa_lr,
                               seed=cfg.experiment.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def protocol(cfg: ExperimentConfig) -> ex.Protocol:
    p = cfg.protocol
    return ex.Protocol(p.way, p.shot, p.query, p.runs, p.episodes, p.val_episodes, cfg.experiment.seed)


# ---------------------------------------------------------------- tables


@dataclass
class Table:
    header: tuple[str, ...]
    rows: list[tuple]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()


def read_csv(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


@dataclass
class Outputs:
    """Named file contents plus a short human-readable summary."""
    files: dict[str, str] = field(default_factory=dict)
    summary: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- train


def train(cfg: ExperimentConfig, setup: Setup | None = None, keep_snapshots: bool = False):
    setup = setup or build_setup(cfg)
    result = ex.train(setup.spec, setup.merged, repr_config(cfg), keep_snapshots)
    log = Table(("epoch", "loss", "lr"), [(r.epoch, r.loss, r.lr) for r in result.log])
    log_text = log.to_csv()
    ck = Checkpoint(setup.spec, result.theta_sgd, result.theta_swa if cfg.repr.swa_epochs > 0 else None,
                    training_hash(cfg), hashlib.sha256(log_text.encode()).digest(), cfg.experiment.seed)
    return ck, Outputs({"train_log.csv": log_text}, [f"final loss {result.log[-1].loss:.6g}"]), result


def check_compatible(cfg: ExperimentConfig, setup: Setup, ck: Checkpoint) -> None:
    if ck.spec != setup.spec:
        raise ConfigError(f"checkpoint network {ck.spec} does not match the configured backbone {setup.spec}")
    if ck.config_hash != training_hash(cfg):
        raise ConfigError("checkpoint was trained under a different configuration (config hash mismatch)")


# ---------------------------------------------------------------- evaluate


def hyper_prior(cfg: ExperimentConfig) -> bayes_reg.HyperPrior:
    h = cfg.head
    return bayes_reg.HyperPrior(h.prior_a, h.prior_b, h.prior_c, h.prior_d)


def mcmc_config(cfg: ExperimentConfig) -> bayes_cls.McmcConfig:
    h = cfg.head
    return bayes_cls.McmcConfig(chains=h.mcmc_chains, warmup=h.mcmc_warmup, samples=h.mcmc_samples, thin=h.mcmc_thin,
                                seed=cfg.experiment.seed, max_features=h.mcmc_max_features)


def regression_metrics(setup: Setup, theta: ParamVector):
    cfg = setup.cfg
    return ex.evaluate_regression(setup.spec, theta, setup.sine.test, cfg.data.shot, cfg.experiment.seed,
                                  hyper_prior(cfg))


def classification_metrics(setup: Setup, theta: ParamVector, feats=None):
    cfg = setup.cfg
    return ex.evaluate_classification(setup.spec, theta, setup.dataset, protocol(cfg), cfg.head.lambda_grid,
                                      cfg.head.temperature_grid, cfg.head.bins, cfg.head.penalize_bias, feats)


def _reliability(report: calibration.CalibrationReport) -> Table:
    return Table(("bin_lo", "bin_hi", "confidence", "accuracy", "count"),
                 [(float(lo), float(hi), float(c), float(a), n) for lo, hi, c, a, n in report.rows()])


def _calib_dict(report: calibration.CalibrationReport) -> dict:
    return {"ece": report.ece, "mce": report.mce, "brier": report.brier}


def evaluate(cfg: ExperimentConfig, ck: Checkpoint, which: str, setup: Setup | None = None) -> Outputs:
    setup = setup or build_setup(cfg)
    check_compatible(cfg, setup, ck)
    if which == "swa" and ck.theta_swa is None:
        raise ConfigError("checkpoint carries no averaged parameters (trained with repr.swa_epochs = 0)")
    theta = ck.params(which)
    out = Outputs()
    label = LABELS[which]
    if setup.regression:
        s = regression_metrics(setup, theta)
        rows = Table(("task", "mse", "noise_std", "coverage"),
                     [(r.task, r.mse, r.noise_std, r.coverage) for r in s.rows])
        rel = Table(("bin_lo", "bin_hi", "confidence", "accuracy", "count"),
                    [(0.0, float(lv), float(lv), float(cv), s.n_query) for lv, cv in
                     zip(s.interval_levels, s.interval_coverage)])
        metrics = {"label": label, "which": which, "mse_mean": s.mse_mean, "mse_std": s.mse_std,
                   "noise_std_median": s.noise_std_median, "coverage_mean": s.coverage_mean, "tasks": len(s.rows)}
        out.summary.append(f"{label}: MSE {s.mse_mean:.4f} +- {s.mse_std:.4f}, "
                           f"median noise std {s.noise_std_median:.4f}")
    else:
        feats = ex.normalized_features(setup.spec, theta, setup.dataset.x)
        r = classification_metrics(setup, theta, feats)
        rows = Table(("run", "episode", "accuracy"), r.rows)
        rel = _reliability(r.report_t)
        g = r.grid
        metrics = {"label": label, "which": which, "accuracy": r.accuracy, "ci": r.ci,
                   **_calib_dict(r.report_t),
                   "pre_temperature": _calib_dict(r.report_t1),
                   "per_run": [{"accuracy": m, "ci": c} for m, c in r.per_run],
                   "lambda": g.chosen_lambda, "temperature": g.chosen_temperature,
                   "val_ece_t1": r.val_ece_t1, "val_ece_t": r.val_ece_t}
        out.files["reliability_t1.csv"] = _reliability(r.report_t1).to_csv()
        out.files["lambda_grid.csv"] = Table(("lambda", "val_accuracy"), g.lambda_table).to_csv()
        out.files["temperature_grid.csv"] = Table(("temperature", "val_ece", "val_accuracy"),
                                                  g.temperature_table).to_csv()
        if cfg.head.mcmc_episodes > 0:
            metrics["mcmc"] = mcmc_gap(setup, theta, feats, cfg.head.mcmc_episodes)
        out.summary.append(f"{label}: accuracy {100 * r.accuracy:.2f} +- {100 * r.ci:.2f}, "
                           f"ECE {r.report_t1.ece:.4f} -> {r.report_t.ece:.4f} at T={g.chosen_temperature}")
    out.files["results.csv"] = rows.to_csv()
    out.files["reliability.csv"] = rel.to_csv()
    out.files["metrics.json"] = to_json(metrics)
    return out


def mcmc_gap(setup: Setup, theta: ParamVector, feats, episodes: int) -> dict:
    """MCMC head versus the tuned logistic head on the same test episodes."""
    cfg = setup.cfg
    prot = protocol(cfg)
    grid = ex.tune_heads(feats, setup.dataset, prot, cfg.head.lambda_grid, cfg.head.temperature_grid,
                         cfg.head.bins, cfg.head.penalize_bias)
    eps = ex.episode_features(feats, ex.episode_stream(setup.dataset, "test", prot.way, prot.shot, prot.query,
                                                       prot.seed, 0, episodes))
    W = logreg.fit_episodes(eps, grid.chosen_lambda, cfg.head.penalize_bias)
    lr_acc = logreg.episode_accuracies(W, eps)
    mc_acc = ex.evaluate_bayes_cls(setup.spec, theta, setup.dataset, prot, mcmc_config(cfg), episodes, feats)
    return {"episodes": episodes, "mcmc_accuracy": float(mc_acc.mean()), "logreg_accuracy": float(lr_acc.mean()),
            "gap": float(mc_acc.mean() - lr_acc.mean())}


# ---------------------------------------------------------------- spectrum


def pooled_test_inputs(setup: Setup) -> np.ndarray:
    cfg = setup.cfg
    if setup.regression:
        x = np.concatenate([t.x for t in setup.sine.test])[:, None]
    else:
        x, _ = setup.dataset.subset("test")
    cap = cfg.spectrum.max_samples
    if cap and x.shape[0] > cap:
        idx = np.sort(make_rng(cfg.experiment.seed, 0x5BEC).choice(x.shape[0], cap, replace=False))
        x = x[idx]
    return x


def spectrum(cfg: ExperimentConfig, ck: Checkpoint, which: str, setup: Setup | None = None):
    setup = setup or build_setup(cfg)
    check_compatible(cfg, setup, ck)
    if which == "swa" and ck.theta_swa is None:
        raise ConfigError("checkpoint carries no averaged parameters (trained with repr.swa_epochs = 0)")
    h = ex.extract_features(setup.spec, ck.params(which), pooled_test_inputs(setup), append_bias=False)
    rep = calibration.spectrum(h, cfg.spectrum.center)
    k = ex.top_share_k(h.shape[1])
    table = Table(("index", "sigma", "sigma_norm"),
                  [(i, float(s), float(n)) for i, (s, n) in enumerate(zip(rep.sigma, rep.sigma_norm))])
    info = {"which": which, "metric": rep.metric, "top_k": k, "top_share": rep.top_share(k) if not rep.degenerate
            else 0.0, "degenerate": rep.degenerate, "samples": int(h.shape[0])}
    out = Outputs({"spectrum.csv": table.to_csv(), "spectrum.json": to_json(info)},
                  [f"spectral metric {rep.metric:.6g}, top-{k} energy share {info['top_share']:.4f}"])
    if rep.degenerate:
        out.summary.append("warning: all features are zero; spectrum is degenerate")
    return out, rep


# ---------------------------------------------------------------- sweep and averaging comparison


def _score(setup: Setup, theta: ParamVector) -> tuple[float, float]:
    """(primary metric, spread): MSE mean/std for regression, accuracy/CI for classification."""
    if setup.regression:
        s = regression_metrics(setup, theta)
        return s.mse_mean, s.mse_std
    r = classification_metrics(setup, theta)
    return r.accuracy, r.ci


def _metric_names(setup: Setup):
    return ("mse_mean", "mse_std") if setup.regression else ("accuracy", "ci")


def sweep(cfg: ExperimentConfig, setup: Setup | None = None) -> Outputs:
    setup = setup or build_setup(cfg)
    lrs, eps = cfg.sweep.swa_lr, cfg.sweep.swa_epochs
    if not lrs or not eps:
        raise ConfigError("sweep grid is empty")
    if any(v <= 0 for v in lrs) or any(v < 1 for v in eps):
        raise ConfigError("sweep learning rates must be positive and epoch counts >= 1")
    rc = repr_config(cfg)
    theta_T, state, log = train_sgd(setup.spec, setup.merged, rc)
    base, base_spread = _score(setup, theta_T)
    rows = []
    for lr in lrs:
        for n in eps:
            theta, _, _ = run_swa(setup.spec, setup.merged, rc, theta_T, state, swa_lr=lr, swa_epochs=n,
                                  first_epoch=len(log))
            rows.append((lr, n, *_score(setup, theta)))
    m, s = _metric_names(setup)
    table = Table(("swa_lr", "swa_epochs", m, s), rows)
    info = {"no_swa": {m: base, s: base_spread}}
    return Outputs({"sweep.csv": table.to_csv(), "sweep.json": to_json(info)},
                   [f"{lr:g} x {n}: {v:.4f}" for lr, n, v, _ in rows] + [f"no SWA: {base:.4f}"])


def compare_averaging(cfg: ExperimentConfig, setup: Setup | None = None, result: TrainResult | None = None):
    setup = setup or build_setup(cfg)
    if cfg.repr.swa_epochs < 1:
        raise ConfigError("averaging comparison needs repr.swa_epochs >= 1")
    cadence = cfg.averaging.ema_cadence
    if result is None:
        result = ex.train(setup.spec, setup.merged, repr_config(cfg), keep_snapshots=True,
                          step_ema=cfg.averaging.ema if cadence == "step" else ())
    variants = ex.averaging_variants(result, cfg.averaging.ema, cadence)
    rows = [(name, *_score(setup, theta)) for name, theta in variants.items()]
    m, s = _metric_names(setup)
    return Outputs({"compare_averaging.csv": Table(("method", m, s), rows).to_csv()},
                   [f"{name}: {v:.4f} +- {e:.4f}" for name, v, e in rows]), rows
