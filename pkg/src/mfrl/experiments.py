"""End-to-end pipelines: sine-wave regression and few-shot classification.

Both follow the same recipe: merge the meta-training tasks, train a backbone,
optionally average its tail weights, freeze the feature extractor, then fit a
fresh probabilistic head per meta-test episode.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import bayes_cls, bayes_reg, calibration, logreg
from .averaging import ema_of_snapshots
from .data import (LabeledDataset, episode_stream, gen_blob_classes, gen_sine_split, load_feature_dataset, make_rng,
                   sample_regression_episode)
from .nn import MlpSpec, ParamVector
from .training import ReprTrainConfig, TrainResult, extract_features, merge_classes, merge_tasks, train_representation


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MFRL_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- regression


@dataclass
class SineSetup:
    train: list
    val: list
    test: list
    spec: MlpSpec

    @property
    def merged(self):
        return merge_tasks([(t.x, t.y) for t in self.train])


def sine_setup(tasks_per_split: int = 500, data_seed: int = 0, hidden=(40, 40), activation: str = "erf",
               samples: int = 200) -> SineSetup:
    train, val, test = gen_sine_split(tasks_per_split, data_seed, samples)
    spec = MlpSpec(1, tuple(hidden), len(train), activation)
    return SineSetup(train, val, test, spec)


@dataclass
class RegressionRow:
    task: int
    mse: float
    noise_std: float
    coverage: float  # share of query targets inside mean +- 1.96 sd


@dataclass
class RegressionSummary:
    rows: list[RegressionRow]
    mse_mean: float
    mse_std: float
    noise_std_median: float
    coverage_mean: float
    interval_levels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    interval_coverage: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_query: int = 0


INTERVAL_LEVELS = np.arange(1, 16) / 15.0


def interval_coverage(z, levels=INTERVAL_LEVELS) -> np.ndarray:
    """Observed share of standardized residuals inside each central predictive interval."""
    z = np.abs(np.asarray(z, dtype=np.float64))
    half = norm.ppf(0.5 + 0.5 * np.asarray(levels))  # inf at level 1
    return np.mean(z[None, :] <= half[:, None], axis=1)


def summarize_regression(rows, z=None) -> RegressionSummary:
    mse = np.array([r.mse for r in rows])
    noise = np.array([r.noise_std for r in rows])
    cov = np.array([r.coverage for r in rows])
    z = np.zeros(0) if z is None else np.asarray(z)
    return RegressionSummary(list(rows), float(mse.mean()), float(mse.std()), float(np.median(noise)),
                             float(cov.mean()), INTERVAL_LEVELS.copy(),
                             interval_coverage(z) if z.size else np.full(INTERVAL_LEVELS.size, np.nan), int(z.size))


def fit_regression_task(Phi_s, y_s, hyper=bayes_reg.HyperPrior()):
    try:
        return bayes_reg.fit_evidence(Phi_s, y_s, hyper)
    except bayes_reg.EvidenceError as err:
        # an unconverged last iterate is still a valid Gaussian posterior
        if err.last is None:
            raise
        return err.last


def evaluate_regression(spec: MlpSpec, theta: ParamVector, tasks, shot: int = 10, seed: int = 0,
                        hyper=bayes_reg.HyperPrior()) -> RegressionSummary:
    """Few-shot Bayesian linear regression on frozen features for every task."""
    if not tasks:
        raise ValueError("no evaluation tasks")

    def one(i):
        task = tasks[i]
        ep = sample_regression_episode(task, shot, make_rng(seed, 0xE7A1, i))
        xs, ys = ep.support
        xq, yq = ep.query
        post = fit_regression_task(extract_features(spec, theta, xs), ys, hyper)
        mean, var = bayes_reg.predict(post, extract_features(spec, theta, xq))
        z = (yq - mean) / np.sqrt(var)
        inside = np.abs(z) <= 1.96
        return RegressionRow(i, float(np.mean((mean - yq) ** 2)), post.noise_std, float(np.mean(inside))), z

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, range(len(tasks))))
    else:
        out = [one(i) for i in range(len(tasks))]
    return summarize_regression([r for r, _ in out], np.concatenate([z for _, z in out]))


# ---------------------------------------------------------------- classification


@dataclass
class ClassificationSetup:
    dataset: LabeledDataset
    spec: MlpSpec

    @property
    def merged(self):
        x, y = self.dataset.subset("train")
        return merge_classes(x, y, self.dataset.splits.train.size)


def classification_setup(dataset: LabeledDataset, hidden=(64, 64), activation: str = "relu") -> ClassificationSetup:
    spec = MlpSpec(dataset.x.shape[1], tuple(hidden), dataset.splits.train.size, activation)
    return ClassificationSetup(dataset, spec)


def blob_dataset(**kwargs) -> LabeledDataset:
    return gen_blob_classes(**kwargs)


def feature_file_dataset(path) -> LabeledDataset:
    return load_feature_dataset(path).to_labeled()


@dataclass
class Protocol:
    way: int = 5
    shot: int = 5
    query: int = 15
    runs: int = 5
    episodes: int = 600
    val_episodes: int = 100
    seed: int = 0


def normalized_features(spec, theta, x) -> np.ndarray:
    return logreg.normalize_features(extract_features(spec, theta, x, append_bias=False))


def episode_features(feats: np.ndarray, episodes) -> list[logreg.EpisodeFeatures]:
    return [logreg.EpisodeFeatures(feats[e.support_idx], e.support_labels, feats[e.query_idx], e.query_labels, e.way)
            for e in episodes]


@dataclass
class ClassificationResult:
    rows: list[tuple[int, int, float]]  # (run, episode, accuracy)
    grid: logreg.GridSearchResult
    accuracy: float
    ci: float
    per_run: list[tuple[float, float]]
    report_t1: calibration.CalibrationReport
    report_t: calibration.CalibrationReport
    accuracy_t: float
    accuracy_t1: float
    val_ece_t1: float
    val_ece_t: float
    extra: dict = field(default_factory=dict)


def tune_heads(feats, dataset, protocol: Protocol, lambda_grid=logreg.DEFAULT_LAMBDA_GRID,
               temperature_grid=logreg.DEFAULT_TEMPERATURE_GRID, n_bins: int = calibration.DEFAULT_BINS,
               penalize_bias: bool = True) -> logreg.GridSearchResult:
    """Global lambda (validation accuracy at T=1) then global T (pooled validation ECE)."""
    val_eps = episode_features(feats, episode_stream(dataset, "val", protocol.way, protocol.shot, protocol.query,
                                                     protocol.seed, 1000, protocol.val_episodes))
    grid = logreg.select_lambda(val_eps, lambda_grid, penalize_bias)
    return logreg.select_temperature(grid.weights, val_eps, temperature_grid, n_bins, grid)


def evaluate_classification(spec, theta, dataset: LabeledDataset, protocol: Protocol,
                            lambda_grid=logreg.DEFAULT_LAMBDA_GRID, temperature_grid=logreg.DEFAULT_TEMPERATURE_GRID,
                            n_bins: int = calibration.DEFAULT_BINS, penalize_bias: bool = True,
                            feats: np.ndarray | None = None) -> ClassificationResult:
    if protocol.episodes < 1 or protocol.runs < 1:
        raise ValueError("protocol needs at least one run and one episode")
    if feats is None:
        feats = normalized_features(spec, theta, dataset.x)
    grid = tune_heads(feats, dataset, protocol, lambda_grid, temperature_grid, n_bins, penalize_bias)
    T = grid.chosen_temperature
    rows, per_run = [], []
    probs1, probsT, labels = [], [], []
    for run in range(protocol.runs):
        eps = episode_features(feats, episode_stream(dataset, "test", protocol.way, protocol.shot, protocol.query,
                                                     protocol.seed, run, protocol.episodes))
        W = logreg.fit_episodes(eps, grid.chosen_lambda, penalize_bias)
        acc = logreg.episode_accuracies(W, eps)
        rows.extend((run, e, float(a)) for e, a in enumerate(acc))
        per_run.append(calibration.mean_ci(acc))
        p1, lab = logreg.pooled_predictions(W, eps, 1.0)
        pT, _ = logreg.pooled_predictions(W, eps, T)
        probs1.append(p1)
        probsT.append(pT)
        labels.append(lab)
    probs1, probsT, labels = np.vstack(probs1), np.vstack(probsT), np.concatenate(labels)
    accs = np.array([r[2] for r in rows])
    mean, ci = calibration.mean_ci(accs)
    val_table = {t: e for t, e, _ in grid.temperature_table}
    val_ece_t1 = val_table.get(1.0)
    if val_ece_t1 is None:
        val_eps = episode_features(feats, episode_stream(dataset, "val", protocol.way, protocol.shot,
                                                         protocol.query, protocol.seed, 1000, protocol.val_episodes))
        p, lab = logreg.pooled_predictions(grid.weights, val_eps, 1.0)
        val_ece_t1 = calibration.ece(p.max(axis=1), p.argmax(axis=1) == lab, n_bins)
    return ClassificationResult(
        rows, grid, mean, ci, per_run,
        calibration.report_from_probs(probs1, labels, n_bins),
        calibration.report_from_probs(probsT, labels, n_bins),
        float(np.mean(probsT.argmax(axis=1) == labels)),
        float(np.mean(probs1.argmax(axis=1) == labels)),
        float(val_ece_t1), float(val_table[T]),
    )


def evaluate_bayes_cls(spec, theta, dataset: LabeledDataset, protocol: Protocol, cfg: bayes_cls.McmcConfig,
                       episodes: int = 10, feats=None):
    """Mean query accuracy of the MCMC head on the first ``episodes`` test episodes of run 0."""
    if feats is None:
        feats = normalized_features(spec, theta, dataset.x)
    eps = episode_features(feats, episode_stream(dataset, "test", protocol.way, protocol.shot, protocol.query,
                                                 protocol.seed, 0, episodes))
    accs = []
    for i, e in enumerate(eps):
        samples = bayes_cls.fit_mcmc(e.support, e.support_labels,
                                     bayes_cls.McmcConfig(**{**cfg.__dict__, "seed": cfg.seed + i}), K=e.way)
        probs = bayes_cls.predict_mc(samples, e.query)
        accs.append(float(np.mean(probs.argmax(axis=1) == e.query_labels)))
    return np.array(accs)


# ---------------------------------------------------------------- averaging variants


def averaging_variants(result: TrainResult, ema_factors=(0.9, 0.99, 0.999),
                       cadence: str = "epoch") -> dict[str, ParamVector]:
    """No averaging (end of SGD), EMA seeded at the end of SGD, and SWA.

    With ``cadence="epoch"`` the EMA runs over the end-of-epoch tail snapshots,
    like SWA; with ``"step"`` it uses the per-step averages tracked in training.
    """
    out = {"no-averaging": result.theta_sgd}
    for a in ema_factors:
        if cadence == "step":
            if a not in result.step_ema:
                raise ValueError(f"training did not track a per-step EMA with a={a:g}")
            out[f"ema-{a:g}"] = result.step_ema[a]
        elif cadence == "epoch":
            if not result.snapshots:
                raise ValueError("training result carries no tail snapshots")
            out[f"ema-{a:g}"] = ema_of_snapshots(result.snapshots, a, init=result.theta_sgd)
        else:
            raise ValueError(f"EMA cadence must be 'epoch' or 'step', got {cadence!r}")
    out["swa"] = result.theta_swa
    return out


def train(spec: MlpSpec, merged, cfg: ReprTrainConfig, keep_snapshots: bool = False, step_ema=()) -> TrainResult:
    return train_representation(spec, merged, cfg, keep_snapshots=keep_snapshots, step_ema=step_ema)


def top_share_k(p: int) -> int:
    return math.ceil(p / 4)
