"""Calibration metrics, reliability bins, accuracy summaries and feature spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 15


def _validate(confidences, correct):
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("no predictions to score")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return conf, corr


def bin_index(confidences, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width bin of each confidence; 1.0 goes to the top bin."""
    idx = np.floor(np.asarray(confidences) * n_bins).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def _bin_stats(conf, corr, n_bins):
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
        mean_acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), np.nan)
    return counts, mean_conf, mean_acc


def ece(confidences, correct, n_bins: int = DEFAULT_BINS) -> float:
    conf, corr = _validate(confidences, correct)
    counts, mc, ma = _bin_stats(conf, corr, n_bins)
    nz = counts > 0
    return float(np.sum(counts[nz] / conf.size * np.abs(ma[nz] - mc[nz])))


def mce(confidences, correct, n_bins: int = DEFAULT_BINS) -> float:
    conf, corr = _validate(confidences, correct)
    counts, mc, ma = _bin_stats(conf, corr, n_bins)
    nz = counts > 0
    return float(np.max(np.abs(ma[nz] - mc[nz])))


def brier(probs, labels) -> float:
    """Class-summed squared error against one-hot labels, averaged over samples."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ValueError("no predictions to score")
    if labels.ndim == 1:
        onehot = np.zeros_like(probs)
        onehot[np.arange(probs.shape[0]), labels] = 1.0
    else:
        onehot = labels.astype(np.float64)
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    confidence: np.ndarray  # per-bin mean confidence (nan for empty bins)
    accuracy: np.ndarray
    counts: np.ndarray
    ece: float
    mce: float
    brier: float | None
    n: int

    def rows(self):
        for b in range(self.counts.size):
            yield (self.bin_edges[b], self.bin_edges[b + 1], self.confidence[b], self.accuracy[b], int(self.counts[b]))


def reliability_bins(confidences, correct, n_bins: int = DEFAULT_BINS, probs=None, labels=None) -> CalibrationReport:
    conf, corr = _validate(confidences, correct)
    counts, mc, ma = _bin_stats(conf, corr, n_bins)
    bri = brier(probs, labels) if probs is not None else None
    return CalibrationReport(np.linspace(0.0, 1.0, n_bins + 1), mc, ma, counts,
                             ece(conf, corr, n_bins), mce(conf, corr, n_bins), bri, conf.size)


def report_from_probs(probs, labels, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    return reliability_bins(conf, correct, n_bins, probs, labels)


def mean_ci(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width ``1.96 * std / sqrt(n)``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    return float(v.mean()), float(1.96 * v.std() / math.sqrt(v.size))


# ---------------------------------------------------------------- spectra


@dataclass
class SpectrumReport:
    sigma: np.ndarray
    sigma_norm: np.ndarray
    metric: float  # -sum s log s over normalised singular values
    energy: np.ndarray  # cumulative share of sum sigma^2
    degenerate: bool = False

    def top_share(self, k: int) -> float:
        return float(self.energy[min(k, self.energy.size) - 1])


def spectrum(Phi, center: bool = False) -> SpectrumReport:
    """Singular values of a feature matrix and the spectral-decay summary."""
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.ndim != 2 or min(Phi.shape) < 1:
        raise ValueError(f"feature matrix must be 2-D and non-empty, got shape {Phi.shape}")
    if center:
        Phi = Phi - Phi.mean(axis=0)
    s = np.linalg.svd(Phi, compute_uv=False)
    s = np.clip(np.sort(s)[::-1], 0.0, None)
    if s[0] <= 0:
        z = np.zeros_like(s)
        return SpectrumReport(s, z, 0.0, z.copy(), degenerate=True)
    sn = s / s[0]
    pos = sn > 0
    metric = float(-np.sum(sn[pos] * np.log(sn[pos])))
    energy = np.cumsum(s ** 2) / np.sum(s ** 2)
    return SpectrumReport(s, sn, metric, energy)


def effective_rank_metric(sigma) -> float:
    s = np.asarray(sigma, dtype=np.float64)
    if s.max() <= 0:
        return 0.0
    sn = s / s.max()
    sn = sn[sn > 0]
    return float(-np.sum(sn * np.log(sn)))
