"""Hierarchical Bayesian softmax classifier sampled with adaptive random-walk Metropolis.

The model places ``w_i ~ N(0, 1/lambda)`` on every weight (bias included) and a
Gamma(a, b) hyperprior on ``lambda``. The sampler runs on ``(V, log lambda)``
with ``W = V / sqrt(lambda)``: this non-centred form has the same posterior
but removes the funnel between the weight scale and ``lambda`` that stalls a
random walk on ``(W, log lambda)`` directly. Draws are reported as ``W``.
This is a random-walk sampler, not NUTS: it mixes slowly in high dimension,
so features above ``max_features`` dimensions are projected onto the leading
principal directions of the centred support features before sampling (the
bias column is kept as is). Check the reported acceptance rate and split
R-hat before trusting predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import make_rng
from .logreg import softmax


class McmcError(RuntimeError):
    pass


@dataclass
class McmcConfig:
    chains: int = 2
    warmup: int = 20000
    samples: int = 4000
    thin: int = 5
    target_accept: float = 0.25
    seed: int = 0
    a: float = 1e-6
    b: float = 1e-6
    fixed_lambda: float | None = None
    likelihood_weight: float = 1.0
    max_features: int | None = 8
    accept_bounds: tuple[float, float] = (0.05, 0.7)

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")
        if self.samples < 100 or self.warmup < 0 or self.thin < 1:
            raise ValueError("need >= 100 kept samples per chain, warmup >= 0 and thin >= 1")


@dataclass
class ChainResult:
    samples: np.ndarray  # (n_keep, dim)
    acceptance: float
    scale: float


def adaptive_rwm(logpdf, x0, n_warmup: int, n_keep: int, rng: np.random.Generator,
                 target_accept: float = 0.25, thin: int = 1) -> ChainResult:
    """Random-walk Metropolis with proposal covariance learned during warmup.

    Warmup adapts a global log-scale by Robbins-Monro toward ``target_accept``
    and, after a short initial stretch, uses the running sample covariance
    (plus a small ridge) as the proposal shape. Both are frozen afterwards, so
    the kept draws come from a fixed Markov kernel.
    """
    x = np.array(x0, dtype=np.float64)
    d = x.size
    lp = logpdf(x)
    if not np.isfinite(lp):
        raise McmcError("log density is not finite at the starting point")
    log_scale = math.log(2.38 / math.sqrt(d))
    chol = np.eye(d) * 0.1
    mean = x.copy()
    cov = np.zeros((d, d))
    n_seen = 0
    adapt_start = min(500, n_warmup // 4)

    for t in range(n_warmup):
        prop = x + math.exp(log_scale) * (chol @ rng.standard_normal(d))
        lp_prop = logpdf(prop)
        acc_prob = math.exp(min(0.0, lp_prop - lp)) if np.isfinite(lp_prop) else 0.0
        if rng.random() < acc_prob:
            x, lp = prop, lp_prop
        log_scale += (acc_prob - target_accept) / (t + 1) ** 0.6
        n_seen += 1
        delta = x - mean
        mean += delta / n_seen
        cov += np.outer(delta, x - mean)
        if t >= adapt_start and (t - adapt_start) % 50 == 0:
            emp = cov / max(n_seen - 1, 1) + 1e-8 * np.eye(d)
            try:
                chol = np.linalg.cholesky(emp)
            except np.linalg.LinAlgError:
                pass

    step = math.exp(log_scale)
    out = np.empty((n_keep, d))
    accepted = 0
    total = n_keep * thin
    for i in range(total):
        prop = x + step * (chol @ rng.standard_normal(d))
        lp_prop = logpdf(prop)
        if np.isfinite(lp_prop) and math.log(rng.random() + 1e-300) < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted += 1
        if (i + 1) % thin == 0:
            out[(i + 1) // thin - 1] = x
    return ChainResult(out, accepted / total, step)


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split R-hat per coordinate for draws shaped (chains, draws, dim)."""
    chains = np.asarray(chains, dtype=np.float64)
    m, n, d = chains.shape
    half = n // 2
    if m < 1 or half < 2:
        raise ValueError("need at least 4 draws per chain")
    parts = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    var_hat = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / W)
    return np.where(W > 0, r, 1.0)


def mc_standard_error(x, n_batches: int = 20) -> float:
    """Batch-means Monte Carlo standard error of the mean of a (possibly correlated) series."""
    x = np.asarray(x, dtype=np.float64).ravel()
    size = x.size // n_batches
    if size < 1:
        raise ValueError("series too short for batch means")
    means = x[:size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


@dataclass
class PosteriorSampleSet:
    W: np.ndarray  # (S, M, K), chains concatenated in chain order
    log_lambda: np.ndarray  # (S,)
    acceptance: list[float]
    rhat: np.ndarray | None
    projection: "FeatureProjection | None" = None
    chains: int = 1

    def design(self, phi) -> np.ndarray:
        return phi if self.projection is None else self.projection.apply(phi)

    def to_rows(self):
        """Flat draws for CSV export: (chain, draw, log_lambda, w...)."""
        S = self.W.shape[0]
        per = S // self.chains
        for s in range(S):
            yield (s // per, s % per, float(self.log_lambda[s]), *self.W[s].ravel().tolist())


@dataclass
class FeatureProjection:
    """Maps ``[h; 1]`` rows to ``[(h - center) @ basis; 1]``."""
    center: np.ndarray
    basis: np.ndarray  # (M - 1, k)

    def apply(self, phi) -> np.ndarray:
        phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
        return np.hstack([(phi[:, :-1] - self.center) @ self.basis, phi[:, -1:]])


def support_projection(features, max_features: int | None) -> FeatureProjection | None:
    """Leading principal directions of the support features, or None when no reduction is needed."""
    features = np.asarray(features, dtype=np.float64)
    if max_features is None or features.shape[1] - 1 <= max_features:
        return None
    H = features[:, :-1]
    center = H.mean(axis=0)
    _, _, Vt = np.linalg.svd(H - center, full_matrices=False)
    k = min(max_features, Vt.shape[0])
    return FeatureProjection(center, Vt[:k].T.copy())


def log_posterior_factory(Phi, labels, K, cfg: McmcConfig):
    Phi = np.asarray(Phi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, M = Phi.shape
    rows = np.arange(n)
    n_w = M * K
    fixed = cfg.fixed_lambda

    def logpdf(theta):
        """Log density of ``(V, log lambda)``; the prior on V is standard normal."""
        v = theta[:n_w]
        if fixed is None:
            log_lam = theta[n_w]
            if log_lam > 700 or log_lam < -700:
                return -math.inf
        else:
            log_lam = math.log(fixed)
        lp = -0.5 * float(v @ v)
        if cfg.likelihood_weight:
            z = Phi @ (v.reshape(M, K) * math.exp(-0.5 * log_lam))
            zmax = z.max(axis=1)
            lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
            lp += cfg.likelihood_weight * float(np.sum(z[rows, labels] - lse))
        if fixed is None:
            # Gamma(a, b) on lambda, written for log lambda (includes the Jacobian)
            lp += cfg.a * log_lam - cfg.b * math.exp(log_lam)
        return lp

    return logpdf, n_w


def to_weights(theta, n_w: int, log_lam) -> np.ndarray:
    """Map non-centred draws ``V`` back to ``W = V exp(-log_lam / 2)``."""
    theta = np.atleast_2d(theta)
    return theta[:, :n_w] * np.exp(-0.5 * np.asarray(log_lam, dtype=np.float64)).reshape(-1, 1)


def fit_mcmc(features, labels, cfg: McmcConfig = McmcConfig(), K: int | None = None) -> PosteriorSampleSet:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    K = int(labels.max()) + 1 if K is None else K
    if features.shape[0] < K:
        raise ValueError(f"need at least {K} support samples, got {features.shape[0]}")
    proj = support_projection(features, cfg.max_features)
    Phi = features if proj is None else proj.apply(features)
    M = Phi.shape[1]
    logpdf, n_w = log_posterior_factory(Phi, labels, K, cfg)
    dim = n_w + (0 if cfg.fixed_lambda is not None else 1)

    draws, accs = [], []
    for c in range(cfg.chains):
        rng = make_rng(cfg.seed, 0xC4A1, c)
        x0 = 0.1 * rng.standard_normal(dim)
        res = adaptive_rwm(logpdf, x0, cfg.warmup, cfg.samples, rng, cfg.target_accept, cfg.thin)
        lo, hi = cfg.accept_bounds
        if not lo <= res.acceptance <= hi:
            raise McmcError(f"chain {c} acceptance {res.acceptance:.3f} outside [{lo}, {hi}]; "
                            "rescale the proposal or lengthen warmup")
        draws.append(res.samples)
        accs.append(res.acceptance)
    stacked = np.stack(draws)
    rhat = split_rhat(stacked) if cfg.chains >= 2 else None
    flat = stacked.reshape(-1, dim)
    if cfg.fixed_lambda is None:
        log_lam = flat[:, n_w]
    else:
        log_lam = np.full(flat.shape[0], math.log(cfg.fixed_lambda))
    W = to_weights(flat, n_w, log_lam).reshape(-1, M, K)
    return PosteriorSampleSet(W, log_lam, accs, rhat, proj, cfg.chains)


def predict_mc(samples: PosteriorSampleSet, phi) -> np.ndarray:
    """Posterior predictive class probabilities: softmax averaged over draws."""
    if samples.W.shape[0] == 0:
        raise ValueError("empty sample set")
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    phi = samples.design(np.atleast_2d(phi))
    probs = softmax(np.einsum("nm,smk->snk", phi, samples.W)).mean(axis=0)
    return probs[0] if single else probs
