"""L2-regularised multinomial logistic regression heads with temperature scaling.

Features are L2-normalised and get a trailing bias coordinate before fitting.
The objective is the summed cross-entropy over the support set plus
``lam * sum_c |w_c|^2``. Fitting uses full-batch accelerated gradient descent
with backtracking and is vectorised over a stack of independent episodes so
grid searches over many validation episodes stay cheap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import calibration

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-3, 2, 11))
DEFAULT_TEMPERATURE_GRID = tuple(float(v) for v in np.round(np.arange(0.5, 5.0 + 1e-9, 0.25), 2))


class NormDivergenceWarning(RuntimeWarning):
    """Unregularised fit on separable data: weights grow without bound."""


def normalize_features(h) -> np.ndarray:
    """``[h / |h|_2 ; 1]`` row-wise; rows with |h| < 1e-12 map to ``[0 ; 1]``."""
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    out = np.where(norms < 1e-12, 0.0, h / np.where(norms < 1e-12, 1.0, norms))
    out = np.hstack([out, np.ones((h.shape[0], 1))])
    return out[0] if single else out


@dataclass
class LogRegModel:
    W: np.ndarray  # (p+1, K)
    lam: float
    temperature: float = 1.0
    n_iter: int = 0
    converged: bool = True
    norm_divergence: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: LogRegModel, phi, temperature: float | None = None) -> np.ndarray:
    T = model.temperature if temperature is None else temperature
    if T <= 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(phi) @ model.W, T)


def _penalty_mask(M: int, penalize_bias: bool) -> np.ndarray:
    mask = np.ones((M, 1))
    if not penalize_bias:
        mask[-1] = 0.0
    return mask


def objective_and_grad(W, Phi, onehot, lam, mask):
    """Batched objective; leading axis indexes episodes."""
    logits = Phi @ W
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    s = e.sum(axis=-1, keepdims=True)
    logp = logits - np.log(s)
    ce = -np.sum(onehot * logp, axis=(-2, -1))
    Wm = W * mask
    f = ce + lam * np.sum(Wm * W, axis=(-2, -1))
    g = np.swapaxes(Phi, -1, -2) @ (e / s - onehot) + 2.0 * lam[..., None, None] * Wm
    return f, g


def objective(W, Phi, labels, lam, penalize_bias: bool = True) -> float:
    Phi = np.asarray(Phi, dtype=np.float64)
    K = W.shape[1]
    onehot = np.eye(K)[np.asarray(labels)]
    f, _ = objective_and_grad(W[None], Phi[None], onehot[None], np.array([float(lam)]),
                              _penalty_mask(Phi.shape[1], penalize_bias))
    return float(f[0])


def fit_batch(Phi, labels, lam, K: int, tol: float = 1e-6, max_iter: int = 2000,
              penalize_bias: bool = True, W0=None):
    """Fit one model per episode.

    ``Phi`` is (E, n, M), ``labels`` (E, n) and ``lam`` a scalar or (E,) array.
    Returns ``(W, n_iter, converged)`` with ``W`` of shape (E, M, K).
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    labels = np.asarray(labels)
    E, n, M = Phi.shape
    if labels.shape != (E, n):
        raise ValueError(f"labels shape {labels.shape} does not match features {Phi.shape[:2]}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (E,)).copy()
    if np.any(lam < 0):
        raise ValueError("lambda must be >= 0")
    onehot = np.eye(K)[labels]
    mask = _penalty_mask(M, penalize_bias)

    W = np.zeros((E, M, K)) if W0 is None else np.array(W0, dtype=np.float64)
    W_prev = W.copy()
    f_W, _ = objective_and_grad(W, Phi, onehot, lam, mask)
    k = np.ones(E)
    # gradient Lipschitz bound: the softmax Hessian is below I/2, so L <= |Phi|_F^2 / 2 + 2 lam
    L0 = 0.5 * np.sum(Phi ** 2, axis=(1, 2)) + 2.0 * lam
    step = 1.0 / np.maximum(L0, 1e-12)
    t_min = step.copy()
    active = np.ones(E, dtype=bool)
    n_iter = np.zeros(E, dtype=np.int64)
    converged = np.zeros(E, dtype=bool)

    for it in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        mom = ((k[idx] - 1.0) / (k[idx] + 2.0))[:, None, None]
        Y = W[idx] + mom * (W[idx] - W_prev[idx])
        f_Y, g_Y = objective_and_grad(Y, Phi[idx], onehot[idx], lam[idx], mask)
        gmax = np.abs(g_Y).reshape(idx.size, -1).max(axis=1)
        done = gmax <= tol
        if np.any(done):
            d = idx[done]
            W_prev[d] = W[d]
            W[d] = Y[done]
            converged[d] = True
            active[d] = False
            n_iter[d] = it
        keep = ~done
        idx, Y, f_Y, g_Y = idx[keep], Y[keep], f_Y[keep], g_Y[keep]
        if idx.size == 0:
            break
        g2 = np.sum(g_Y ** 2, axis=(1, 2))
        t = step[idx] * 2.0
        pending = np.ones(idx.size, dtype=bool)
        W_new = np.empty_like(Y)
        f_new = np.empty(idx.size)
        for _ in range(60):
            p = np.nonzero(pending)[0]
            cand = Y[p] - t[p, None, None] * g_Y[p]
            f_c, _ = objective_and_grad(cand, Phi[idx[p]], onehot[idx[p]], lam[idx[p]], mask)
            # 1/L always descends, so accept it even when rounding hides the decrease
            ok = (f_c <= f_Y[p] - 0.5 * t[p] * g2[p]) | (t[p] <= t_min[idx[p]])
            W_new[p[ok]] = cand[ok]
            f_new[p[ok]] = f_c[ok]
            pending[p[ok]] = False
            t[p[~ok]] = np.maximum(0.5 * t[p[~ok]], t_min[idx[p[~ok]]])
            if not pending.any():
                break
        else:
            p = np.nonzero(pending)[0]
            W_new[p] = Y[p]
            f_new[p] = f_Y[p]
        step[idx] = t
        restart = f_new > f_W[idx]
        k[idx] = np.where(restart, 1.0, k[idx] + 1.0)
        W_prev[idx] = W[idx]
        W[idx] = W_new
        f_W[idx] = f_new
        n_iter[idx] = it + 1
    return W, n_iter, converged


def fit(features, labels, lam: float, K: int | None = None, penalize_bias: bool = True,
        tol: float = 1e-6, max_iter: int = 2000) -> LogRegModel:
    """Fit a single regularised softmax head on (already normalised) features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    K = int(labels.max()) + 1 if K is None else K
    W, n_iter, conv = fit_batch(features[None], labels[None], lam, K, tol, max_iter, penalize_bias)
    model = LogRegModel(W[0], float(lam), 1.0, int(n_iter[0]), bool(conv[0]))
    separable = bool(np.all(np.argmax(features @ model.W, axis=1) == labels))
    if lam == 0 and (separable or not model.converged):
        # no finite minimiser: the solver only stops because the gradient underflows
        model.norm_divergence = True
        warnings.warn("unregularised fit on separable data; weight norm is diverging",
                      NormDivergenceWarning, stacklevel=2)
    return model


# ---------------------------------------------------------------- grid search


@dataclass
class EpisodeFeatures:
    """Normalised support/query features for one classification episode."""
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    way: int


def stack(episodes):
    eps = list(episodes)
    if not eps:
        raise ValueError("no episodes")
    return (np.stack([e.support for e in eps]), np.stack([e.support_labels for e in eps]),
            np.stack([e.query for e in eps]), np.stack([e.query_labels for e in eps]), eps[0].way)


@dataclass
class GridSearchResult:
    lambda_grid: list[float]
    temperature_grid: list[float] = field(default_factory=list)
    chosen_lambda: float | None = None
    chosen_temperature: float | None = None
    lambda_table: list[tuple[float, float]] = field(default_factory=list)  # (lambda, mean accuracy)
    temperature_table: list[tuple[float, float, float]] = field(default_factory=list)  # (T, ece, accuracy)
    weights: np.ndarray | None = None  # per-episode W at the chosen lambda


def fit_episodes(episodes, lam: float, penalize_bias: bool = True, max_iter: int = 2000):
    S, SL, Q, QL, way = stack(episodes)
    W, _, _ = fit_batch(S, SL, lam, way, penalize_bias=penalize_bias, max_iter=max_iter)
    return W


def episode_accuracies(W, episodes) -> np.ndarray:
    _, _, Q, QL, _ = stack(episodes)
    pred = np.argmax(Q @ W, axis=-1)
    return np.mean(pred == QL, axis=1)


def select_lambda(episodes, lambda_grid=DEFAULT_LAMBDA_GRID, penalize_bias: bool = True,
                  max_iter: int = 2000) -> GridSearchResult:
    """Pick the lambda with the best mean validation query accuracy at T=1 (ties: smaller lambda)."""
    grid = sorted(float(v) for v in lambda_grid)
    if not grid:
        raise ValueError("empty lambda grid")
    episodes = list(episodes)
    if not episodes:
        raise ValueError("at least one validation episode is required")
    result = GridSearchResult(grid)
    best = None
    for lam in grid:
        W = fit_episodes(episodes, lam, penalize_bias, max_iter)
        acc = float(np.mean(episode_accuracies(W, episodes)))
        result.lambda_table.append((lam, acc))
        if best is None or acc > best[1]:
            best = (lam, acc, W)
    result.chosen_lambda, _, result.weights = best
    return result


def pooled_predictions(W, episodes, temperature: float = 1.0):
    _, _, Q, QL, _ = stack(episodes)
    probs = softmax(Q @ W, temperature)
    return probs.reshape(-1, probs.shape[-1]), QL.reshape(-1)


def select_temperature(W, episodes, temperature_grid=DEFAULT_TEMPERATURE_GRID, n_bins: int = calibration.DEFAULT_BINS,
                       result: GridSearchResult | None = None) -> GridSearchResult:
    """Pick the temperature minimising ECE over pooled validation query predictions.

    Ties go to the temperature closest to 1.
    """
    grid = [float(t) for t in temperature_grid]
    if not grid:
        raise ValueError("empty temperature grid")
    if result is None:
        result = GridSearchResult([])
    result.temperature_grid = grid
    result.temperature_table = []
    episodes = list(episodes)
    _, _, Q, QL, _ = stack(episodes)
    logits = Q @ W
    labels = QL.reshape(-1)
    best = None
    for T in grid:
        probs = softmax(logits, T).reshape(-1, logits.shape[-1])
        conf = probs.max(axis=1)
        correct = probs.argmax(axis=1) == labels
        e = calibration.ece(conf, correct, n_bins)
        result.temperature_table.append((T, e, float(np.mean(correct))))
        key = (e, abs(T - 1.0))
        if best is None or key < best[0]:
            best = (key, T)
    result.chosen_temperature = best[1]
    return result
