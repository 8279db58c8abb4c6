"""Hierarchical Bayesian linear regression with evidence-approximation inference.

The prior on the weights is isotropic Gaussian with precision ``lambda``; the
observation noise has precision ``beta``. Both carry Gamma hyperpriors and are
set by alternating a closed-form Gaussian posterior with fixed-point updates
that maximise the (hyperprior-penalised) marginal likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class EvidenceError(ArithmeticError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class HyperPrior:
    a: float = 1e-6
    b: float = 1e-6
    c: float = 1e-6
    d: float = 1e-6

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("hyperprior parameters must be >= 0")


@dataclass
class BayesLinearPosterior:
    m: np.ndarray
    Sigma: np.ndarray
    lam: float
    beta: float
    gamma_eff: float
    n_iter: int = 0
    converged: bool = True
    trace: list[tuple[float, float, float]] = field(default_factory=list)  # (lam, beta, log evidence)

    @property
    def noise_std(self) -> float:
        return 1.0 / math.sqrt(self.beta)


def _posterior(Phi, y, lam, beta, PtP=None, Pty=None):
    """Gaussian posterior over weights for fixed (lam, beta).

    Returns (m, Sigma, chol) where chol factors A = lam I + beta Phi^T Phi.
    """
    M = Phi.shape[1]
    PtP = Phi.T @ Phi if PtP is None else PtP
    Pty = Phi.T @ y if Pty is None else Pty
    A = beta * PtP
    A[np.diag_indices(M)] += lam
    jitter = 0.0
    for attempt in range(4):
        try:
            c = cho_factor(A + jitter * np.eye(M), lower=True)
            break
        except LinAlgError:
            if attempt == 3:
                raise EvidenceError(f"Cholesky failed after jitter {jitter:g}")
            jitter = 1e-10 if jitter == 0 else jitter * 10
    m = beta * cho_solve(c, Pty)
    Sigma = cho_solve(c, np.eye(M))
    Sigma = 0.5 * (Sigma + Sigma.T)
    return m, Sigma, c


def log_evidence(Phi, y, lam, beta, m=None, chol=None) -> float:
    """log p(y | Phi, lam, beta) for the Gaussian linear model."""
    n, M = Phi.shape
    if m is None or chol is None:
        m, _, chol = _posterior(Phi, y, lam, beta)
    r = y - Phi @ m
    E = 0.5 * beta * float(r @ r) + 0.5 * lam * float(m @ m)
    logdet_A = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return 0.5 * M * math.log(lam) + 0.5 * n * math.log(beta) - E - 0.5 * logdet_A - 0.5 * n * math.log(2 * math.pi)


def _objective(ev, lam, beta, hyper):
    # penalised evidence in log-parameter space; the fixed-point updates ascend this
    return ev + hyper.a * math.log(lam) - hyper.b * lam + hyper.c * math.log(beta) - hyper.d * beta


def fit_evidence(Phi, y, hyper: HyperPrior = HyperPrior(), tol: float = 1e-6, max_iter: int = 300,
                 lam0: float | None = None, beta0: float | None = None, update: bool = True,
                 strict: bool = True) -> BayesLinearPosterior:
    """Fit the posterior and the precisions (lambda, beta) by evidence maximisation.

    Each iteration computes the posterior at the current precisions, then sets
    ``lambda = (gamma + 2a) / (|m|^2 + 2b)`` and
    ``beta = (n - gamma + 2c) / (|y - Phi m|^2 + 2d)`` where
    ``gamma = M - lambda tr(Sigma)``. If a step lowers the penalised evidence it
    is halved in log space until it does not. With ``update=False`` the
    precisions stay at their initial values and only the posterior is computed.

    Hitting ``max_iter`` marks the result unconverged, or raises
    :class:`EvidenceError` carrying the last iterate when ``strict`` is set.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Phi.ndim != 2 or Phi.shape[0] != y.size or y.size < 1:
        raise ValueError(f"design {Phi.shape} and targets {y.shape} are inconsistent")
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(y))):
        raise ValueError("design and targets must be finite")
    n, M = Phi.shape
    if lam0 is None:
        lam0 = 1.0
    if beta0 is None:
        v = float(np.var(y))
        beta0 = 1.0 / v if v > 0 else 1.0
    lam, beta = float(lam0), float(beta0)
    PtP, Pty = Phi.T @ Phi, Phi.T @ y

    m, Sigma, chol = _posterior(Phi, y, lam, beta, PtP, Pty)
    ev = log_evidence(Phi, y, lam, beta, m, chol)
    trace = [(lam, beta, ev)]
    gamma = M - lam * float(np.trace(Sigma))
    if not update:
        return BayesLinearPosterior(m, Sigma, lam, beta, gamma, 0, True, trace)

    obj = _objective(ev, lam, beta, hyper)
    for it in range(1, max_iter + 1):
        r = y - Phi @ m
        lam_new = (gamma + 2 * hyper.a) / (float(m @ m) + 2 * hyper.b)
        beta_new = (n - gamma + 2 * hyper.c) / (float(r @ r) + 2 * hyper.d)
        if not (lam_new > 0 and beta_new > 0 and math.isfinite(lam_new) and math.isfinite(beta_new)):
            raise EvidenceError(f"precision update left the positive reals at iteration {it}",
                                BayesLinearPosterior(m, Sigma, lam, beta, gamma, it, False, trace))
        dl, db = math.log(lam_new / lam), math.log(beta_new / beta)
        for _ in range(40):
            lam_t, beta_t = lam * math.exp(dl), beta * math.exp(db)
            m_t, S_t, c_t = _posterior(Phi, y, lam_t, beta_t, PtP, Pty)
            ev_t = log_evidence(Phi, y, lam_t, beta_t, m_t, c_t)
            obj_t = _objective(ev_t, lam_t, beta_t, hyper)
            if obj_t >= obj:
                break
            dl, db = 0.5 * dl, 0.5 * db
        else:
            lam_t, beta_t, m_t, S_t, ev_t, obj_t = lam, beta, m, Sigma, ev, obj
        lam, beta, m, Sigma, ev, obj = lam_t, beta_t, m_t, S_t, ev_t, obj_t
        gamma = M - lam * float(np.trace(Sigma))
        trace.append((lam, beta, ev))
        if abs(dl) + abs(db) < tol:
            return BayesLinearPosterior(m, Sigma, lam, beta, gamma, it, True, trace)
    post = BayesLinearPosterior(m, Sigma, lam, beta, gamma, max_iter, False, trace)
    if strict:
        raise EvidenceError(f"evidence iterations did not converge in {max_iter} steps", post)
    return post


def predict(post: BayesLinearPosterior, phi_star):
    """Predictive mean and variance ``1/beta + phi^T Sigma phi`` (row-wise for 2-D input)."""
    phi_star = np.asarray(phi_star, dtype=np.float64)
    mean = phi_star @ post.m
    if phi_star.ndim == 1:
        var = 1.0 / post.beta + float(phi_star @ post.Sigma @ phi_star)
    else:
        var = 1.0 / post.beta + np.einsum("ij,jk,ik->i", phi_star, post.Sigma, phi_star)
    return mean, var
