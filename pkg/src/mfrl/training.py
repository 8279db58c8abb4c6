"""Representation learning on merged meta-training data, followed by tail SWA.

Regression trains one linear head per training task on top of a shared
feature extractor (mean squared error with the 1/(2N') normalisation);
classification trains a single C-way softmax head (cross-entropy). After the
SGD phase the trainer keeps running at a constant learning rate and averages
end-of-epoch snapshots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .averaging import EmaState, SwaState, ema_update, swa_accumulate
from .data import make_rng
from .nn import ForwardCache, MlpSpec, ParamVector, SgdState


class TrainingDivergence(nn.NumericError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class MergedDataset:
    x: np.ndarray
    y: np.ndarray  # float targets (regression) or int labels (classification)
    ids: np.ndarray  # task id (regression) or class id (classification)
    n_groups: int
    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.ids.size


def merge_tasks(tasks) -> MergedDataset:
    """Stack ``(x, y)`` pairs from every training task, tagging rows with the task index."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks to merge")
    xs, ys, ids = [], [], []
    width = None
    for t, (x, y) in enumerate(tasks):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if width is None:
            width = x.shape[1]
        elif x.shape[1] != width:
            raise ValueError(f"task {t} has input width {x.shape[1]}, expected {width}")
        xs.append(x)
        ys.append(np.asarray(y, dtype=np.float64))
        ids.append(np.full(x.shape[0], t, dtype=np.int64))
    counts = np.array([x.shape[0] for x in xs], dtype=np.int64)
    return MergedDataset(np.vstack(xs), np.concatenate(ys), np.concatenate(ids), len(tasks), counts)


def merge_classes(x, labels, class_count: int) -> MergedDataset:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=class_count)
    return MergedDataset(np.asarray(x, dtype=np.float64), labels, labels, class_count, counts)


# ---------------------------------------------------------------- losses


def mse_multitask_loss(outputs: np.ndarray, task_ids: np.ndarray, y: np.ndarray):
    """Per-task squared error, ``sum (y - out[i, task_i])^2 / (2 B)``.

    Each row is scored only against its own task column. Returns the loss
    and dloss/doutputs (dense, one nonzero per row).
    """
    B, T = outputs.shape
    if task_ids.size and (task_ids.min() < 0 or task_ids.max() >= T):
        raise ValueError(f"task id outside [0, {T})")
    rows = np.arange(B)
    r = outputs[rows, task_ids] - y
    grad = np.zeros_like(outputs)
    grad[rows, task_ids] = r / B
    return 0.5 * float(r @ r) / B, grad


def ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - shifted[rows, labels]))
    p = np.exp(shifted - lse[:, None])
    p[rows, labels] -= 1.0
    return loss, p / B


def loss_and_grad(spec: MlpSpec, params: ParamVector, x, y, ids, kind: str):
    """Batch loss and full parameter gradient for either training objective."""
    cache = ForwardCache()
    h = nn.forward_hidden(spec, params, x, cache)
    W, b = params.layers()[-1]
    B = h.shape[0]
    if kind == "mse":
        if ids.size and (ids.min() < 0 or ids.max() >= W.shape[1]):
            raise ValueError(f"task id outside [0, {W.shape[1]})")
        # gathered head: only each row's own task column is touched
        w_rows = W.T[ids]
        r = np.einsum("ij,ij->i", h, w_rows) + b[ids] - y
        d = r / B
        loss = 0.5 * float(r @ r) / B
        T, p = W.shape[1], W.shape[0]
        flat_idx = (ids[:, None] * p + np.arange(p)).ravel()
        gW = np.bincount(flat_idx, weights=(d[:, None] * h).ravel(), minlength=T * p).reshape(T, p)
        gb = np.bincount(ids, weights=d, minlength=T)
        dfeat = d[:, None] * w_rows
        grads = nn.backward_hidden(spec, params, cache, dfeat, gW.T, gb)
    elif kind == "ce":
        logits = h @ W + b
        loss, delta = ce_loss(logits, ids)
        grads = nn.backward_hidden(spec, params, cache, delta @ W.T, h.T @ delta, delta.sum(axis=0))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return loss, grads


def dataset_loss(spec: MlpSpec, params: ParamVector, data: MergedDataset, kind: str, chunk: int = 8192) -> float:
    total = 0.0
    for start in range(0, data.n, chunk):
        sl = slice(start, start + chunk)
        h, out = nn.forward(spec, params, data.x[sl])
        if kind == "mse":
            loss, _ = mse_multitask_loss(out, data.ids[sl], data.y[sl])
        else:
            loss, _ = ce_loss(out, data.ids[sl])
        total += loss * out.shape[0]
    return total / data.n


# ---------------------------------------------------------------- trainer


@dataclass
class ReprTrainConfig:
    """Training schedule.

    With ``iterations > 0`` the trainer counts minibatch steps and treats every
    ``epoch_iters`` steps as one epoch (logging, milestones, SWA snapshots);
    otherwise it runs ``epochs`` passes over shuffled data.
    """
    loss: str = "mse"
    epochs: int = 100
    iterations: int = 0
    epoch_iters: int = 0
    batch_size: int = 64
    base_lr: float = 0.05
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    swa_epochs: int = 0
    swa_lr: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.swa_epochs < 0:
            raise ValueError("swa_epochs must be >= 0")
        if self.loss not in ("mse", "ce"):
            raise ValueError(f"loss must be 'mse' or 'ce', got {self.loss!r}")
        if self.iterations < 0 or self.epochs < 0:
            raise ValueError("epochs/iterations must be >= 0")
        if self.base_lr <= 0 or self.swa_lr <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def iteration_mode(self) -> bool:
        return self.iterations > 0

    def steps_per_epoch(self, n: int) -> int:
        if self.iteration_mode:
            return self.epoch_iters or math.ceil(n / self.batch_size)
        return math.ceil(n / self.batch_size)

    def sgd_epochs(self, n: int) -> int:
        if self.iteration_mode:
            return math.ceil(self.iterations / self.steps_per_epoch(n))
        return self.epochs


@dataclass
class LogRow:
    epoch: int
    phase: str
    loss: float
    lr: float


@dataclass
class TrainResult:
    theta_sgd: ParamVector
    theta_swa: ParamVector
    log: list[LogRow]
    snapshots: list[ParamVector] = field(default_factory=list)
    optimizer: SgdState | None = None
    step_ema: dict[float, ParamVector] = field(default_factory=dict)  # per-step EMA over the averaging phase


class _Batcher:
    """Uniform minibatches without replacement; reshuffles at each pass."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch]
        self.pos += idx.size
        return idx


def _run_epoch(spec, params, data, cfg, state, batcher, steps, lr, epoch, on_step=None):
    total, seen = 0.0, 0
    for _ in range(steps):
        idx = batcher.next()
        loss, grads = loss_and_grad(spec, params, data.x[idx], data.y[idx], data.ids[idx], cfg.loss)
        if not math.isfinite(loss):
            raise TrainingDivergence(epoch, loss)
        nn.sgd_step(params, grads, lr, state)
        if on_step is not None:
            on_step(params)
        total += loss * idx.size
        seen += idx.size
    mean = total / max(seen, 1)
    if not math.isfinite(mean):
        raise TrainingDivergence(epoch, mean)
    return mean


def train_sgd(spec: MlpSpec, data: MergedDataset, cfg: ReprTrainConfig, init: ParamVector | None = None):
    """SGD phase only. Returns ``(theta_T, optimizer_state, log)``."""
    params = init.copy() if init is not None else nn.init_params(spec, make_rng(cfg.seed, 1))
    state = SgdState.zeros(len(params), cfg.momentum, cfg.weight_decay)
    batcher = _Batcher(data.n, cfg.batch_size, make_rng(cfg.seed, 2))
    spe = cfg.steps_per_epoch(data.n)
    log = []
    remaining = cfg.iterations if cfg.iteration_mode else None
    for epoch in range(cfg.sgd_epochs(data.n)):
        lr = nn.lr_at(epoch, cfg.base_lr, cfg.milestones, cfg.gamma)
        steps = spe if remaining is None else min(spe, remaining)
        if remaining is not None:
            remaining -= steps
        loss = _run_epoch(spec, params, data, cfg, state, batcher, steps, lr, epoch)
        log.append(LogRow(epoch, "sgd", loss, lr))
    return params, state, log


def run_swa(spec: MlpSpec, data: MergedDataset, cfg: ReprTrainConfig, theta_T: ParamVector,
            state: SgdState | None = None, swa_lr: float | None = None, swa_epochs: int | None = None,
            keep_snapshots: bool = False, first_epoch: int = 0, step_ema=()):
    """Continue from ``theta_T`` at a constant rate, averaging end-of-epoch weights.

    ``step_ema`` lists forgetting factors for EMAs seeded at ``theta_T`` and
    updated after every optimizer step; they come back as a fourth value.
    """
    swa_lr = cfg.swa_lr if swa_lr is None else swa_lr
    swa_epochs = cfg.swa_epochs if swa_epochs is None else swa_epochs
    params = theta_T.copy()
    if state is None:
        state = SgdState.zeros(len(params), cfg.momentum, cfg.weight_decay)
    else:
        state = SgdState(state.momentum_buffer.copy(), state.momentum, state.weight_decay)
    batcher = _Batcher(data.n, cfg.batch_size, make_rng(cfg.seed, 3))
    spe = cfg.steps_per_epoch(data.n)
    swa = SwaState()
    log, snaps = [], []
    emas = {a: EmaState(theta_T.copy(), a) for a in step_ema}

    def on_step(p):
        for a in emas:
            emas[a] = ema_update(emas[a], p)

    for k in range(swa_epochs):
        epoch = first_epoch + k
        loss = _run_epoch(spec, params, data, cfg, state, batcher, spe, swa_lr, epoch, on_step if emas else None)
        log.append(LogRow(epoch, "swa", loss, swa_lr))
        swa = swa_accumulate(swa, params)
        if keep_snapshots:
            snaps.append(params.copy())
    theta_swa = swa.average() if swa.count else theta_T.copy()
    if step_ema:
        return theta_swa, log, snaps, {a: e.avg for a, e in emas.items()}
    return theta_swa, log, snaps


def train_representation(spec: MlpSpec, data: MergedDataset, cfg: ReprTrainConfig,
                         keep_snapshots: bool = False, step_ema=()) -> TrainResult:
    theta_T, state, log = train_sgd(spec, data, cfg)
    out = run_swa(spec, data, cfg, theta_T, state, keep_snapshots=keep_snapshots, first_epoch=len(log),
                  step_ema=step_ema)
    theta_swa, swa_log, snaps = out[:3]
    return TrainResult(theta_T, theta_swa, log + swa_log, snaps, state, out[3] if step_ema else {})


def extract_features(spec: MlpSpec, params: ParamVector, x, append_bias: bool = True) -> np.ndarray:
    """Frozen feature map ``h(x)``; the top layer is ignored."""
    h = nn.features(spec, params, x)
    if append_bias:
        h = np.hstack([h, np.ones((h.shape[0], 1))])
    return h
