"""Dense network engine: forward pass, reverse-mode gradients, SGD with momentum.

Parameters live in a single flat float64 vector (:class:`ParamVector`) so that
weight averaging and checkpointing operate on one array. The layout is
``W_1, b_1, W_2, b_2, ..., W_out, b_out`` with ``W_l`` stored row-major as
``(fan_in, fan_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "erf")


class ShapeError(ValueError):
    """Input or parameter dimensions disagree with the network description."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a gradient or an update."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "erf"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ShapeError(f"all layer widths must be >= 1, got {dims}")
        if not self.hidden_dims:
            raise ShapeError("at least one hidden layer is required")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not self.bias:
            raise ValueError("bias-free layers are not supported")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    def shapes(self) -> list[tuple[int, int]]:
        out = []
        for fan_in, fan_out in self.layer_dims:
            out.append((fan_in, fan_out))
            out.append((1, fan_out))
        return out

    def n_params(self) -> int:
        return sum(r * c for r, c in self.shapes())


@dataclass
class ParamVector:
    values: np.ndarray
    shapes: list[tuple[int, int]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shapes = [(int(r), int(c)) for r, c in self.shapes]
        expected = sum(r * c for r, c in self.shapes)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ShapeError(f"parameter vector has {self.values.size} entries, shape table needs {expected}")

    def __len__(self):
        return self.values.size

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), list(self.shapes))

    def blocks(self) -> list[np.ndarray]:
        """Views of each (rows, cols) block; writes go through to ``values``."""
        out, start = [], 0
        for r, c in self.shapes:
            out.append(self.values[start:start + r * c].reshape(r, c))
            start += r * c
        return out

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) view pairs per layer, cached while ``values`` is the same array."""
        cached = self.__dict__.get("_layer_views")
        if cached is not None and cached[0] is self.values:
            return cached[1]
        b = self.blocks()
        views = [(b[i], b[i + 1][0]) for i in range(0, len(b), 2)]
        self.__dict__["_layer_views"] = (self.values, views)
        return views


@dataclass
class SgdState:
    momentum_buffer: np.ndarray
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def zeros(cls, n: int, momentum: float = 0.9, weight_decay: float = 0.0) -> SgdState:
        return cls(np.zeros(n), momentum, weight_decay)


# Abramowitz & Stegun 7.1.26
_AS_P = 0.3275911
_AS_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erf_approx(x):
    """Rational approximation of erf with absolute error below 1.5e-7."""
    return _erf_and_gauss(np.asarray(x, dtype=np.float64))[0]


def _erf_and_gauss(x: np.ndarray):
    # returns (erf_approx(x), exp(-x^2)); the second factor is reused by the derivative
    gauss = np.square(x)
    np.negative(gauss, out=gauss)
    np.exp(gauss, out=gauss)
    t = np.abs(x)
    t *= _AS_P
    t += 1.0
    np.reciprocal(t, out=t)
    a1, a2, a3, a4, a5 = _AS_A
    poly = t * a5
    for a in (a4, a3, a2, a1):
        poly += a
        poly *= t
    poly *= gauss
    np.subtract(1.0, poly, out=poly)
    np.copysign(poly, x, out=poly)
    return poly, gauss


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    return _activate(z, kind)[0]


def _activate(z: np.ndarray, kind: str):
    """Activation plus whatever :func:`activate_grad` needs to avoid recomputation."""
    if kind == "relu":
        return np.maximum(z, 0.0), None
    if kind == "tanh":
        return np.tanh(z), None
    if kind == "erf":
        return _erf_and_gauss(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(z: np.ndarray, a: np.ndarray, kind: str, aux=None) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (``a`` = activate(z)).

    ReLU uses 0 at the kink; erf uses the exact Gaussian derivative, not the
    derivative of the rational approximation.
    """
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "erf":
        gauss = np.exp(-z * z) if aux is None else aux
        return _TWO_OVER_SQRT_PI * gauss
    raise ValueError(f"unknown activation {kind!r}")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform fan-in initialisation: weights U(+-sqrt(6/fan_in)), biases U(+-1/sqrt(fan_in))."""
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        w_bound = math.sqrt(6.0 / fan_in)
        b_bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-w_bound, w_bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-b_bound, b_bound, size=fan_out))
    return ParamVector(np.concatenate(chunks), spec.shapes())


def _check(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    if params.shapes != spec.shapes():
        raise ShapeError(f"parameter shape table {params.shapes} does not match network {spec.shapes()}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"layer 0 expects input width {spec.input_dim}, got array of shape {x.shape}")
    return x


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    aux: list = field(default_factory=list)


def forward(spec: MlpSpec, params: ParamVector, x, cache: ForwardCache | None = None):
    """Run the network on a batch.

    Returns ``(features, outputs)`` where ``features`` are the last hidden
    activations ``h(x)`` and ``outputs`` the affine top layer applied to them.
    Pass a :class:`ForwardCache` to keep the intermediates needed by :func:`backward`.
    """
    h = forward_hidden(spec, params, x, cache)
    W, b = params.layers()[-1]
    return h, h @ W + b


def forward_hidden(spec: MlpSpec, params: ParamVector, x, cache: ForwardCache | None = None) -> np.ndarray:
    a = _check(spec, params, x)
    for W, b in params.layers()[:-1]:
        z = a @ W
        z += b
        h, aux = _activate(z, spec.activation)
        if cache is not None:
            cache.inputs.append(a)
            cache.pre.append(z)
            cache.post.append(h)
            cache.aux.append(aux)
        a = h
    if cache is not None:
        cache.inputs.append(a)
    return a


def features(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    a = _check(spec, params, x)
    for W, b in params.layers()[:-1]:
        a = activate(a @ W + b, spec.activation)
    return a


def backward(spec: MlpSpec, params: ParamVector, cache: ForwardCache, upstream: np.ndarray) -> ParamVector:
    """Gradient of the loss w.r.t. every parameter given dloss/doutputs."""
    layers = params.layers()
    if len(cache.inputs) != len(layers):
        raise ShapeError("forward cache does not belong to this network")
    delta = np.asarray(upstream, dtype=np.float64)
    W_top, _ = layers[-1]
    h = cache.inputs[-1]
    if delta.shape != (h.shape[0], W_top.shape[1]):
        raise ShapeError(f"layer {len(layers) - 1} expects upstream gradient of shape "
                         f"{(h.shape[0], W_top.shape[1])}, got {delta.shape}")
    return backward_hidden(spec, params, cache, delta @ W_top.T, h.T @ delta, delta.sum(axis=0), upstream)


def backward_hidden(spec: MlpSpec, params: ParamVector, cache: ForwardCache, dfeat: np.ndarray,
                    top_w_grad: np.ndarray, top_b_grad: np.ndarray, upstream=None) -> ParamVector:
    """Backpropagate dloss/dfeatures through the hidden layers.

    The caller supplies the top-layer gradients, which lets multi-head losses
    that touch only a few output columns skip the dense output Jacobian.
    """
    layers = params.layers()
    n_layers = len(layers)
    out = ParamVector(np.empty(len(params)), params.shapes)
    grads = out.blocks()
    grads[-2][...] = top_w_grad
    grads[-1][0] = top_b_grad
    delta = dfeat
    for li in range(n_layers - 2, -1, -1):
        aux = cache.aux[li] if cache.aux else None
        delta = delta * activate_grad(cache.pre[li], cache.post[li], spec.activation, aux)
        np.matmul(cache.inputs[li].T, delta, out=grads[2 * li])
        np.sum(delta, axis=0, out=grads[2 * li + 1][0])
        if li > 0:
            delta = delta @ layers[li][0].T
    if not math.isfinite(float(out.values.sum())):
        _raise_nonfinite(spec, grads, dfeat if upstream is None else upstream)
    return out


def _raise_nonfinite(spec, grads, upstream):
    bad_rows = np.where(~np.all(np.isfinite(np.atleast_2d(upstream)), axis=1))[0]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            kind = "weight" if i % 2 == 0 else "bias"
            msg = f"non-finite gradient in layer {i // 2} {kind}"
            if bad_rows.size:
                msg += f" (batch index {int(bad_rows[0])})"
            raise NumericError(msg)


def sgd_step(params: ParamVector, grads: ParamVector, lr: float, state: SgdState) -> ParamVector:
    """Momentum SGD with coupled L2 weight decay; updates ``params`` and the buffer in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if state.momentum_buffer.shape != params.values.shape:
        raise ShapeError("momentum buffer length does not match parameters")
    g = grads.values
    if state.weight_decay:
        g = g + state.weight_decay * params.values
    buf = state.momentum_buffer
    if state.momentum:
        buf *= state.momentum
        buf += g
    else:
        buf[:] = g
    step = lr * buf
    if not math.isfinite(float(step.sum())):
        raise NumericError("non-finite parameter after SGD update")
    params.values -= step
    return params


def lr_at(epoch: int, base_lr: float, milestones=(), gamma: float = 0.1) -> float:
    milestones = list(milestones)
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        raise ValueError(f"milestones must be strictly increasing, got {milestones}")
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)
