"""Minimal dense network engine: MLPs with manual backprop and Adam.

All hidden layers use tanh, the output layer is linear. Parameters live in
plain numpy arrays (float64); weights are (fan_in, fan_out) so a forward step
is x @ W + b. Gradient correctness is checked against central finite
differences (gradient_check), which is the oracle the analytic path must
match.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng


class NNError(ValueError):
    pass


class DimMismatch(NNError):
    pass


class TapeMismatch(NNError):
    """Backward called with a tape from a different forward shape."""


class ShapeMismatch(NNError):
    """Optimizer state does not line up with the parameter list."""


@dataclass
class Mlp:
    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_in(self) -> int:
        return self.dims[0]

    @property
    def n_out(self) -> int:
        return self.dims[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def mlp_init(dims: tuple[int, ...], rng: SeededRng) -> Mlp:
    """Glorot uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise DimMismatch(f"bad layer sizes {dims}")
    weights, biases = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-a, a, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return Mlp(tuple(dims), weights, biases)


@dataclass
class Tape:
    dims: tuple[int, ...]
    acts: list[np.ndarray]  # activations entering each layer; acts[0] is the input


def mlp_forward(m: Mlp, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Forward pass for a single vector (shape (n_in,)) or batch (B, n_in)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.n_in:
        raise DimMismatch(f"input width {x.shape[-1]} != {m.n_in}")
    acts = [x]
    a = x
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = a @ w + b
        a = z if i == last else np.tanh(z)
        acts.append(a)
    return a, Tape(m.dims, acts)


def mlp_backward(m: Mlp, tape: Tape, dy: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Gradients (dW list, db list, dx) for loss gradient dy at the output."""
    if tape.dims != m.dims:
        raise TapeMismatch(f"tape dims {tape.dims} != model dims {m.dims}")
    dy = np.asarray(dy, dtype=float)
    if dy.shape != tape.acts[-1].shape:
        raise TapeMismatch(f"dy shape {dy.shape} != output shape {tape.acts[-1].shape}")
    dws: list[np.ndarray] = [None] * len(m.weights)
    dbs: list[np.ndarray] = [None] * len(m.biases)
    g = dy
    last = len(m.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (1.0 - tape.acts[i + 1] ** 2)  # d tanh
        a_in = tape.acts[i]
        if g.ndim == 1:
            dws[i] = np.outer(a_in, g)
            dbs[i] = g.copy()
        else:
            dws[i] = a_in.T @ g
            dbs[i] = g.sum(axis=0)
        g = g @ m.weights[i].T
    return dws, dbs, g


@dataclass
class LrSchedule:
    """Piecewise-constant learning rate by epoch."""

    rates: tuple[float, ...] = (1e-4, 1e-5, 1e-6)
    milestones: tuple[int, ...] = (100, 500)

    def __post_init__(self):
        if len(self.rates) != len(self.milestones) + 1:
            raise NNError("need exactly one more rate than milestones")


def lr_schedule(epoch: int, cfg: LrSchedule | None = None) -> float:
    cfg = cfg or LrSchedule()
    return cfg.rates[bisect.bisect_right(cfg.milestones, epoch)]


@dataclass
class AdamState:
    """Adam moments for a flat list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    """One Adam update, in place on the parameter arrays."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeMismatch("params/grads/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gradient_check(
    m: Mlp,
    rng: SeededRng,
    probes: int = 100,
    h: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The loss is d . f(x) for a fixed random direction d, probed at `probes`
    randomly chosen parameter coordinates (the finite-difference value is the
    oracle).
    """
    x = rng.normal(size=m.n_in)
    d = rng.normal(size=m.n_out)
    _, tape = mlp_forward(m, x)
    dws, dbs, _ = mlp_backward(m, tape, d)
    analytic = []
    for dw, db in zip(dws, dbs):
        analytic.append(dw)
        analytic.append(db)
    params = m.params()
    worst = 0.0
    for _ in range(probes):
        pi = int(rng.integers(len(params)))
        flat_i = int(rng.integers(params[pi].size))
        p = params[pi].reshape(-1)
        orig = p[flat_i]
        p[flat_i] = orig + h
        y_hi, _ = mlp_forward(m, x)
        p[flat_i] = orig - h
        y_lo, _ = mlp_forward(m, x)
        p[flat_i] = orig
        fd = float(d @ (y_hi - y_lo)) / (2.0 * h)
        an = float(analytic[pi].reshape(-1)[flat_i])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst
