"""Numerical substrate: small tanh MLPs with hand-written backprop, Adam,
seeded random streams and order-statistic conformal quantiles.

Everything here is batched numpy in float64. A single input vector is
treated as a batch of one and the result squeezed back.

Random streams
--------------
All randomness goes through :func:`substream`, which builds a
``numpy.random.Generator`` on the counter-based Philox-4x64 bit generator,
keyed by ``SeedSequence(master_seed, spawn_key=(purpose, *keys))``. Purposes
have fixed integer offsets (:data:`PURPOSES`) so that, e.g., drawing more
conditioner values never shifts the minibatch order. Identical seed and call
sequence give identical draws for a fixed numpy major version.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, TrainingError

PURPOSES = {
    "data": 1,
    "init": 2,
    "conditioner": 3,
    "batching": 4,
    "reference": 5,
    "split": 6,
    "eval": 7,
    "participation": 8,
}


def substream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``purpose`` derived from ``seed``."""
    if purpose not in PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], *map(int, keys)))
    return np.random.Generator(np.random.Philox(ss))


def gaussian_sample(rng: np.random.Generator, mean, std, n: int) -> np.ndarray:
    """``n`` i.i.d. rows from N(mean, diag(std**2)), shape (n, len(mean))."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    std = np.asarray(std, dtype=float).reshape(-1)
    if std.shape != mean.shape:
        raise ShapeError(f"mean has {mean.size} entries but std has {std.size}")
    if np.any(~(std > 0)):
        raise ValueError("std entries must be strictly positive")
    return mean + std * rng.standard_normal((int(n), mean.size))


def conformal_quantile(scores, alpha: float) -> float:
    """k-th smallest score with k = ceil((1 - alpha)(n + 1)); +inf if k > n."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.size == 0:
        raise ValueError("conformal_quantile needs at least one score")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = scores.size
    # guard against (1 - alpha)(n + 1) landing a hair above an integer
    k = math.ceil(round((1.0 - alpha) * (n + 1), 9))
    if k > n:
        return math.inf
    return float(np.partition(scores, k - 1)[k - 1])


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    """Weights of a fully connected net; ``weight`` is (fan_in, fan_out).

    Hidden layers use tanh, the output layer is linear.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    def __post_init__(self):
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[0]} inputs, previous emits "
                                 f"{self.layers[i - 1][0].shape[1]}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def zeros_like(self) -> "MlpParams":
        return MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return cls([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> MlpParams:
    """Glorot-uniform init; ``zero_last`` zeroes the output layer."""
    if len(sizes) < 2:
        raise ShapeError("an MLP needs at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers)


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise ShapeError(f"expected input of width {dim}, got shape {x.shape}")
    return x2, single


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Batched forward pass returning (output, activations) for backprop.

    ``activations[i]`` is the input to layer ``i``.
    """
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x2, single = _as_batch(x, params.in_dim)
    out, _ = mlp_forward_cached(params, x2)
    return out[0] if single else out


def mlp_backward(params: MlpParams, acts, upstream: np.ndarray):
    """Reverse pass of ``sum(upstream * output)`` given cached activations.

    Returns (parameter gradients as MlpParams, input gradient). Parameter
    gradients are summed over the batch.
    """
    grads = []
    g = upstream
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        if i < len(params.layers) - 1:
            # acts[i + 1] is tanh output of layer i
            g = g * (1.0 - acts[i + 1] ** 2)
        grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ w.T
    grads.reverse()
    return MlpParams(grads), g


def mlp_grad(params: MlpParams, x, upstream):
    """Exact gradients of <upstream, mlp_forward(params, x)>."""
    x2, single = _as_batch(x, params.in_dim)
    up = np.asarray(upstream, dtype=float)
    up2 = up.reshape(1, -1) if up.ndim == 1 else up
    if up2.shape != (x2.shape[0], params.out_dim):
        raise ShapeError(f"upstream shape {up.shape} does not match output "
                         f"({x2.shape[0]}, {params.out_dim})")
    _, acts = mlp_forward_cached(params, x2)
    grads, gx = mlp_backward(params, acts, up2)
    return grads, (gx[0] if single else gx)


# ---------------------------------------------------------------------------
# flat parameter vectors


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=float).reshape(-1) for a in arrays])


def unflatten(vector: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    out, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape, dtype=int))
        out.append(vector[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != vector.size:
        raise ShapeError(f"vector has {vector.size} entries, shapes need {pos}")
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update on flat vectors; inputs are not mutated."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(f"params {params.shape}, grads {grads.shape} and moments "
                         f"{state.m.shape} must match")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    step = state.step + 1
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at optimizer step {step}", step=step)
    b1, b2 = betas
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, step)
