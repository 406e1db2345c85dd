"""Conformalized quantile regression in reference space and the pullback of
reference-space intervals into client label space.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, TrainingError
from .flow import FlowParams, ReferenceSpec, flow_forward_unchecked
from .numerics import (AdamState, MlpParams, adam_step, conformal_quantile, flatten, gaussian_sample,
                       init_mlp, mlp_backward, mlp_forward, mlp_forward_cached, unflatten)

CALIBRATION_MODES = ("transformed-client", "reference-samples")


def pinball_loss(pred, y, level: float):
    """Quantile loss at ``level``; works elementwise on arrays."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {level}")
    diff = np.asarray(y, dtype=float) - np.asarray(pred, dtype=float)
    out = np.where(diff >= 0, level * diff, (level - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class QuantileModel:
    """Two-headed regressor; the upper head is ``q_lo + softplus(gap)``."""

    net: MlpParams
    alpha: float

    @property
    def levels(self) -> tuple[float, float]:
        return self.alpha / 2.0, 1.0 - self.alpha / 2.0

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = mlp_forward(self.net, x.reshape(1, -1) if single else x)
        lo = out[:, 0]
        hi = lo + _softplus(out[:, 1])
        return (lo[0], hi[0]) if single else (lo, hi)

    def to_dict(self) -> dict:
        return {"format": "fedccp-quantile", "version": 1, "alpha": self.alpha,
                "net": [[w.tolist(), b.tolist()] for w, b in self.net.layers]}

    @classmethod
    def from_dict(cls, payload: dict) -> "QuantileModel":
        if payload.get("format") != "fedccp-quantile":
            raise ValueError("not a quantile model checkpoint")
        net = MlpParams([(np.array(w, dtype=float).reshape(len(w), -1), np.array(b, dtype=float))
                         for w, b in payload["net"]])
        return cls(net, float(payload["alpha"]))


def save_quantile_model(model: QuantileModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_quantile_model(path) -> QuantileModel:
    return QuantileModel.from_dict(json.loads(Path(path).read_text()))


@dataclass
class QuantileConfig:
    hidden: int = 32
    depth: int = 2
    steps: int = 3000
    batch_size: int = 512
    lr: float = 3e-3
    final_lr_fraction: float = 0.05
    average_fraction: float = 0.5  # Polyak averaging over this tail of the run
    n_reference: int = 0  # 0 = fresh reference draws every step


def _quantile_loss_and_grad(net: MlpParams, x, y, levels):
    out, acts = mlp_forward_cached(net, x)
    lo = out[:, 0]
    gap = out[:, 1]
    hi = lo + _softplus(gap)
    a_lo, a_hi = levels
    n = x.shape[0]
    loss = float(np.mean(pinball_loss(lo, y, a_lo) + pinball_loss(hi, y, a_hi)))
    d_lo = np.where(y >= lo, -a_lo, 1.0 - a_lo) / n
    d_hi = np.where(y >= hi, -a_hi, 1.0 - a_hi) / n
    up = np.stack([d_lo + d_hi, d_hi * _sigmoid(gap)], axis=1)
    grads, _ = mlp_backward(net, acts, up)
    return loss, flatten(grads.arrays())


def _fit(net: MlpParams, alpha: float, config: QuantileConfig, draw_batch) -> QuantileModel:
    levels = (alpha / 2.0, 1.0 - alpha / 2.0)
    shapes = [a.shape for a in net.arrays()]
    params = flatten(net.arrays())
    state = AdamState.zeros(params.size)
    avg_from = int(config.steps * (1.0 - config.average_fraction))
    avg, n_avg = np.zeros_like(params), 0
    for step in range(config.steps):
        x, y = draw_batch(step)
        current = MlpParams.from_arrays(unflatten(params, shapes))
        loss, grad = _quantile_loss_and_grad(current, x, y, levels)
        if not math.isfinite(loss):
            raise TrainingError(f"quantile loss diverged at step {step}", step=step)
        frac = 1.0 - (1.0 - config.final_lr_fraction) * step / max(config.steps - 1, 1)
        params, state = adam_step(params, grad, state, config.lr * frac)
        if step >= avg_from:
            n_avg += 1
            avg += (params - avg) / n_avg
    if n_avg:
        params = avg
    return QuantileModel(MlpParams.from_arrays(unflatten(params, shapes)), alpha)


def train_quantile_model(ref: ReferenceSpec, alpha: float, config: QuantileConfig | None = None,
                         rng: np.random.Generator | None = None) -> QuantileModel:
    """Fit the CQR heads using draws from the reference distribution only.

    Features are the first ``ref.dim - 1`` coordinates, the label the last.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    config = config or QuantileConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    d = ref.dim - 1
    net = init_mlp([d] + [config.hidden] * config.depth + [2], rng)
    if config.n_reference:
        pool = gaussian_sample(rng, ref.mean, ref.std, config.n_reference)

        def draw(step):
            idx = rng.integers(0, pool.shape[0], config.batch_size)
            return pool[idx, :d], pool[idx, d]
    else:
        def draw(step):
            z = gaussian_sample(rng, ref.mean, ref.std, config.batch_size)
            return z[:, :d], z[:, d]

    return _fit(net, alpha, config, draw)


def fit_quantile_model(x, y, alpha: float, config: QuantileConfig | None = None,
                       rng: np.random.Generator | None = None) -> QuantileModel:
    """Fit the CQR heads on a fixed dataset (used by the CQR-only baseline)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    config = config or QuantileConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"x {x.shape} and y {y.shape} do not align")
    net = init_mlp([x.shape[1]] + [config.hidden] * config.depth + [2], rng)
    bs = min(config.batch_size, x.shape[0])

    def draw(step):
        idx = rng.integers(0, x.shape[0], bs)
        return x[idx], y[idx]

    return _fit(net, alpha, config, draw)


# ---------------------------------------------------------------------------
# scores and calibration


def cqr_score(model: QuantileModel, xt, yt):
    """max(q_lo - y, y - q_hi): negative inside the raw quantile band."""
    lo, hi = model.predict(xt)
    yt = np.asarray(yt, dtype=float)
    return np.maximum(lo - yt, yt - hi)


def residual_score(pred, y):
    """Absolute residual score of plain split conformal regression."""
    return np.abs(np.asarray(pred, dtype=float) - np.asarray(y, dtype=float))


@dataclass
class CalibrationResult:
    scores: np.ndarray
    tau: float
    alpha: float
    n: int
    mode: str = "transformed-client"

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.tau)


def calibrate(model: QuantileModel, xt, yt, alpha: float,
              mode: str = "transformed-client") -> CalibrationResult:
    """Split-conformal threshold over calibration points (xt rows, yt labels)."""
    if mode not in CALIBRATION_MODES:
        raise ValueError(f"unknown calibration mode {mode!r}")
    yt = np.asarray(yt, dtype=float).reshape(-1)
    if yt.size == 0:
        raise ValueError("calibration needs at least one point")
    xt = np.asarray(xt, dtype=float).reshape(yt.size, -1)
    scores = np.asarray(cqr_score(model, xt, yt), dtype=float)
    return CalibrationResult(scores, conformal_quantile(scores, alpha), alpha, yt.size, mode)


def reference_interval(model: QuantileModel, xt, result: CalibrationResult):
    """[q_lo - tau, q_hi + tau]; infinite tau gives (-inf, inf)."""
    lo, hi = model.predict(xt)
    if result.unbounded:
        return np.full_like(lo, -np.inf), np.full_like(hi, np.inf)
    return lo - result.tau, hi + result.tau


# ---------------------------------------------------------------------------
# prediction sets on a label grid


@dataclass(frozen=True)
class GridSpec:
    y_min: float
    y_max: float
    n_points: int = 512

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("grid needs at least two points")
        if not self.y_max > self.y_min:
            raise ValueError("grid needs y_max > y_min")

    @classmethod
    def from_labels(cls, y, n_points: int = 512, margin: float = 0.5) -> "GridSpec":
        """Label range widened by ``margin`` times the range on each side."""
        y = np.asarray(y, dtype=float)
        lo, hi = float(y.min()), float(y.max())
        span = hi - lo if hi > lo else 1.0
        return cls(lo - margin * span, hi + margin * span, n_points)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.n_points)

    @property
    def spacing(self) -> float:
        return (self.y_max - self.y_min) / (self.n_points - 1)


@dataclass
class PredictionSet:
    """Accepted cells of a uniform label grid; each cell is centred on a point."""

    grid: GridSpec
    accepted: np.ndarray
    unbounded: bool = False
    failures: int = 0

    @property
    def measure(self) -> float:
        return self.grid.spacing * int(np.count_nonzero(self.accepted))

    def contains(self, y: float) -> bool:
        h = self.grid.spacing
        idx = int(np.floor((y - self.grid.y_min) / h + 0.5))
        return 0 <= idx < self.grid.n_points and bool(self.accepted[idx])

    def intervals(self) -> list[tuple[float, float]]:
        """Maximal runs of accepted cells as (start, end) in label units."""
        acc = np.concatenate([[False], self.accepted.astype(bool), [False]])
        edges = np.flatnonzero(acc[1:] != acc[:-1])
        pts, half = self.grid.points, self.grid.spacing / 2.0
        return [(float(pts[a] - half), float(pts[b - 1] + half)) for a, b in zip(edges[::2], edges[1::2])]


def interval_sets(model: QuantileModel, result: CalibrationResult, x, grid: GridSpec) -> list[PredictionSet]:
    """Sets from the reference interval applied directly to raw (x, y)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo, hi = reference_interval(model, x, result)
    pts = grid.points
    acc = (pts[None, :] >= lo[:, None]) & (pts[None, :] <= hi[:, None])
    return [PredictionSet(grid, row, result.unbounded) for row in acc]


def transform_sets(flow: FlowParams, model: QuantileModel, result: CalibrationResult, x, etas,
                   grid: GridSpec, chunk_rows: int = 8192) -> list[PredictionSet]:
    """Pull the reference interval back through the flow, one set per row of x.

    Every candidate label is pushed forward jointly with its features, so the
    transformed features differ between candidates; each candidate is checked
    against the interval of its own transformed features. Candidates whose
    forward pass is non-finite are rejected and counted in ``failures``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if flow.joint_dim != d + 1:
        raise ShapeError(f"flow joint dim {flow.joint_dim} != feature dim {d} + 1")
    etas = np.asarray(etas, dtype=float)
    if etas.ndim <= 1:
        etas = np.broadcast_to(etas.reshape(1, -1), (n, flow.cond_dim))
    pts = grid.points
    g = pts.size
    accepted = np.zeros((n, g), dtype=bool)
    failures = np.zeros(n, dtype=int)
    per_chunk = max(1, chunk_rows // g)
    for start in range(0, n, per_chunk):
        stop = min(n, start + per_chunk)
        m = stop - start
        xy = np.empty((m * g, d + 1))
        xy[:, :d] = np.repeat(x[start:stop], g, axis=0)
        xy[:, d] = np.tile(pts, m)
        eta = np.repeat(etas[start:stop], g, axis=0)
        z, logdet = flow_forward_unchecked(flow, xy, eta)
        ok = np.all(np.isfinite(z), axis=1) & np.isfinite(logdet)
        acc = np.zeros(m * g, dtype=bool)
        if np.any(ok):
            lo, hi = reference_interval(model, z[ok, :d], result)
            acc[ok] = (z[ok, d] >= lo) & (z[ok, d] <= hi)
        accepted[start:stop] = acc.reshape(m, g)
        failures[start:stop] = (~ok).reshape(m, g).sum(axis=1)
    return [PredictionSet(grid, accepted[i], result.unbounded, int(failures[i])) for i in range(n)]


def transform_set(flow: FlowParams, model: QuantileModel, result: CalibrationResult, x, eta,
                  grid: GridSpec) -> PredictionSet:
    return transform_sets(flow, model, result, np.asarray(x, dtype=float).reshape(1, -1),
                          np.asarray(eta, dtype=float).reshape(1, -1), grid)[0]


def coverage_and_size(sets: Sequence[PredictionSet], y_true) -> tuple[float, float]:
    """Fraction of labels landing in an accepted cell, and mean set measure."""
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    if len(sets) == 0:
        raise ValueError("coverage_and_size needs at least one set")
    if len(sets) != y_true.size:
        raise ShapeError(f"{len(sets)} sets but {y_true.size} labels")
    covered = [s.contains(y) for s, y in zip(sets, y_true)]
    return float(np.mean(covered)), float(np.mean([s.measure for s in sets]))


SET_CSV_FIELDS = ("client_id", "point_id", "y_true", "measure", "covered", "accepted_intervals")


def write_sets_csv(path, rows: Iterable[tuple[int, int, float, PredictionSet]]) -> None:
    """CSV export; intervals are written as ``lo:hi`` pairs joined by ``;``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SET_CSV_FIELDS)
        for client_id, point_id, y, ps in rows:
            spans = ";".join(f"{a!r}:{b!r}" for a, b in ps.intervals())
            writer.writerow([client_id, point_id, repr(float(y)), repr(ps.measure), int(ps.contains(y)), spans])
