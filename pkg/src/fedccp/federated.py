"""In-process simulation of federated flow training.

Clients keep their datasets and conditioner parameters to themselves. The
server only ever sees :class:`ClientUpdate` messages (parameter delta, sample
count, scalar loss), and broadcasts a flat parameter vector back.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import NumericError, ProtocolError, TrainingError
from .flow import FlowParams, ReferenceSpec, flow_nll_and_grad, init_flow, load_flow, save_flow
from .numerics import AdamState, adam_step, substream

log = logging.getLogger(__name__)


@dataclass
class ClientSpec:
    """One client's private state.

    ``cond_mean``/``cond_std`` parameterize the conditioner distribution
    N(cond_mean, cond_std^2 I). Random streams are derived from ``seed`` and
    ``id`` so clients never share draws.
    """

    id: int
    train: Dataset
    calib: Dataset
    test: Dataset
    cond_mean: np.ndarray
    cond_std: float = 0.1
    seed: int = 0
    batch_rng: np.random.Generator = field(init=False, repr=False)
    cond_rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.cond_mean = np.asarray(self.cond_mean, dtype=float).reshape(-1)
        if not self.cond_std > 0:
            raise ValueError("cond_std must be positive")
        self.reset_streams()

    def reset_streams(self) -> None:
        self.batch_rng = substream(self.seed, "batching", self.id)
        self.cond_rng = substream(self.seed, "conditioner", self.id, 1)

    @property
    def cond_dim(self) -> int:
        return self.cond_mean.size

    @property
    def d(self) -> int:
        return self.train.d

    def draw_conditioners(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else self.cond_rng
        if self.cond_dim == 0:
            return np.zeros((n, 0))
        return self.cond_mean + self.cond_std * rng.standard_normal((n, self.cond_dim))

    def without_conditioner(self) -> "ClientSpec":
        """Same client for the no-conditioner ablation (cond_dim = 0)."""
        return ClientSpec(self.id, self.train, self.calib, self.test, np.zeros(0), self.cond_std, self.seed)


def make_cond_mean(seed: int, client_id: int, cond_dim: int) -> np.ndarray:
    """Seeded random unit-norm conditioner mean."""
    if cond_dim == 0:
        return np.zeros(0)
    v = substream(seed, "conditioner", client_id, 0).standard_normal(cond_dim)
    return v / np.linalg.norm(v)


def draw_conditioner(client: ClientSpec) -> np.ndarray:
    """One conditioner draw from the client's own stream."""
    return client.draw_conditioners(1)[0]


@dataclass
class FedConfig:
    rounds: int = 200
    local_steps: int = 5
    batch_size: int = 128
    lr: float = 2e-3
    clients_per_round: int | None = None  # None = all clients every round
    aggregation: str = "weighted-mean"
    seed: int = 0
    per_sample_conditioner: bool = True
    learn_cond_mean: bool = False
    n_layers: int = 6
    hidden: int = 64
    depth: int = 2
    scale_clamp: float = 4.0
    checkpoint_every: int = 0

    def validate(self, n_clients: int) -> None:
        if self.rounds < 0 or self.local_steps < 0:
            raise ValueError("rounds and local_steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.aggregation != "weighted-mean":
            raise ValueError(f"unsupported aggregation {self.aggregation!r}")
        if self.clients_per_round is not None and not 1 <= self.clients_per_round <= n_clients:
            raise ValueError(f"clients_per_round must lie in [1, {n_clients}]")


@dataclass
class ClientUpdate:
    """Everything a client sends to the server after local training."""

    client_id: int
    delta: np.ndarray
    sample_count: int
    mean_loss: float
    ok: bool = True

    def to_message(self) -> dict:
        return {"client_id": self.client_id, "delta": self.delta.tolist(),
                "sample_count": self.sample_count, "mean_loss": self.mean_loss, "ok": self.ok}


@dataclass
class RoundLog:
    round: int
    mean_loss: float
    grad_norm: float
    participants: list[int]
    failed: list[int] = field(default_factory=list)


@dataclass
class LocalTrainResult:
    offset: np.ndarray
    losses: list[float]
    cond_mean: np.ndarray


def train_flow(flow: FlowParams, xy: np.ndarray, ref: ReferenceSpec, steps: int, batch_size: int, lr: float,
               batch_rng: np.random.Generator, cond_rng: np.random.Generator, cond_mean: np.ndarray,
               cond_std: float, per_sample_conditioner: bool = True,
               learn_cond_mean: bool = False) -> LocalTrainResult:
    """Adam on the flow NLL starting from ``flow``.

    Parameters are held as ``anchor + offset`` with the anchor fixed to the
    starting point, so the returned offset is the exact update: adding it to
    the anchor reproduces the final parameters bit for bit.
    """
    anchor = flow.to_vector()
    offset = np.zeros_like(anchor)
    state = AdamState.zeros(anchor.size)
    mu = np.array(cond_mean, dtype=float)
    mu_state = AdamState.zeros(mu.size)
    n = xy.shape[0]
    bs = min(batch_size, n)
    c = mu.size
    losses = []
    for step in range(steps):
        idx = batch_rng.choice(n, bs, replace=False) if bs < n else np.arange(n)
        if per_sample_conditioner:
            noise = cond_rng.standard_normal((bs, c))
        else:
            noise = np.broadcast_to(cond_rng.standard_normal((1, c)), (bs, c))
        etas = mu + cond_std * noise
        current = flow.with_vector(anchor + offset)
        if learn_cond_mean and c:
            loss, grad, g_eta = flow_nll_and_grad(current, xy[idx], etas, ref, eta_grad=True)
            mu, mu_state = adam_step(mu, g_eta.sum(axis=0), mu_state, lr)
        else:
            loss, grad = flow_nll_and_grad(current, xy[idx], etas, ref)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at local step {step}", step=step)
        offset, state = adam_step(offset, grad, state, lr)
        losses.append(loss)
    return LocalTrainResult(offset, losses, mu)


def client_local_update(client: ClientSpec, flow: FlowParams, steps: int, batch_size: int, lr: float,
                        ref: ReferenceSpec, per_sample_conditioner: bool = True,
                        learn_cond_mean: bool = False) -> ClientUpdate:
    """Run ``steps`` local Adam steps on the flow NLL and report the delta.

    Every training row is paired with a fresh conditioner draw (or one draw
    per minibatch when ``per_sample_conditioner`` is false). The optimizer
    state lives only for this call. ``sample_count`` is the client's local
    training-set size, the federated-averaging weight.
    """
    n = client.train.n
    if steps == 0 or lr == 0:
        return ClientUpdate(client.id, np.zeros(flow.n_params), n, math.nan)
    try:
        result = train_flow(flow, client.train.xy, ref, steps, batch_size, lr, client.batch_rng, client.cond_rng,
                            client.cond_mean, client.cond_std, per_sample_conditioner, learn_cond_mean)
    except (TrainingError, NumericError) as exc:
        log.warning("client %d failed local update: %s", client.id, exc)
        return ClientUpdate(client.id, np.zeros(flow.n_params), n, math.nan, ok=False)
    if learn_cond_mean:
        client.cond_mean = result.cond_mean
    return ClientUpdate(client.id, result.offset, n, float(np.mean(result.losses)))


def server_aggregate(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-count weighted mean of client deltas, reduced in client-id order."""
    if not updates:
        raise ProtocolError("nothing to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shape = ordered[0].delta.shape
    for u in ordered:
        if u.delta.shape != shape:
            raise ProtocolError(f"client {u.client_id} sent delta of shape {u.delta.shape}, expected {shape}")
    total = sum(u.sample_count for u in ordered)
    if total <= 0:
        raise ProtocolError("aggregate weights sum to zero")
    out = np.zeros(shape)
    for u in ordered:
        out = out + (u.sample_count / total) * u.delta
    return out


def initial_flow(joint_dim: int, cond_dim: int, config: FedConfig) -> FlowParams:
    return init_flow(joint_dim, cond_dim, substream(config.seed, "init"), n_layers=config.n_layers,
                     hidden=config.hidden, depth=config.depth, scale_clamp=config.scale_clamp)


def fed_train(clients: Sequence[ClientSpec], config: FedConfig, ref: ReferenceSpec,
              flow: FlowParams | None = None, checkpoint_dir=None,
              transcript: list | None = None) -> tuple[FlowParams, list[RoundLog]]:
    """Federated averaging of local flow updates over ``config.rounds`` rounds.

    If ``transcript`` is given, every client-to-server message is appended to
    it in serialized form, which is what the privacy audit inspects.
    """
    if not clients:
        raise ProtocolError("federated training needs at least one client")
    config.validate(len(clients))
    cond_dims = {c.cond_dim for c in clients}
    if len(cond_dims) != 1:
        raise ProtocolError(f"clients disagree on conditioner dimension: {sorted(cond_dims)}")
    if flow is None:
        flow = initial_flow(clients[0].d + 1, cond_dims.pop(), config)
    by_id = {c.id: c for c in clients}
    ids = sorted(by_id)
    part_rng = substream(config.seed, "participation")
    params = flow.to_vector()
    logs: list[RoundLog] = []
    for r in range(config.rounds):
        if config.clients_per_round is None or config.clients_per_round == len(ids):
            chosen = ids
        else:
            chosen = sorted(int(i) for i in part_rng.choice(ids, config.clients_per_round, replace=False))
        broadcast = flow.with_vector(params)
        updates = [client_local_update(by_id[k], broadcast, config.local_steps, config.batch_size, config.lr, ref,
                                       config.per_sample_conditioner, config.learn_cond_mean) for k in chosen]
        if transcript is not None:
            transcript.extend(u.to_message() for u in updates)
        good = [u for u in updates if u.ok]
        failed = [u.client_id for u in updates if not u.ok]
        if not good:
            raise ProtocolError(f"every participating client failed in round {r}")
        delta = server_aggregate(good)
        params = params + delta
        losses = [u.mean_loss for u in good if math.isfinite(u.mean_loss)]
        logs.append(RoundLog(r, float(np.mean(losses)) if losses else math.nan,
                             float(np.linalg.norm(delta)), [u.client_id for u in good], failed))
        if checkpoint_dir and config.checkpoint_every and (r + 1) % config.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_flow(flow.with_vector(params), Path(checkpoint_dir) / f"flow_round{r + 1:05d}.json")
    return flow.with_vector(params), logs


def load_flow_checkpoints(checkpoint_dir) -> list[tuple[int, FlowParams]]:
    """All ``flow_roundNNNNN.json`` checkpoints in a directory, by round."""
    found = []
    for path in sorted(Path(checkpoint_dir).glob("flow_round*.json")):
        found.append((int(path.stem[len("flow_round"):]), load_flow(path)))
    return found


ROUND_LOG_FIELDS = ("round", "mean_loss", "grad_norm", "participants", "failed")


def write_round_log_csv(path, logs: Sequence[RoundLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUND_LOG_FIELDS)
        for entry in logs:
            writer.writerow([entry.round, repr(entry.mean_loss), repr(entry.grad_norm),
                             " ".join(map(str, entry.participants)), " ".join(map(str, entry.failed))])
