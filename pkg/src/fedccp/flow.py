"""Conditional affine-coupling flow between client space and a diagonal
Gaussian reference.

A flow acts on joint vectors ``v = (x, y)`` of length ``m = d + 1`` together
with a conditioner ``eta`` of length ``cond_dim`` (possibly zero). Each
coupling layer leaves the coordinates where ``mask`` is true untouched and
maps the rest as ``z_u * exp(s) + t``, where ``s`` and ``t`` are tanh MLPs of
``[z_masked, eta]``. The log-scale is squashed to ``clamp * tanh(raw / clamp)``.

Checkpoint format (``save_flow``/``load_flow``): a JSON object

    {"format": "fedccp-flow", "version": 1, "joint_dim": m, "cond_dim": c,
     "scale_clamp": 4.0, "config_hash": "<sha256 of the architecture>",
     "layers": [{"mask": [0/1, ...],
                 "scale_net": [[W0, b0], [W1, b1], ...],
                 "shift_net": [...]}, ...]}

with weights as nested lists of floats. Python's float repr is shortest
round-trip, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError
from .numerics import MlpParams, flatten, init_mlp, mlp_backward, mlp_forward_cached, unflatten

CHECKPOINT_FORMAT = "fedccp-flow"
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CouplingLayer:
    mask: np.ndarray  # bool, True = passed through unchanged
    scale_net: MlpParams
    shift_net: MlpParams
    scale_clamp: float = 4.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        n_keep = int(self.mask.sum())
        if n_keep == 0 or n_keep == self.mask.size:
            raise ShapeError("coupling mask needs at least one kept and one transformed coordinate")
        n_out = self.mask.size - n_keep
        for name, net in (("scale_net", self.scale_net), ("shift_net", self.shift_net)):
            if net.out_dim != n_out:
                raise ShapeError(f"{name} emits {net.out_dim} values, mask transforms {n_out}")
            if net.in_dim < n_keep:
                raise ShapeError(f"{name} takes {net.in_dim} inputs, mask keeps {n_keep}")
        if self.scale_net.in_dim != self.shift_net.in_dim:
            raise ShapeError("scale and shift nets must share an input width")

    @property
    def cond_dim(self) -> int:
        return self.scale_net.in_dim - int(self.mask.sum())


@dataclass
class FlowParams:
    layers: list[CouplingLayer]
    joint_dim: int
    cond_dim: int

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.mask.size != self.joint_dim or layer.cond_dim != self.cond_dim:
                raise ShapeError(f"layer {i} does not fit joint_dim={self.joint_dim}, "
                                 f"cond_dim={self.cond_dim}")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.scale_net.arrays())
            out.extend(layer.shift_net.arrays())
        return out

    def to_vector(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return flatten(self.arrays())

    def with_vector(self, vector: np.ndarray) -> "FlowParams":
        """Copy of this flow with parameters taken from a flat vector."""
        arrays = unflatten(np.asarray(vector, dtype=float), [a.shape for a in self.arrays()])
        layers, pos = [], 0
        for layer in self.layers:
            ns = len(layer.scale_net.layers) * 2
            nt = len(layer.shift_net.layers) * 2
            scale = MlpParams.from_arrays(arrays[pos:pos + ns])
            shift = MlpParams.from_arrays(arrays[pos + ns:pos + ns + nt])
            pos += ns + nt
            layers.append(CouplingLayer(layer.mask.copy(), scale, shift, layer.scale_clamp))
        return FlowParams(layers, self.joint_dim, self.cond_dim)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def architecture(self) -> dict:
        return {
            "joint_dim": self.joint_dim,
            "cond_dim": self.cond_dim,
            "layers": [
                {
                    "mask": layer.mask.astype(int).tolist(),
                    "scale_sizes": [layer.scale_net.in_dim] + [w.shape[1] for w, _ in layer.scale_net.layers],
                    "shift_sizes": [layer.shift_net.in_dim] + [w.shape[1] for w, _ in layer.shift_net.layers],
                    "scale_clamp": layer.scale_clamp,
                }
                for layer in self.layers
            ],
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class ReferenceSpec:
    """Zero-mean Gaussian with diagonal covariance ``diag(var)``."""

    var: tuple[float, ...]

    def __post_init__(self):
        if not self.var or any(not v > 0 for v in self.var):
            raise ValueError("reference variances must all be positive")

    @classmethod
    def standard(cls, dim: int) -> "ReferenceSpec":
        return cls(tuple([1.0] * dim))

    @property
    def dim(self) -> int:
        return len(self.var)

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.dim)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.var))

    def log_density(self, z: np.ndarray) -> np.ndarray:
        var = np.asarray(self.var)
        return -0.5 * ((z * z) / var + LOG_2PI + np.log(var)).sum(axis=-1)


def alternating_masks(joint_dim: int, n_layers: int) -> list[np.ndarray]:
    """Even/odd coordinate masks, flipping every layer.

    The first mask keeps even coordinates, so for ``(x, y)`` with ``d = 1``
    the first layer transforms the label conditioned on the feature.
    """
    if joint_dim < 2:
        raise ShapeError("coupling flows need joint_dim >= 2")
    even = np.arange(joint_dim) % 2 == 0
    return [even.copy() if i % 2 == 0 else ~even for i in range(n_layers)]


def init_flow(joint_dim: int, cond_dim: int, rng: np.random.Generator, n_layers: int = 6,
              hidden: int = 64, depth: int = 2, scale_clamp: float = 4.0) -> FlowParams:
    """Fresh flow; output layers are zero so the flow starts as the identity."""
    layers = []
    for mask in alternating_masks(joint_dim, n_layers):
        n_keep = int(mask.sum())
        sizes = [n_keep + cond_dim] + [hidden] * depth + [joint_dim - n_keep]
        scale = init_mlp(sizes, rng, zero_last=True)
        shift = init_mlp(sizes, rng, zero_last=True)
        layers.append(CouplingLayer(mask, scale, shift, scale_clamp))
    return FlowParams(layers, joint_dim, cond_dim)


# ---------------------------------------------------------------------------
# evaluation


def _batch(v, width: int, what: str) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    v2 = v.reshape(1, -1) if single else v
    if v2.ndim != 2 or v2.shape[1] != width:
        raise ShapeError(f"{what} must have width {width}, got shape {v.shape}")
    return v2, single


def _cond(eta, n: int, cond_dim: int) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.ndim <= 1:
        eta = eta.reshape(1, -1)
        if eta.shape[1] != cond_dim:
            raise ShapeError(f"conditioner must have length {cond_dim}, got {eta.shape[1]}")
        return np.broadcast_to(eta, (n, cond_dim))
    if eta.shape != (n, cond_dim):
        raise ShapeError(f"conditioner rows {eta.shape} do not match ({n}, {cond_dim})")
    return eta


def _net_input(layer: CouplingLayer, z: np.ndarray, eta: np.ndarray) -> np.ndarray:
    kept = z[:, layer.mask]
    return np.concatenate([kept, eta], axis=1) if eta.shape[1] else kept


def _coupling_fwd(layer: CouplingLayer, z, eta):
    inp = _net_input(layer, z, eta)
    raw, s_acts = mlp_forward_cached(layer.scale_net, inp)
    t, t_acts = mlp_forward_cached(layer.shift_net, inp)
    c = layer.scale_clamp
    th = np.tanh(raw / c)
    s = c * th
    es = np.exp(s)
    out = z.copy()
    zu = z[:, ~layer.mask]
    out[:, ~layer.mask] = zu * es + t
    cache = (s_acts, t_acts, th, es, zu)
    return out, s.sum(axis=1), cache


def _coupling_inv(layer: CouplingLayer, zp, eta):
    inp = _net_input(layer, zp, eta)
    raw, _ = mlp_forward_cached(layer.scale_net, inp)
    t, _ = mlp_forward_cached(layer.shift_net, inp)
    s = layer.scale_clamp * np.tanh(raw / layer.scale_clamp)
    out = zp.copy()
    out[:, ~layer.mask] = (zp[:, ~layer.mask] - t) * np.exp(-s)
    return out


def coupling_forward(layer: CouplingLayer, z, eta):
    """Apply one coupling layer; returns (z', log|det J|)."""
    z2, single = _batch(z, layer.mask.size, "z")
    out, logdet, _ = _coupling_fwd(layer, z2, _cond(eta, z2.shape[0], layer.cond_dim))
    if not (np.all(np.isfinite(out)) and np.all(np.isfinite(logdet))):
        raise NumericError("non-finite output in coupling layer 0", layer=0)
    return (out[0], float(logdet[0])) if single else (out, logdet)


def coupling_inverse(layer: CouplingLayer, zp, eta):
    z2, single = _batch(zp, layer.mask.size, "z'")
    out = _coupling_inv(layer, z2, _cond(eta, z2.shape[0], layer.cond_dim))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite output in inverse coupling layer 0", layer=0)
    return out[0] if single else out


def flow_forward_unchecked(flow: FlowParams, xy: np.ndarray, eta) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass that lets non-finite rows through.

    Callers that must survive bad rows (set pullback) filter them themselves.
    """
    z, _ = _batch(xy, flow.joint_dim, "xy")
    eta = _cond(eta, z.shape[0], flow.cond_dim)
    logdet = np.zeros(z.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in flow.layers:
            z, ld, _ = _coupling_fwd(layer, z, eta)
            logdet = logdet + ld
    return z, logdet


def flow_forward(flow: FlowParams, xy, eta):
    """f(x, y; eta) -> (xy_tilde, logdet), single vector or batch of rows."""
    z, single = _batch(xy, flow.joint_dim, "xy")
    eta = _cond(eta, z.shape[0], flow.cond_dim)
    logdet = np.zeros(z.shape[0])
    for i, layer in enumerate(flow.layers):
        z, ld, _ = _coupling_fwd(layer, z, eta)
        logdet = logdet + ld
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(logdet))):
            raise NumericError(f"non-finite output in coupling layer {i}", layer=i)
    return (z[0], float(logdet[0])) if single else (z, logdet)


def flow_inverse(flow: FlowParams, xy_tilde, eta):
    """g(x~, y~; eta), the exact inverse of :func:`flow_forward`."""
    z, single = _batch(xy_tilde, flow.joint_dim, "xy_tilde")
    eta = _cond(eta, z.shape[0], flow.cond_dim)
    for i in range(len(flow.layers) - 1, -1, -1):
        z = _coupling_inv(flow.layers[i], z, eta)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite output in inverse coupling layer {i}", layer=i)
    return z[0] if single else z


# ---------------------------------------------------------------------------
# likelihood objective


def flow_nll(flow: FlowParams, batch, etas, ref: ReferenceSpec) -> float:
    """Mean of -log N(f(v; eta); 0, diag var) - log|det df/dv| over rows."""
    z, logdet = flow_forward(flow, np.atleast_2d(batch), etas)
    if ref.dim != flow.joint_dim:
        raise ShapeError(f"reference dim {ref.dim} != flow joint dim {flow.joint_dim}")
    loss = float(np.mean(-ref.log_density(z) - logdet))
    if not math.isfinite(loss):
        raise NumericError("non-finite negative log-likelihood")
    return loss


def flow_nll_and_grad(flow: FlowParams, batch, etas, ref: ReferenceSpec, eta_grad: bool = False):
    """Loss and its exact gradient, flattened in ``flow.to_vector()`` order.

    With ``eta_grad`` a third value is returned: the per-row gradient of the
    loss with respect to the conditioner, shape (n, cond_dim).
    """
    z, _ = _batch(np.atleast_2d(batch), flow.joint_dim, "batch")
    n = z.shape[0]
    eta = _cond(etas, n, flow.cond_dim)
    if ref.dim != flow.joint_dim:
        raise ShapeError(f"reference dim {ref.dim} != flow joint dim {flow.joint_dim}")

    caches, inputs = [], []
    logdet = np.zeros(n)
    for i, layer in enumerate(flow.layers):
        inputs.append(z)
        z, ld, cache = _coupling_fwd(layer, z, eta)
        logdet = logdet + ld
        caches.append(cache)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite output in coupling layer {i}", layer=i)
    loss = float(np.mean(-ref.log_density(z) - logdet))
    if not math.isfinite(loss):
        raise NumericError("non-finite negative log-likelihood")

    var = np.asarray(ref.var)
    g = z / var / n
    g_logdet = -1.0 / n
    g_eta = np.zeros((n, flow.cond_dim))
    grads_rev = []
    for i in range(len(flow.layers) - 1, -1, -1):
        layer = flow.layers[i]
        s_acts, t_acts, th, es, zu = caches[i]
        gu = g[:, ~layer.mask]
        g_s = gu * zu * es + g_logdet
        g_raw = g_s * (1.0 - th * th)
        gs_params, g_in_s = mlp_backward(layer.scale_net, s_acts, g_raw)
        gt_params, g_in_t = mlp_backward(layer.shift_net, t_acts, gu)
        g_in = g_in_s + g_in_t
        g_prev = np.empty_like(g)
        g_prev[:, ~layer.mask] = gu * es
        n_keep = int(layer.mask.sum())
        g_prev[:, layer.mask] = g[:, layer.mask] + g_in[:, :n_keep]
        g_eta += g_in[:, n_keep:]
        g = g_prev
        grads_rev.append(gs_params.arrays() + gt_params.arrays())
    arrays = [a for block in reversed(grads_rev) for a in block]
    grad = flatten(arrays) if arrays else np.zeros(0)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite flow gradient")
    if eta_grad:
        return loss, grad, g_eta
    return loss, grad


def flow_nll_grad(flow: FlowParams, batch, etas, ref: ReferenceSpec) -> np.ndarray:
    return flow_nll_and_grad(flow, batch, etas, ref)[1]


# ---------------------------------------------------------------------------
# checkpoints


def flow_to_dict(flow: FlowParams) -> dict:
    def net(p: MlpParams):
        return [[w.tolist(), b.tolist()] for w, b in p.layers]

    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "joint_dim": flow.joint_dim,
        "cond_dim": flow.cond_dim,
        "config_hash": flow.config_hash(),
        "layers": [
            {
                "mask": layer.mask.astype(int).tolist(),
                "scale_clamp": layer.scale_clamp,
                "scale_net": net(layer.scale_net),
                "shift_net": net(layer.shift_net),
            }
            for layer in flow.layers
        ],
    }


def flow_from_dict(payload: dict) -> FlowParams:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a flow checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported flow checkpoint version {payload.get('version')}")

    def net(rows):
        return MlpParams([(np.array(w, dtype=float).reshape(len(w), -1), np.array(b, dtype=float))
                          for w, b in rows])

    layers = [
        CouplingLayer(np.array(entry["mask"], dtype=bool), net(entry["scale_net"]),
                      net(entry["shift_net"]), float(entry["scale_clamp"]))
        for entry in payload["layers"]
    ]
    flow = FlowParams(layers, int(payload["joint_dim"]), int(payload["cond_dim"]))
    if flow.config_hash() != payload.get("config_hash"):
        raise ValueError("flow checkpoint config hash mismatch")
    return flow


def save_flow(flow: FlowParams, path) -> None:
    Path(path).write_text(json.dumps(flow_to_dict(flow)))


def load_flow(path) -> FlowParams:
    return flow_from_dict(json.loads(Path(path).read_text()))
