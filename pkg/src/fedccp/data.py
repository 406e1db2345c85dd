"""Synthetic multi-client scenarios, CSV ingestion, standardization and splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .errors import ConfigError, IngestionError
from .numerics import substream

log = logging.getLogger(__name__)

RESPONSES = ("linear", "sinusoidal", "piecewise")
NOISES = ("gaussian", "laplace")
PROFILES = ("abs", "bump")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: float | None = None
    y_std: float | None = None
    dropped: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.size:
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} row counts differ")
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(self.x.shape[1])]

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx])

    def fit_stats(self) -> "Dataset":
        """Record per-column mean/std of this dataset (zero std mapped to 1)."""
        xs = self.x.std(axis=0)
        ys = float(self.y.std())
        return replace(self, x_mean=self.x.mean(axis=0), x_std=np.where(xs > 0, xs, 1.0),
                       y_mean=float(self.y.mean()), y_std=ys if ys > 0 else 1.0)

    def standardized(self, stats: "Dataset | None" = None) -> "Dataset":
        """Standardize with ``stats``' recorded moments, or with this dataset's own."""
        src = stats if stats is not None else self.fit_stats()
        if src.x_mean is None:
            src = src.fit_stats()
        return replace(self, x=(self.x - src.x_mean) / src.x_std, y=(self.y - src.y_mean) / src.y_std,
                       x_mean=src.x_mean, x_std=src.x_std, y_mean=src.y_mean, y_std=src.y_std)


def split(ds: Dataset, fractions: Sequence[float], rng: np.random.Generator):
    """Seeded shuffle, then partition into (train, calib, test)."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    perm = rng.permutation(ds.n)
    n_train = int(round(ds.n * fractions[0]))
    n_calib = int(round(ds.n * fractions[1]))
    parts = perm[:n_train], perm[n_train:n_train + n_calib], perm[n_train + n_calib:]
    if any(p.size == 0 for p in parts):
        raise ValueError(f"split of {ds.n} rows by {fractions} leaves an empty part")
    return tuple(ds.subset(p) for p in parts)


def standardize_splits(train: Dataset, calib: Dataset, test: Dataset):
    """Standardize all three splits with statistics of the training split."""
    fitted = train.fit_stats()
    return fitted.standardized(fitted), calib.standardized(fitted), test.standardized(fitted)


# ---------------------------------------------------------------------------
# synthetic scenarios


@dataclass
class ClientRecipe:
    """How one client draws (x, y).

    x ~ N(shift, scale^2 I); y = response(x_1) + sigma(x) * eps with eps
    unit-variance ``noise`` and sigma(x) = noise_scale + hetero * p(x_1),
    where the profile p is |x_1| ("abs") or exp(-x_1^2) ("bump").
    """

    shift: float | list[float] = 0.0
    scale: float = 1.0
    response: str = "linear"
    response_coef: float = 1.0
    noise: str = "gaussian"
    noise_scale: float = 0.3
    hetero: float = 0.0
    hetero_profile: str = "abs"


@dataclass
class ScenarioSpec:
    name: str
    d: int
    clients: list[ClientRecipe]
    n_train: int = 1000
    n_calib: int = 500
    n_test: int = 500
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.clients)

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError("scenario needs d >= 1")
        if self.K < 1:
            raise ConfigError("scenario needs at least one client")
        if min(self.n_train, self.n_calib, self.n_test) < 1:
            raise ConfigError("scenario split sizes must be >= 1")
        for k, r in enumerate(self.clients):
            if r.response not in RESPONSES:
                raise ConfigError(f"client {k}: unknown response {r.response!r}")
            if r.noise not in NOISES:
                raise ConfigError(f"client {k}: unknown noise model {r.noise!r}")
            if r.hetero_profile not in PROFILES:
                raise ConfigError(f"client {k}: unknown heteroscedastic profile {r.hetero_profile!r}")
            if r.scale < 0 or r.noise_scale < 0 or r.hetero < 0:
                raise ConfigError(f"client {k}: scales must be non-negative")
            if isinstance(r.shift, list) and len(r.shift) != self.d:
                raise ConfigError(f"client {k}: shift has {len(r.shift)} entries, d = {self.d}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ScenarioSpec":
        payload = dict(payload)
        payload["clients"] = [ClientRecipe(**c) for c in payload.get("clients", [])]
        try:
            spec = cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"bad scenario config: {exc}") from exc
        spec.validate()
        return spec


def response_value(recipe: ClientRecipe, x1: np.ndarray) -> np.ndarray:
    a = recipe.response_coef
    if recipe.response == "linear":
        return a * x1
    if recipe.response == "sinusoidal":
        return a * np.sin(2.0 * x1)
    if recipe.response == "piecewise":
        return a * (np.abs(x1) - 1.0)
    raise ConfigError(f"unknown response {recipe.response!r}")


def noise_profile(recipe: ClientRecipe, x1: np.ndarray) -> np.ndarray:
    if recipe.hetero_profile == "abs":
        return np.abs(x1)
    if recipe.hetero_profile == "bump":
        return np.exp(-x1 * x1)
    raise ConfigError(f"unknown heteroscedastic profile {recipe.hetero_profile!r}")


def _noise(recipe: ClientRecipe, rng: np.random.Generator, n: int) -> np.ndarray:
    if recipe.noise == "gaussian":
        return rng.standard_normal(n)
    if recipe.noise == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), n)
    raise ConfigError(f"unknown noise model {recipe.noise!r}")


def sample_client(recipe: ClientRecipe, d: int, n: int, rng: np.random.Generator) -> Dataset:
    shift = np.broadcast_to(np.asarray(recipe.shift, dtype=float), (d,))
    x = shift + recipe.scale * rng.standard_normal((n, d))
    sigma = recipe.noise_scale + recipe.hetero * noise_profile(recipe, x[:, 0])
    y = response_value(recipe, x[:, 0]) + sigma * _noise(recipe, rng, n)
    return Dataset(x, y)


def generate_client_splits(spec: ScenarioSpec) -> list[tuple[Dataset, Dataset, Dataset]]:
    """Raw (unstandardized) train/calib/test splits for every client."""
    spec.validate()
    out = []
    for k, recipe in enumerate(spec.clients):
        rng = substream(spec.seed, "data", k)
        full = sample_client(recipe, spec.d, spec.n_train + spec.n_calib + spec.n_test, rng)
        a, b = spec.n_train, spec.n_train + spec.n_calib
        out.append((full.subset(slice(0, a)), full.subset(slice(a, b)), full.subset(slice(b, None))))
    return out


def builtin_scenario(name: str, K: int = 4, d: int = 1, n_train: int = 1000, n_calib: int = 500,
                     n_test: int = 500, seed: int = 0) -> ScenarioSpec:
    """Named scenarios.

    homogeneous: every client draws from the same law.
    covariate-shift: feature means spread over [-1.5, 1.5], shared sinusoidal response.
    response-shift: shared features, response shape differs per client; two
        clients share an increasing trend, one is sinusoidal and one runs
        against the trend, so a pooled band sits badly on the minority.
    heteroscedastic-shift: shared features and mean; noise grows away from the
        origin for some clients and peaks at it for others.
    """
    ks = range(K)
    if name == "homogeneous":
        clients = [ClientRecipe(response="sinusoidal", noise_scale=0.3, hetero=0.2) for _ in ks]
    elif name == "covariate-shift":
        shifts = np.linspace(-1.5, 1.5, K) if K > 1 else [0.0]
        clients = [ClientRecipe(shift=float(s), response="sinusoidal", noise_scale=0.3) for s in shifts]
    elif name == "response-shift":
        shapes = [("linear", 1.0), ("linear", 1.0), ("sinusoidal", 1.5), ("linear", -1.0)]
        clients = [ClientRecipe(response=shapes[k % 4][0], response_coef=shapes[k % 4][1], noise_scale=0.25)
                   for k in ks]
    elif name == "heteroscedastic-shift":
        profiles = [(0.05, 1.0, "abs"), (0.05, 1.5, "bump"), (0.05, 0.5, "abs"), (0.05, 0.75, "bump")]
        clients = [ClientRecipe(response="sinusoidal", noise_scale=p[0], hetero=p[1], hetero_profile=p[2])
                   for p in (profiles[k % 4] for k in ks)]
    else:
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    return ScenarioSpec(name, d, clients, n_train, n_calib, n_test, seed)


SCENARIOS = ("homogeneous", "covariate-shift", "response-shift", "heteroscedastic-shift")


def read_yaml(path):
    try:
        return yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def load_scenario_file(path) -> ScenarioSpec:
    payload = read_yaml(path)
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: scenario config must be a mapping")
    return ScenarioSpec.from_dict(payload)


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class CsvSchema:
    """Column roles of a tabular dataset.

    ``client_column`` (optional) names the column whose values partition rows
    into federated clients; ``path`` may be given relative to the schema file.
    """

    features: list[str]
    target: str
    delimiter: str = ","
    header: bool = True
    client_column: str | None = None
    path: str | None = None

    @classmethod
    def from_file(cls, path) -> "CsvSchema":
        payload = read_yaml(path)
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: schema must be a mapping")
        try:
            schema = cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"{path}: bad schema: {exc}") from exc
        if schema.path and not Path(schema.path).is_absolute():
            schema.path = str(Path(path).parent / schema.path)
        return schema


def _read_table(path, schema: CsvSchema) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    if not rows:
        raise IngestionError(f"{path}: file is empty")
    if schema.header:
        return [c.strip() for c in rows[0]], rows[1:]
    return [str(i) for i in range(len(rows[0]))], rows


def _parse(cell: str) -> float:
    try:
        return float(cell)
    except (TypeError, ValueError):
        return math.nan


def load_csv_rows(path, schema: CsvSchema) -> tuple[Dataset, list[str] | None]:
    """Parse a CSV into raw features/target, plus client labels if configured.

    Rows whose target is missing or non-numeric are dropped and counted;
    a row with a non-numeric feature is dropped as well.
    """
    header, rows = _read_table(path, schema)
    wanted = list(schema.features) + [schema.target]
    if schema.client_column:
        wanted.append(schema.client_column)
    for col in wanted:
        if col not in header:
            raise IngestionError(f"{path}: missing column {col!r}")
    fidx = [header.index(c) for c in schema.features]
    tidx = header.index(schema.target)
    cidx = header.index(schema.client_column) if schema.client_column else None
    xs, ys, clients, dropped = [], [], [], 0
    for row in rows:
        if not row or all(not c.strip() for c in row):
            continue
        y = _parse(row[tidx]) if tidx < len(row) else math.nan
        x = [_parse(row[i]) if i < len(row) else math.nan for i in fidx]
        if not math.isfinite(y) or not all(math.isfinite(v) for v in x):
            dropped += 1
            continue
        xs.append(x)
        ys.append(y)
        if cidx is not None:
            clients.append(row[cidx].strip())
    if not ys:
        raise IngestionError(f"{path}: no usable rows")
    if dropped:
        log.warning("%s: dropped %d rows with missing or non-numeric values", path, dropped)
    ds = Dataset(np.array(xs, dtype=float).reshape(len(ys), len(fidx)), np.array(ys), list(schema.features),
                 dropped=dropped)
    return ds, (clients if cidx is not None else None)


def load_csv(path, schema: CsvSchema, standardize: bool = True) -> Dataset:
    """Load a CSV; features and target standardized with this file's moments."""
    ds, _ = load_csv_rows(path, schema)
    return ds.standardized() if standardize else ds


def clients_from_splits(splits, seed: int, cond_dim: int = 4, cond_std: float = 0.1):
    """Wrap raw per-client splits as ClientSpecs, standardized on each client's train split."""
    from .federated import ClientSpec, make_cond_mean

    clients = []
    for k, (train, calib, test) in enumerate(splits):
        train, calib, test = standardize_splits(train, calib, test)
        clients.append(ClientSpec(k, train, calib, test, make_cond_mean(seed, k, cond_dim), cond_std, seed))
    return clients


def generate_scenario(spec: ScenarioSpec, cond_dim: int = 4, cond_std: float = 0.1):
    """Client list for a scenario; deterministic given ``spec.seed``."""
    return clients_from_splits(generate_client_splits(spec), spec.seed, cond_dim, cond_std)


def clients_from_csv(schema: CsvSchema, fractions=(0.6, 0.2, 0.2), seed: int = 0, cond_dim: int = 4,
                     cond_std: float = 0.1, path=None):
    """Partition a CSV into clients by ``schema.client_column`` and split each."""
    source = path or schema.path
    if not source:
        raise ConfigError("schema has no data path")
    ds, labels = load_csv_rows(source, schema)
    if labels is None:
        groups = {"all": np.arange(ds.n)}
    else:
        groups = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
    splits = []
    for k, key in enumerate(sorted(groups)):
        part = ds.subset(np.asarray(groups[key]))
        splits.append(split(part, fractions, substream(seed, "split", k)))
    return clients_from_splits(splits, seed, cond_dim, cond_std)
