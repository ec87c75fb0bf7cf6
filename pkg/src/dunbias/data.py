"""UCI regression datasets, splits, standardisation and pool bookkeeping."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import AcquisitionTrace, TraceRecord

log = logging.getLogger(__name__)

DATA_DIR_ENV = "DUNBIAS_DATA_DIR"


class DataError(ValueError):
    pass


class PoolStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    rows: int
    input_dim: int
    init_train_size: int
    n_queries: int
    query_size: int
    filename: str


# rows, input dims and active-learning schedule per dataset
DATASET_SPECS: dict[str, DatasetSpec] = {
    s.name: s
    for s in [
        DatasetSpec("boston", 506, 13, 20, 17, 20, "boston.csv"),
        DatasetSpec("concrete", 1030, 8, 50, 30, 20, "concrete.csv"),
        DatasetSpec("energy", 768, 8, 50, 30, 20, "energy.csv"),
        DatasetSpec("kin8nm", 8192, 8, 50, 30, 20, "kin8nm.csv"),
        DatasetSpec("naval", 11934, 16, 50, 30, 20, "naval.csv"),
        DatasetSpec("power", 9568, 4, 50, 30, 20, "power.csv"),
        DatasetSpec("protein", 45730, 9, 50, 30, 20, "protein.csv"),
        DatasetSpec("wine", 1599, 11, 50, 30, 20, "wine.csv"),
        DatasetSpec("yacht", 308, 6, 20, 20, 10, "yacht.csv"),
    ]
}


def default_data_dir() -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    targets: np.ndarray

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


def file_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load(name: str, path: str | Path | None = None) -> Dataset:
    """Read a headerless numeric CSV whose last column is the target.

    Known dataset names are checked against their expected row and column
    counts.  Constant feature columns are dropped with a warning.
    """
    spec = DATASET_SPECS.get(name)
    if path is None:
        if spec is None:
            raise DataError(f"{name}: unknown dataset and no path given")
        path = default_data_dir() / spec.filename
    path = Path(path)
    if not path.exists():
        raise DataError(f"{name}: file not found at {path}")
    try:
        raw = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{name}: could not parse {path}: {exc}") from exc
    if raw.shape[1] < 2:
        raise DataError(f"{name}: need at least one feature column and a target")
    if not np.all(np.isfinite(raw)):
        raise DataError(f"{name}: missing or non-finite values in {path}")
    if spec is not None and raw.shape != (spec.rows, spec.input_dim + 1):
        raise DataError(
            f"{name}: expected {spec.rows} rows x {spec.input_dim} inputs, "
            f"found {raw.shape[0]} rows x {raw.shape[1] - 1} inputs"
        )
    x, y = raw[:, :-1], raw[:, -1]
    const = np.flatnonzero(x.std(axis=0) == 0)
    if const.size:
        log.warning("%s: dropping constant feature columns %s", name, const.tolist())
        x = np.delete(x, const, axis=1)
    return Dataset(name=name, features=x, targets=y)


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> "Standardizer":
        y_std = float(y.std())
        if y_std == 0:
            raise DataError("zero-variance target on the training pool")
        x_std = x.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        return cls(x.mean(axis=0), x_std, float(y.mean()), y_std)

    def transform_x(self, x):
        return (x - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (y - self.y_mean) / self.y_std

    def inverse_x(self, x):
        return x * self.x_std + self.x_mean

    def inverse_y(self, y):
        return y * self.y_std + self.y_mean


@dataclass
class PoolState:
    """Index bookkeeping for one active-learning run.

    ``train`` and ``pool`` together always hold the original training pool of
    size ``pool_size``; ``trace`` records every acquisition in order.
    """

    train: list[int]
    pool: list[int]
    val: list[int]
    test: list[int]
    pool_size: int
    trace: AcquisitionTrace = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.trace is None:
            self.trace = AcquisitionTrace(self.pool_size)

    @property
    def m(self) -> int:
        """Number of acquisitions so far (the global draw counter)."""
        return len(self.trace)

    @property
    def train_pool(self) -> list[int]:
        return sorted(self.train + self.pool)

    def copy(self) -> "PoolState":
        return PoolState(
            list(self.train),
            list(self.pool),
            list(self.val),
            list(self.test),
            self.pool_size,
            AcquisitionTrace(self.pool_size, list(self.trace.records)),
        )

    def check_partition(self, n: int) -> None:
        everything = self.train + self.pool + self.val + self.test
        if sorted(everything) != list(range(n)):
            raise PoolStateError("index sets do not partition the dataset")
        if len(self.train) + len(self.pool) != self.pool_size:
            raise PoolStateError("train + pool size changed")


def split(dataset: Dataset, seed: int) -> PoolState:
    """Seeded 80/10/10 shuffle into training pool, validation and test."""
    n = dataset.n
    if n < 10:
        raise DataError(f"{dataset.name}: need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_pool, n_val = int(np.floor(0.8 * n)), int(np.floor(0.1 * n))
    pool = perm[:n_pool].tolist()
    val = perm[n_pool:n_pool + n_val].tolist()
    test = perm[n_pool + n_val:].tolist()
    return PoolState(train=[], pool=pool, val=val, test=test, pool_size=n_pool)


@dataclass
class StandardizedViews:
    x: np.ndarray
    y: np.ndarray
    scaler: Standardizer

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.x[idx], self.y[idx]


def standardize(state: PoolState, dataset: Dataset) -> StandardizedViews:
    """Fit statistics on the whole training pool and apply them to every row."""
    pool_idx = state.train_pool
    if not pool_idx:
        raise DataError("empty training pool")
    scaler = Standardizer.fit(dataset.features[pool_idx], dataset.targets[pool_idx])
    return StandardizedViews(scaler.transform_x(dataset.features), scaler.transform_y(dataset.targets), scaler)


def acquire(state: PoolState, indices, records: list[TraceRecord]) -> PoolState:
    """Move ``indices`` from pool to train in order and append their trace records."""
    indices = [int(i) for i in indices]
    if len(records) != len(indices):
        raise PoolStateError("one trace record per acquired index required")
    pool_set = set(state.pool)
    for i, rec in zip(indices, records):
        if i not in pool_set:
            raise PoolStateError(f"index {i} is not in the pool")
        if rec.index != i:
            raise PoolStateError("trace record does not match acquired index")
        pool_set.discard(i)
    state.trace.extend(records)
    state.train.extend(indices)
    chosen = set(indices)
    state.pool = [i for i in state.pool if i not in chosen]
    return state


@dataclass
class ManifestEntry:
    name: str
    file: str
    rows: int
    dims: int
    sha256: str | None = None


@dataclass
class ValidationReport:
    results: list[tuple[str, bool, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.results)

    def lines(self) -> list[str]:
        return [f"{'PASS' if ok else 'FAIL'} {name}: {msg}" for name, ok, msg in self.results]


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    doc = json.loads(Path(path).read_text())
    return [ManifestEntry(**entry) for entry in doc["datasets"]]


def validate_data(manifest_path: str | Path, names: list[str] | None = None) -> ValidationReport:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    report = ValidationReport()
    for entry in read_manifest(manifest_path):
        if names and entry.name not in names:
            continue
        path = base / entry.file
        if not path.exists():
            report.results.append((entry.name, False, f"missing file {path}"))
            continue
        try:
            raw = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            report.results.append((entry.name, False, f"unparseable {path}: {exc}"))
            continue
        rows, dims = raw.shape[0], raw.shape[1] - 1
        if (rows, dims) != (entry.rows, entry.dims):
            report.results.append(
                (entry.name, False, f"expected ({entry.rows}, {entry.dims}), found ({rows}, {dims}) in {path}")
            )
            continue
        if entry.sha256 and file_checksum(path) != entry.sha256:
            report.results.append((entry.name, False, f"checksum mismatch for {path}"))
            continue
        report.results.append((entry.name, True, f"({rows}, {dims})"))
    return report
