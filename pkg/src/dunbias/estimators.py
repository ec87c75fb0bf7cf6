"""Risk estimators for actively sampled data and bias/variance diagnostics.

``r`` is the plain mean loss over a full set, ``r_tilde`` the mean over the
actively acquired points, and ``r_lure`` the levelled unbiased estimator that
reweights each acquired loss by ``v_m``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class SupportError(ValueError):
    """A recorded acquisition probability is outside (0, 1]."""


@dataclass(frozen=True)
class TraceRecord:
    m: int
    index: int
    alpha: float


@dataclass
class AcquisitionTrace:
    """Ordered acquisitions with the probability each had at draw time."""

    pool_size: int
    records: list[TraceRecord] = field(default_factory=list)

    def __post_init__(self):
        self.records = list(self.records)
        self.validate()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def indices(self) -> list[int]:
        return [r.index for r in self.records]

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records], dtype=np.float64)

    @property
    def positions(self) -> np.ndarray:
        return np.array([r.m for r in self.records], dtype=np.int64)

    def extend(self, records: Iterable[TraceRecord]) -> None:
        for r in records:
            self.append(r)

    def append(self, record: TraceRecord) -> None:
        expected = len(self.records) + 1
        if record.m != expected:
            raise ValueError(f"trace position {record.m} out of order, expected {expected}")
        if not 0.0 < record.alpha <= 1.0:
            raise SupportError(f"alpha {record.alpha!r} outside (0, 1] at m={record.m}")
        if expected > self.pool_size:
            raise ValueError("trace longer than pool")
        if any(r.index == record.index for r in self.records):
            raise ValueError(f"index {record.index} acquired twice")
        self.records.append(record)

    def validate(self) -> None:
        if len(self.records) > self.pool_size:
            raise ValueError("trace longer than pool")
        if len(set(self.indices)) != len(self.records):
            raise ValueError("trace indices are not distinct")
        for pos, r in enumerate(self.records, start=1):
            if r.m != pos:
                raise ValueError(f"trace position {r.m} at slot {pos}")
            if not 0.0 < r.alpha <= 1.0:
                raise SupportError(f"alpha {r.alpha!r} outside (0, 1] at m={r.m}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "pool_index", "alpha"])
        for r in self.records:
            w.writerow([r.m, r.index, format(r.alpha, ".17g")])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, pool_size: int) -> "AcquisitionTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        trace = cls(pool_size=pool_size)
        for row in rows:
            trace.append(TraceRecord(int(row["m"]), int(row["pool_index"]), float(row["alpha"])))
        return trace


def empirical_risk(losses) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empirical risk of an empty set")
    return float(losses.mean())


def _aligned(losses, trace: AcquisitionTrace) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (len(trace),):
        raise ValueError(f"{losses.shape[0] if losses.ndim else 0} losses for a trace of length {len(trace)}")
    return losses


def r_tilde(losses_at_trace, trace: AcquisitionTrace | None = None) -> float:
    losses = np.asarray(losses_at_trace, dtype=np.float64)
    if trace is not None:
        losses = _aligned(losses, trace)
    if losses.size == 0:
        raise ValueError("no acquired losses")
    return float(losses.sum() / losses.size)


def lure_weights_from(alphas, positions, pool_size: int) -> np.ndarray:
    """``v_m = 1 + (N-M)/(N-m) * (1/((N-m+1) alpha_m) - 1)`` for each position m."""
    alphas = np.asarray(alphas, dtype=np.float64)
    m = np.asarray(positions, dtype=np.float64)
    n_pool, n_acq = float(pool_size), float(len(alphas))
    if np.any(alphas <= 0.0):
        raise SupportError("acquisition probability must be positive")
    if n_acq == n_pool:
        # numerator N - M vanishes; m = N would otherwise give 0/0
        return np.ones_like(alphas)
    remaining = n_pool - m + 1.0
    excess = 1.0 / (remaining * alphas) - 1.0
    # exact uniform draws get weight exactly 1 (k * (1/k) is not always 1.0 in floating point)
    excess = np.where(alphas == 1.0 / remaining, 0.0, excess)
    return 1.0 + (n_pool - n_acq) / (n_pool - m) * excess


def lure_weights(trace: AcquisitionTrace) -> np.ndarray:
    return lure_weights_from(trace.alphas, trace.positions, trace.pool_size)


def r_lure(losses_at_trace, trace: AcquisitionTrace) -> float:
    losses = _aligned(losses_at_trace, trace)
    v = lure_weights(trace)
    return float((v * losses).sum() / len(trace))


def ofb_bias(r_test: float, r_lure_train: float) -> float:
    """Overfitting bias: held-out risk minus bias-corrected training risk."""
    return float(r_test - r_lure_train)


@dataclass
class BiasEstimate:
    bias_r_tilde: float
    bias_r_lure: float
    se_r_tilde: float
    se_r_lure: float
    var_r_tilde: float
    var_r_lure: float
    n_repeats: int


TraceSampler = Callable[[int, np.random.Generator], AcquisitionTrace]


def _repeat_estimates(losses, sampler: TraceSampler, m: int, n_repeats: int, rng) -> tuple[np.ndarray, np.ndarray]:
    losses = np.asarray(losses, dtype=np.float64)
    if m > losses.size:
        raise ValueError(f"M={m} exceeds evaluation set of size {losses.size}")
    rt = np.empty(n_repeats)
    rl = np.empty(n_repeats)
    for k in range(n_repeats):
        trace = sampler(m, rng)
        acquired = losses[trace.indices]
        rt[k] = r_tilde(acquired)
        rl[k] = r_lure(acquired, trace)
    return rt, rl


def alb_bias(losses, sampler: TraceSampler, m: int, n_repeats: int, rng: np.random.Generator) -> BiasEstimate:
    """Active-learning bias ``r - E[estimator]`` by Monte Carlo over trace draws.

    ``losses`` are the frozen model's per-example losses on the evaluation
    set; ``sampler(m, rng)`` draws one acquisition trace of length ``m``.
    """
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    r = empirical_risk(losses)
    rt, rl = _repeat_estimates(losses, sampler, m, n_repeats, rng)
    ddof = 1 if n_repeats > 1 else 0
    vt, vl = float(rt.var(ddof=ddof)), float(rl.var(ddof=ddof))
    return BiasEstimate(
        bias_r_tilde=r - float(rt.mean()),
        bias_r_lure=r - float(rl.mean()),
        se_r_tilde=math.sqrt(vt / n_repeats),
        se_r_lure=math.sqrt(vl / n_repeats),
        var_r_tilde=vt,
        var_r_lure=vl,
        n_repeats=n_repeats,
    )


def estimator_variance(losses, sampler: TraceSampler, m: int, n_repeats: int, rng) -> tuple[float, float]:
    if n_repeats < 2:
        raise ValueError("estimator variance needs n_repeats >= 2")
    rt, rl = _repeat_estimates(losses, sampler, m, n_repeats, rng)
    return float(rt.var(ddof=1)), float(rl.var(ddof=1))


def enumerate_sequences(probs_fn: Callable[[tuple[int, ...], list[int]], np.ndarray], n: int, m: int):
    """Yield every ordered m-sequence from range(n) with its probability and per-step alphas.

    ``probs_fn(prefix, remaining)`` returns the proposal over ``remaining``.
    """

    def rec(prefix: tuple[int, ...], prob: float, alphas: tuple[float, ...]):
        if len(prefix) == m:
            yield prefix, prob, alphas
            return
        remaining = [i for i in range(n) if i not in prefix]
        p = probs_fn(prefix, remaining)
        for j, idx in enumerate(remaining):
            yield from rec(prefix + (idx,), prob * p[j], alphas + (float(p[j]),))

    yield from rec((), 1.0, ())


def exact_expectations(losses, probs_fn, m: int) -> tuple[float, float, float, float]:
    """Exact E and Var of r_tilde and r_lure by enumerating all ordered sequences.

    Returns ``(E r_tilde, E r_lure, Var r_tilde, Var r_lure)``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.size
    e_t = e_l = s_t = s_l = 0.0
    for seq, prob, alphas in enumerate_sequences(probs_fn, n, m):
        trace = AcquisitionTrace(n, [TraceRecord(k + 1, i, a) for k, (i, a) in enumerate(zip(seq, alphas))])
        acquired = losses[list(seq)]
        t, lv = r_tilde(acquired), r_lure(acquired, trace)
        e_t += prob * t
        e_l += prob * lv
        s_t += prob * t * t
        s_l += prob * lv * lv
    return e_t, e_l, s_t - e_t**2, s_l - e_l**2
