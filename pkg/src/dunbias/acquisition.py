"""BALD scoring and the temperature-relaxed sequential proposal."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dun import GaussianMixture
from .estimators import AcquisitionTrace, TraceRecord


def bald_from_mixture(mix: GaussianMixture) -> np.ndarray:
    """Moment-matched BALD: ``0.5 log(var_mix / sigma^2)`` per row.

    The entropy of the mixture is replaced by that of a Gaussian with the
    mixture's variance; the component entropy is that of the shared noise.
    """
    return 0.5 * np.log1p(mix.disagreement() / mix.variance)


def bald_dun(model, x) -> np.ndarray:
    from . import dun

    return bald_from_mixture(dun.predict(model, x))


def bald_mcdo(model, x, rng: np.random.Generator) -> np.ndarray:
    from . import mcdo

    return bald_from_mixture(mcdo.predict_mc(model, x, rng))


@dataclass
class ProposalDistribution:
    temperature: float
    candidates: np.ndarray
    scores: np.ndarray
    probs: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pool_index", "score", "temperature", "probability"])
        for i, s, p in zip(self.candidates, self.scores, self.probs):
            w.writerow([int(i), format(s, ".17g"), format(self.temperature, ".17g"), format(p, ".17g")])
        return buf.getvalue()


def relax(scores, temperature: float, candidates=None) -> ProposalDistribution:
    """``softmax(T * scores)`` over the candidates."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise nx.NumericError("non-finite acquisition score")
    cand = np.arange(scores.size) if candidates is None else np.asarray(candidates)
    probs = nx.softmax(temperature * scores)
    return ProposalDistribution(temperature, cand, scores, probs)


def sample_batch(
    scores,
    candidates,
    batch_size: int,
    rng: np.random.Generator,
    temperature: float,
    start_m: int = 1,
) -> tuple[list[int], list[TraceRecord]]:
    """Draw ``batch_size`` candidates sequentially without replacement.

    Scores stay fixed within the batch; after every draw the chosen candidate
    is removed and the softmax renormalised over the rest.  Each record keeps
    the exact probability the drawn candidate had at that moment.
    """
    scores = np.asarray(scores, dtype=np.float64)
    remaining = list(np.asarray(candidates).tolist())
    if not remaining:
        raise RuntimeError("cannot acquire from an empty pool")
    if batch_size > len(remaining):
        raise ValueError(f"batch of {batch_size} exceeds {len(remaining)} remaining candidates")
    if scores.size != len(remaining):
        raise ValueError("scores and candidates differ in length")
    live = np.ones(scores.size, dtype=bool)
    chosen, records = [], []
    for k in range(batch_size):
        idx = np.flatnonzero(live)
        probs = relax(scores[idx], temperature).probs
        u = rng.random()
        j = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        j = min(j, idx.size - 1)
        live[idx[j]] = False
        pool_index = int(remaining[idx[j]])
        chosen.append(pool_index)
        records.append(TraceRecord(start_m + k, pool_index, float(probs[j])))
    return chosen, records


def uniform_batch(candidates, batch_size: int, rng: np.random.Generator, start_m: int = 1):
    """Uniform draws; equivalent to :func:`sample_batch` with equal scores."""
    cand = np.asarray(candidates)
    return sample_batch(np.zeros(cand.size), cand, batch_size, rng, 1.0, start_m)


def trace_sampler(scores, temperature: float):
    """Sampler for the estimators module: draws a fresh trace over all of ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)

    def sample(m: int, rng: np.random.Generator) -> AcquisitionTrace:
        _, records = sample_batch(scores, np.arange(scores.size), m, rng, temperature)
        return AcquisitionTrace(scores.size, records)

    return sample
