"""Depth uncertainty networks: exact inference over a categorical depth.

The depth posterior, marginal likelihood and ELBO are all computed exactly
over the ``D + 1`` depths from one forward pass; nothing here is sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .network import NetworkConfig, NetworkParams, build, forward_all_depths
from .numerics import Tensor


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, reason: str):
        super().__init__(f"training diverged at iteration {iteration}: {reason}")
        self.iteration = iteration


@dataclass
class DepthPosterior:
    """Categorical distribution over depths 0..D stored as log-probabilities."""

    log_probs: np.ndarray

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        total = float(np.exp(self.log_probs).sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"depth distribution sums to {total!r}")

    @classmethod
    def from_logits(cls, logits) -> "DepthPosterior":
        return cls(nx.log_softmax(np.asarray(logits, dtype=np.float64)))

    @classmethod
    def uniform(cls, n_depths: int) -> "DepthPosterior":
        return cls(np.full(n_depths, -math.log(n_depths)))

    @classmethod
    def shallow(cls, n_depths: int, decay: float = 0.75) -> "DepthPosterior":
        """Prior favouring shallow subnetworks: p(i) proportional to decay**i."""
        return cls.from_logits(np.arange(n_depths) * math.log(decay))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __len__(self) -> int:
        return len(self.log_probs)

    def expected_depth(self) -> float:
        return float(np.dot(self.probs, np.arange(len(self))))


@dataclass
class TrainSchedule:
    iterations: int = 1000
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    checkpoint_every: int = 10


@dataclass
class DunModel:
    params: NetworkParams
    logits: Tensor
    prior: DepthPosterior
    checkpoint_log: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def n_depths(self) -> int:
        return len(self.prior)

    @property
    def variational(self) -> DepthPosterior:
        return DepthPosterior.from_logits(self.logits.data)

    def parameters(self) -> list[Tensor]:
        return self.params.parameters() + [self.logits]


def create(config: NetworkConfig, rng: np.random.Generator, prior: str = "uniform") -> DunModel:
    params = build(config, rng)
    n = config.depth + 1
    if prior == "uniform":
        p = DepthPosterior.uniform(n)
    elif prior == "shallow":
        p = DepthPosterior.shallow(n)
    else:
        raise ValueError(f"unknown depth prior {prior!r}")
    # variational logits start at the prior
    return DunModel(params=params, logits=Tensor(p.log_probs.copy(), requires_grad=True), prior=p)


def per_depth_log_lik(model: DunModel, x, y, mode: str = "eval") -> Tensor:
    """n×(D+1) matrix of log N(y_n; mu_i(x_n), sigma^2)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    means = forward_all_depths(model.params, x, mode=mode).means_matrix()
    return nx.neg(nx.gaussian_nll(y, means, model.params.log_noise_var))


def mll_from_loglik(dataset_loglik, log_prior) -> float:
    """log sum_i p(i) prod_n p(y_n | i), given per-depth summed log-likelihoods."""
    return nx.log_sum_exp(np.asarray(log_prior) + np.asarray(dataset_loglik))


def posterior_from_loglik(dataset_loglik, log_prior) -> DepthPosterior:
    joint = np.asarray(log_prior, dtype=np.float64) + np.asarray(dataset_loglik, dtype=np.float64)
    return DepthPosterior(nx.log_softmax(joint))


def marginal_log_lik(model: DunModel, x, y) -> float:
    ll = per_depth_log_lik(model, x, y).data.sum(axis=0)
    return mll_from_loglik(ll, model.prior.log_probs)


def exact_posterior(model: DunModel, x, y) -> DepthPosterior:
    ll = per_depth_log_lik(model, x, y).data.sum(axis=0)
    return posterior_from_loglik(ll, model.prior.log_probs)


def kl_categorical(log_q: Tensor, log_p: np.ndarray) -> Tensor:
    q = nx.exp(log_q)
    return nx.tsum(nx.mul(q, nx.add(log_q, -np.asarray(log_p))))


def elbo_from_loglik(ll: Tensor, logits: Tensor, log_prior, weights=None) -> Tensor:
    """sum_n w_n E_q[log p(y_n | d)] - KL(q || prior), with q = softmax(logits)."""
    n = ll.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"weights of shape {w.shape} do not match {n} examples")
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite example weights")
    log_q = nx.log_softmax(logits)
    q = nx.exp(log_q)
    expected = nx.tsum(nx.mul(ll, q), axis=1)
    data_term = nx.tsum(nx.mul(expected, w))
    return nx.add(data_term, nx.neg(kl_categorical(log_q, log_prior)))


def elbo(model: DunModel, x, y, weights=None, mode: str = "eval") -> Tensor:
    ll = per_depth_log_lik(model, x, y, mode=mode)
    return elbo_from_loglik(ll, model.logits, model.prior.log_probs, weights)


def _snapshot(model: DunModel) -> dict:
    s = model.params.state_arrays()
    s["logits"] = model.logits.data.copy()
    return s


def _restore(model: DunModel, snap: dict) -> None:
    model.params.load_state_arrays(snap)
    model.logits.data = snap["logits"].copy()


def train(model: DunModel, train_xy, val_xy, weights=None, schedule: TrainSchedule | None = None) -> DunModel:
    """Full-batch momentum SGD on -ELBO / n, keeping the best validation-ELBO snapshot.

    ``weights`` are per-example multipliers on the likelihood term (LURE
    weights); ``None`` means unit weights.  Validation always uses unit
    weights and running batch-norm statistics.  ``model`` is updated in place
    and returned.
    """
    schedule = schedule or TrainSchedule()
    x, y = train_xy
    xv, yv = val_xy
    if len(y) == 0:
        raise ValueError("empty training set")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    params = model.parameters()
    opt = nx.OptimizerState(schedule.learning_rate, schedule.momentum, schedule.weight_decay)
    best_val, best_snap = -math.inf, None
    log: list[tuple[int, float, float]] = []
    for it in range(1, schedule.iterations + 1):
        try:
            nx.zero_grad(params)
            # per-example scale keeps step sizes independent of the training-set size
            loss = nx.mul(elbo(model, x, y, w, mode="train"), -1.0 / len(y))
            nx.backward(loss)
            nx.sgd_step(params, opt)
            model.params.clamp_noise()
        except nx.NumericError as exc:
            raise TrainingError(it, str(exc)) from exc
        if it % schedule.checkpoint_every == 0 or it == schedule.iterations:
            try:
                val = elbo(model, xv, yv, mode="eval").item()
            except nx.NumericError as exc:
                raise TrainingError(it, f"validation: {exc}") from exc
            log.append((it, loss.item(), val))
            if val > best_val:
                best_val, best_snap = val, _snapshot(model)
    if best_snap is not None:
        _restore(model, best_snap)
    model.checkpoint_log = log
    return model


@dataclass
class GaussianMixture:
    """Per-row Gaussian mixture with shared component variance.

    ``means`` is n×K, ``weights`` a length-K probability vector.
    """

    means: np.ndarray
    variance: float
    weights: np.ndarray

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def mean(self) -> np.ndarray:
        return self.means @ self.weights

    def disagreement(self) -> np.ndarray:
        """Variance of the component means under the mixture weights."""
        centred = self.means - self.mean()[:, None]
        return (centred**2) @ self.weights

    def var(self) -> np.ndarray:
        return self.variance + self.disagreement()

    def log_density(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        comp = -nx.gaussian_nll(y, self.means, math.log(self.variance))
        return nx.log_sum_exp(self.log_weights[None, :] + comp, axis=1)

    def nll(self, y) -> np.ndarray:
        return -self.log_density(y)


def mixture_test_nll(mix: GaussianMixture, y) -> float:
    return float(np.mean(mix.nll(y)))


def predict(model: DunModel, x) -> GaussianMixture:
    means = forward_all_depths(model.params, x, mode="eval").means_matrix().data
    return GaussianMixture(means=means, variance=model.params.noise_var, weights=model.variational.probs)


def test_nll(model: DunModel, x, y) -> float:
    return mixture_test_nll(predict(model, x), y)


def example_nll(model: DunModel, x, y) -> np.ndarray:
    """Per-example negative log predictive density, the loss fed to risk estimators."""
    return predict(model, x).nll(y)
