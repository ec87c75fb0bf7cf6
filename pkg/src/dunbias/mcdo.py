"""Monte Carlo dropout baseline (plain MLP, dropout kept on at prediction)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dun import GaussianMixture, TrainingError, TrainSchedule, mixture_test_nll
from .network import NetworkConfig, NetworkParams, build, forward_stochastic


@dataclass
class McdoModel:
    params: NetworkParams
    n_mc_samples: int = 10
    checkpoint_log: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def dropout_p(self) -> float:
        return self.params.config.dropout_p

    def parameters(self):
        return self.params.parameters()


def create(input_dim: int, rng: np.random.Generator, width: int = 100, n_hidden: int = 3,
           dropout_p: float = 0.1, n_mc_samples: int = 10) -> McdoModel:
    cfg = NetworkConfig(input_dim=input_dim, width=width, n_hidden=n_hidden, use_batch_norm=False,
                        dropout_p=dropout_p, residual=False)
    return McdoModel(build(cfg, rng), n_mc_samples=n_mc_samples)


def predict_mc(model: McdoModel, x, rng: np.random.Generator) -> GaussianMixture:
    """Equal-weight mixture over ``n_mc_samples`` stochastic forward passes."""
    k = model.n_mc_samples
    cols = [forward_stochastic(model.params, x, model.dropout_p, rng).data[:, 0] for _ in range(k)]
    return GaussianMixture(np.stack(cols, axis=1), model.params.noise_var, np.full(k, 1.0 / k))


def test_nll(model: McdoModel, x, y, rng: np.random.Generator) -> float:
    return mixture_test_nll(predict_mc(model, x, rng), y)


def example_nll(model: McdoModel, x, y, rng: np.random.Generator) -> np.ndarray:
    return predict_mc(model, x, rng).nll(y)


def train(model: McdoModel, train_xy, val_xy, rng: np.random.Generator, weights=None,
          schedule: TrainSchedule | None = None) -> McdoModel:
    """Minimise the (weighted) mean Gaussian NLL with dropout on.

    Checkpoints by validation mixture NLL, each evaluation drawing its masks
    from a seed fixed per checkpoint so selection is reproducible.
    """
    schedule = schedule or TrainSchedule()
    x, y = train_xy
    xv, yv = val_xy
    if len(y) == 0:
        raise ValueError("empty training set")
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(y),):
        raise ValueError(f"weights of shape {w.shape} do not match {len(y)} examples")
    wcol = w.reshape(-1, 1)
    val_seed = int(rng.integers(2**63))
    params = model.parameters()
    opt = nx.OptimizerState(schedule.learning_rate, schedule.momentum, schedule.weight_decay)
    best_val, best_snap = math.inf, None
    log: list[tuple[int, float, float]] = []
    for it in range(1, schedule.iterations + 1):
        try:
            nx.zero_grad(params)
            mean = forward_stochastic(model.params, x, model.dropout_p, rng)
            nll = nx.gaussian_nll(y, mean, model.params.log_noise_var)
            loss = nx.mul(nx.tsum(nx.mul(nll, wcol)), 1.0 / len(y))
            nx.backward(loss)
            nx.sgd_step(params, opt)
            model.params.clamp_noise()
        except nx.NumericError as exc:
            raise TrainingError(it, str(exc)) from exc
        if it % schedule.checkpoint_every == 0 or it == schedule.iterations:
            try:
                val = test_nll(model, xv, yv, np.random.default_rng([val_seed, it]))
            except nx.NumericError as exc:
                raise TrainingError(it, f"validation: {exc}") from exc
            log.append((it, loss.item(), val))
            if val < best_val:
                best_val, best_snap = val, model.params.state_arrays()
    if best_snap is not None:
        model.params.load_state_arrays(best_snap)
    model.checkpoint_log = log
    return model
