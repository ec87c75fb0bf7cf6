"""Residual fully-connected network with per-depth output heads.

Layout::

    a_0 = f_0(x)                      input block: linear [+ BN] + ReLU [+ dropout]
    a_i = a_{i-1} + f_i(a_{i-1})      hidden block (residual) or a_i = f_i(a_{i-1})
    y_i = f_out(a_i)                  shared linear output block, one per depth

A single forward pass yields every ``y_i`` for depths ``0..D``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Tensor

LOG_NOISE_VAR_BOUNDS = (-10.0, 10.0)


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    width: int = 100
    n_hidden: int = 10
    use_batch_norm: bool = True
    dropout_p: float = 0.0
    residual: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1 or self.n_hidden < 1:
            raise ValueError(f"invalid network size: {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def depth(self) -> int:
        return self.n_hidden


@dataclass
class Block:
    weight: Tensor
    bias: Tensor
    bn: BatchNormState | None = None

    def parameters(self) -> list[Tensor]:
        ps = [self.weight, self.bias]
        if self.bn is not None:
            ps += [self.bn.gamma, self.bn.beta]
        return ps


@dataclass
class NetworkParams:
    config: NetworkConfig
    input_block: Block
    hidden: list[Block]
    output: Block
    log_noise_var: Tensor = field(default_factory=lambda: Tensor(np.zeros(()), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        ps = self.input_block.parameters()
        for blk in self.hidden:
            ps += blk.parameters()
        ps += self.output.parameters()
        ps.append(self.log_noise_var)
        return ps

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise_var.data))

    def clamp_noise(self) -> None:
        lo, hi = LOG_NOISE_VAR_BOUNDS
        self.log_noise_var.data = np.clip(self.log_noise_var.data, lo, hi)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named copies of every trainable array and BN running statistic."""
        out: dict[str, np.ndarray] = {}
        blocks = [("input", self.input_block)] + [(f"hidden{i + 1}", b) for i, b in enumerate(self.hidden)]
        blocks.append(("output", self.output))
        for name, blk in blocks:
            out[f"{name}.weight"] = blk.weight.data.copy()
            out[f"{name}.bias"] = blk.bias.data.copy()
            if blk.bn is not None:
                out[f"{name}.bn.gamma"] = blk.bn.gamma.data.copy()
                out[f"{name}.bn.beta"] = blk.bn.beta.data.copy()
                out[f"{name}.bn.running_mean"] = blk.bn.running_mean.copy()
                out[f"{name}.bn.running_var"] = blk.bn.running_var.copy()
        out["log_noise_var"] = self.log_noise_var.data.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        blocks = [("input", self.input_block)] + [(f"hidden{i + 1}", b) for i, b in enumerate(self.hidden)]
        blocks.append(("output", self.output))
        for name, blk in blocks:
            blk.weight.data = np.array(arrays[f"{name}.weight"], dtype=float).reshape(blk.weight.shape)
            blk.bias.data = np.array(arrays[f"{name}.bias"], dtype=float).reshape(blk.bias.shape)
            if blk.bn is not None:
                blk.bn.gamma.data = np.array(arrays[f"{name}.bn.gamma"], dtype=float)
                blk.bn.beta.data = np.array(arrays[f"{name}.bn.beta"], dtype=float)
                blk.bn.running_mean = np.array(arrays[f"{name}.bn.running_mean"], dtype=float)
                blk.bn.running_var = np.array(arrays[f"{name}.bn.running_var"], dtype=float)
        self.log_noise_var.data = np.array(arrays["log_noise_var"], dtype=float).reshape(())

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)


def _linear_block(rng: np.random.Generator, fan_in: int, fan_out: int, bn: bool) -> Block:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return Block(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(fan_out), requires_grad=True),
        bn=BatchNormState.create(fan_out) if bn else None,
    )


def build(config: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
    """He-initialised weights, zero biases, unit BN scale, log noise variance 0."""
    inp = _linear_block(rng, config.input_dim, config.width, config.use_batch_norm)
    hidden = [_linear_block(rng, config.width, config.width, config.use_batch_norm) for _ in range(config.n_hidden)]
    out = _linear_block(rng, config.width, 1, False)
    return NetworkParams(config=config, input_block=inp, hidden=hidden, output=out)


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form trainable parameter count for :func:`build`."""
    per_bn = 2 * config.width if config.use_batch_norm else 0
    n = config.input_dim * config.width + config.width + per_bn
    n += config.n_hidden * (config.width * config.width + config.width + per_bn)
    n += config.width + 1
    return n + 1


@dataclass
class ForwardTrace:
    activations: list[Tensor]
    per_depth_outputs: list[Tensor]

    def means_matrix(self) -> Tensor:
        return nx.hstack(self.per_depth_outputs)


def _apply_block(blk: Block, a: Tensor, mode: str, dropout_p: float, rng) -> Tensor:
    h = nx.linear(a, blk.weight, blk.bias)
    if blk.bn is not None:
        h = nx.batch_norm(h, blk.bn, mode)
    h = nx.relu(h)
    if dropout_p > 0.0:
        h = nx.dropout(h, dropout_p, rng, "train")
    return h


def forward_all_depths(
    params: NetworkParams,
    x,
    mode: str = "eval",
    dropout_p: float | None = None,
    rng: np.random.Generator | None = None,
    all_depths: bool = True,
) -> ForwardTrace:
    """Run the network once and collect activations and outputs for every depth.

    ``mode`` selects batch-norm statistics.  Dropout is applied whenever
    ``dropout_p > 0`` (defaults to the config value), independent of ``mode``,
    so MC-dropout prediction can keep masks on while BN uses running stats.
    With ``all_depths=False`` only the full-depth output is computed.
    """
    cfg = params.config
    p = cfg.dropout_p if dropout_p is None else dropout_p
    if p > 0.0 and rng is None:
        raise ValueError("dropout requires an rng")
    x = nx.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise nx.NumericError("non-finite network input")
    try:
        a = _apply_block(params.input_block, x, mode, p, rng)
    except nx.NumericError as exc:
        raise nx.NumericError(f"non-finite activation at depth 0 ({exc})") from exc
    acts = [a]
    for i, blk in enumerate(params.hidden, start=1):
        try:
            h = _apply_block(blk, a, mode, p, rng)
            a = nx.add(a, h) if cfg.residual else h
        except nx.NumericError as exc:
            raise nx.NumericError(f"non-finite activation at depth {i} ({exc})") from exc
        acts.append(a)
    heads = acts if all_depths else [acts[-1]]
    outs = [nx.linear(act, params.output.weight, params.output.bias) for act in heads]
    return ForwardTrace(activations=acts, per_depth_outputs=outs)


def forward_stochastic(params: NetworkParams, x, dropout_p: float, rng: np.random.Generator, mode: str = "eval") -> Tensor:
    """Full-depth prediction with fresh dropout masks drawn from ``rng``."""
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
    trace = forward_all_depths(params, x, mode=mode, dropout_p=dropout_p, rng=rng, all_depths=False)
    return trace.per_depth_outputs[-1]
