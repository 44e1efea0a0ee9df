"""Sparse mixture-of-experts layer with an optional always-on shared expert.

A routing unit is either a whole image (gated on its [CLS] token) or a
single token.  The gate is a bias-free linear map followed by softmax;
the top-k experts run on the unit and their outputs are mixed by the gate
weights.  The shared expert, when present, is added with weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Tensor
from .vit import FFN, ffn_forward

ROUTING_MODES = ("image", "token")
RENORM_MODES = ("none", "topk")


@dataclass
class MoELayer:
    gate_w: Tensor  # (N, D), no bias
    experts: list
    shared: Optional[FFN] = None
    k: int = 1
    routing_mode: str = "image"
    renorm_mode: str = "topk"
    alpha: float = 0.01

    def __post_init__(self):
        n = len(self.experts)
        if n < 1:
            raise ConfigError("an MoE layer needs at least one expert")
        if not 1 <= self.k <= n:
            raise ConfigError(f"top_k={self.k} must lie in [1, {n}]")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"unknown routing_mode {self.routing_mode!r}")
        if self.renorm_mode not in RENORM_MODES:
            raise ConfigError(f"unknown renorm_mode {self.renorm_mode!r}")
        if self.gate_w.shape != (n, self.experts[0].dim):
            raise ConfigError(
                f"gate shape {self.gate_w.shape} does not match "
                f"{n} experts of width {self.experts[0].dim}")
        shapes = {(e.dim, e.hidden) for e in self.experts}
        if self.shared is not None:
            shapes.add((self.shared.dim, self.shared.hidden))
        if len(shapes) != 1:
            raise ConfigError(f"experts must share one shape, got {sorted(shapes)}")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}.gate.weight", self.gate_w)]
        for i, e in enumerate(self.experts):
            out += e.named_parameters(f"{prefix}.experts.{i}")
        if self.shared is not None:
            out += self.shared.named_parameters(f"{prefix}.shared")
        return out


@dataclass
class GateDecision:
    """Gate output for ``U`` routing units.

    ``probs`` is ``(U, N)``, ``selected`` the ``(U, k)`` expert indices in
    descending probability order, ``weights`` the ``(U, k)`` mixing weights
    actually applied.
    """

    probs: Tensor
    selected: np.ndarray
    weights: Tensor

    @property
    def top1(self) -> np.ndarray:
        return self.selected[:, 0]


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the smaller index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def gate(x, layer: MoELayer) -> GateDecision:
    """Route gating inputs ``(U, D)`` (or one vector ``(D,)``)."""
    x = x if isinstance(x, Tensor) else nx.tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    probs = nx.softmax(nx.matmul(x, layer.gate_w.T), axis=-1)
    selected = top_k_indices(probs.data, layer.k)
    rows = np.arange(probs.shape[0])[:, None]
    picked = probs[rows, selected]
    if layer.renorm_mode == "topk":
        weights = picked / picked.sum(axis=-1, keepdims=True)
    else:
        weights = picked
    return GateDecision(probs, selected, weights)


def route_input(block_hidden: Tensor, routing_mode: str) -> Tensor:
    """Gating inputs from the normalized pre-FFN hidden state.

    Image mode returns the [CLS] row of each sequence, ``(B, D)``; token
    mode returns every token, ``(B*T, D)``.
    """
    if routing_mode == "image":
        if block_hidden.ndim == 2:
            return block_hidden[0:1]
        return block_hidden[:, 0]
    if routing_mode == "token":
        return block_hidden.reshape(-1, block_hidden.shape[-1])
    raise ConfigError(f"unknown routing_mode {routing_mode!r}")


def moe_forward(x_tokens: Tensor, gating_input: Tensor, layer: MoELayer):
    """Sparse mixture over the selected experts, plus the shared expert.

    ``x_tokens`` is ``(T, D)`` or ``(B, T, D)``; it is split into as many
    equal routing units as ``gating_input`` has rows.  Returns the output
    (same shape as ``x_tokens``, residual not included) and the decision.
    """
    shape = x_tokens.shape
    d = shape[-1]
    units = gating_input.shape[0]
    total = int(np.prod(shape[:-1]))
    if total % units:
        raise ContractError(
            f"{total} tokens cannot be split into {units} routing units")
    xu = x_tokens.reshape(units, total // units, d)
    decision = gate(gating_input, layer)
    y = None
    for e, expert in enumerate(layer.experts):
        rows, slots = np.nonzero(decision.selected == e)
        if rows.size == 0:
            continue
        out = ffn_forward(nx.take_rows(xu, rows), expert)
        w = decision.weights[rows, slots].reshape(-1, 1, 1)
        part = nx.scatter_rows(out * w, rows, units)
        y = part if y is None else y + part
    if layer.shared is not None:
        y = y + ffn_forward(xu, layer.shared)
    return y.reshape(shape), decision


@dataclass
class AuxLossAccumulator:
    """Hard top-1 counts and router probabilities for the balancing loss.

    Probability rows are kept in arrival order and summed in a single
    reduction, so any consumer that sums the same rows in the same order
    gets a bit-identical result.
    """

    num_experts: int
    alpha: float
    counts: np.ndarray = field(init=False)
    _probs: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.counts = np.zeros(self.num_experts, dtype=np.int64)

    @property
    def num_units(self) -> int:
        return int(self.counts.sum())

    def add(self, probs):
        probs = probs if isinstance(probs, Tensor) else nx.tensor(probs)
        if probs.ndim != 2 or probs.shape[1] != self.num_experts:
            raise ContractError(
                f"expected (U, {self.num_experts}) probabilities, got {probs.shape}")
        self.counts += np.bincount(np.argmax(probs.data, axis=1),
                                   minlength=self.num_experts)
        self._probs.append(probs)

    def merge(self, other: "AuxLossAccumulator"):
        self.counts += other.counts
        self._probs.extend(other._probs)

    def prob_sums(self) -> Tensor:
        if len(self._probs) == 1:
            return self._probs[0].sum(axis=0)
        return nx.concat(self._probs, axis=0).sum(axis=0)

    @property
    def f(self) -> np.ndarray:
        """Fraction of units whose argmax expert is i."""
        return self.counts / self.num_units

    @property
    def P(self) -> np.ndarray:
        """Mean router probability per expert."""
        return self.prob_sums().data / self.num_units


def load_balance_loss(acc: AuxLossAccumulator) -> Tensor:
    """``alpha * N * sum_i f_i * P_i``; gradient flows through P only."""
    t = acc.num_units
    if t == 0:
        raise ContractError("load_balance_loss needs at least one routing unit")
    p = acc.prob_sums() / t
    f = acc.counts / t
    return (p * f).sum() * (acc.alpha * acc.num_experts)


def total_aux_loss(result) -> Tensor:
    """Sum of per-layer balancing losses of a completed forward pass."""
    losses = result.aux_losses()
    if not losses:
        return nx.tensor(0.0)
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total
