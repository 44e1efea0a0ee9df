"""Closed-form parameter and multiply-accumulate counts, and the routing degree."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional

from .errors import ConfigError, ContractError
from .model import ModelConfig

CSV_FIELDS = ("config_hash", "N", "L", "shared", "k", "total", "activated", "flops")


@dataclass(frozen=True)
class CountReport:
    total_params: int
    activated_params: int
    flops: Optional[int] = None     # multiply-accumulates at ``resolution``
    resolution: Optional[int] = None

    def csv_row(self, config: ModelConfig) -> list:
        return [config.config_hash(), config.num_experts if config.moe_last_L else 0,
                config.moe_last_L, int(config.shared_expert), config.top_k,
                self.total_params, self.activated_params,
                "" if self.flops is None else self.flops]


def routing_degree(num_experts: int, top_k: int, num_layers: int) -> int:
    """Number of cross-layer expert combinations, ``C(N, k) ** L``."""
    if not 1 <= top_k <= num_experts or num_layers < 0:
        raise ContractError(f"invalid routing degree arguments N={num_experts}, "
                            f"k={top_k}, L={num_layers}")
    return comb(num_experts, top_k) ** num_layers


def ffn_params(config: ModelConfig) -> int:
    d, h = config.embed_dim, config.hidden_dim
    return d * h + h + h * d + d


def _backbone_params(config: ModelConfig, include_head: bool) -> int:
    """Every parameter of the dense model except the block FFNs."""
    d, c = config.embed_dim, config.num_classes
    pc = config.patch_config
    embed = pc.patch_dim * d + d + d + config.token_count * d
    attn = d * 3 * d + 3 * d + d * d + d + 4 * d
    head = d * c + c if include_head else 0
    return embed + config.depth * attn + 2 * d + head


def count_params(config: ModelConfig, include_head: bool = True) -> CountReport:
    """Exact total and activated parameter counts.

    Activated counts the backbone plus, in each MoE layer, the gate, the
    ``k`` selected experts and the shared expert.  The positional table is
    sized for ``config.image_size``.
    """
    base = _backbone_params(config, include_head)
    f = ffn_params(config)
    L, n, k = config.moe_last_L, config.num_experts, config.top_k
    shared = int(config.shared_expert)
    gate = n * config.embed_dim
    dense_ffns = (config.depth - L) * f
    total = base + dense_ffns + L * ((n + shared) * f + gate)
    activated = base + dense_ffns + L * ((k + shared) * f + gate)
    return CountReport(total, activated)


def count_flops(config: ModelConfig, resolution: Optional[int] = None,
                include_head: bool = True) -> CountReport:
    """Multiply-accumulates of one forward pass on a ``resolution`` square image.

    Counted: patch projection, qkv and output projections, attention score
    and value products, FFNs and activated experts, gates and the head.
    Norms, activations and softmax are free.
    """
    res = config.image_size if resolution is None else resolution
    p = config.patch_size
    if res % p:
        raise ConfigError(f"resolution {res} not divisible by patch size {p}")
    d, h = config.embed_dim, config.hidden_dim
    n_patch = (res // p) ** 2
    t = n_patch + 1
    patch = n_patch * config.in_channels * p * p * d
    attn = t * d * 3 * d + t * d * d + 2 * t * t * d
    ffn = t * 2 * d * h
    L, k = config.moe_last_L, config.top_k
    shared = int(config.shared_expert)
    # image routing gates once per image ([CLS]); token routing gates every token
    units = 1 if config.routing_mode == "image" else t
    gate = units * config.num_experts * d
    moe_layer = (k + shared) * ffn + gate
    if config.task == "classification":
        head = d * config.num_classes
    else:
        head = n_patch * d * config.num_classes
    flops = (patch + config.depth * attn + (config.depth - L) * ffn + L * moe_layer
             + (head if include_head else 0))
    params = count_params(config, include_head)
    return CountReport(params.total_params, params.activated_params, flops, res)
