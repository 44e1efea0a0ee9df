"""Vision Transformer pieces: patch embedding, pre-norm attention, FFN, heads.

Every function accepts either a single sequence ``(T, D)`` or a batch
``(B, T, D)``; leading axes are carried through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class PatchEmbedConfig:
    image_size: int
    patch_size: int
    in_channels: int
    embed_dim: int

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by "
                f"patch_size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def token_count(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2


@dataclass
class FFN:
    """Two-layer GELU MLP; weights are stored ``(in, out)``."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, hidden: int) -> "FFN":
        return cls(
            nx.parameter(rng.normal(0.0, INIT_STD, (dim, hidden))),
            nx.parameter(np.zeros(hidden)),
            nx.parameter(rng.normal(0.0, INIT_STD, (hidden, dim))),
            nx.parameter(np.zeros(dim)),
        )

    def copy(self, out_scale: float = 1.0) -> "FFN":
        """Independent replica; ``out_scale`` multiplies the second layer."""
        return FFN(
            nx.parameter(self.fc1_w.data.copy()),
            nx.parameter(self.fc1_b.data.copy()),
            nx.parameter(self.fc2_w.data * out_scale),
            nx.parameter(self.fc2_b.data * out_scale),
        )

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.fc1.weight", self.fc1_w), (f"{prefix}.fc1.bias", self.fc1_b),
                (f"{prefix}.fc2.weight", self.fc2_w), (f"{prefix}.fc2.bias", self.fc2_b)]

    @property
    def dim(self) -> int:
        return self.fc1_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.fc1_w.shape[1]


@dataclass
class AttentionBlock:
    norm1_w: Tensor
    norm1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    norm2_w: Tensor
    norm2_b: Tensor
    num_heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, num_heads: int) -> "AttentionBlock":
        if dim % num_heads:
            raise ConfigError(f"embed_dim {dim} not divisible by {num_heads} heads")
        return cls(
            nx.parameter(np.ones(dim)), nx.parameter(np.zeros(dim)),
            nx.parameter(rng.normal(0.0, INIT_STD, (dim, 3 * dim))),
            nx.parameter(np.zeros(3 * dim)),
            nx.parameter(rng.normal(0.0, INIT_STD, (dim, dim))),
            nx.parameter(np.zeros(dim)),
            nx.parameter(np.ones(dim)), nx.parameter(np.zeros(dim)),
            num_heads,
        )

    def named_parameters(self, prefix: str):
        return [
            (f"{prefix}.norm1.weight", self.norm1_w), (f"{prefix}.norm1.bias", self.norm1_b),
            (f"{prefix}.attn.qkv.weight", self.qkv_w), (f"{prefix}.attn.qkv.bias", self.qkv_b),
            (f"{prefix}.attn.proj.weight", self.proj_w), (f"{prefix}.attn.proj.bias", self.proj_b),
            (f"{prefix}.norm2.weight", self.norm2_w), (f"{prefix}.norm2.bias", self.norm2_b),
        ]


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., C, H, W)`` -> ``(..., num_patches, C*p*p)`` in row-major patch order."""
    *lead, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(
            f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(*lead, c, gh, patch_size, gw, patch_size)
    nl = len(lead)
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.reshape(*lead, gh * gw, c * patch_size * patch_size)


def patch_embed(images, proj_w: Tensor, proj_b: Tensor, cls_token: Tensor,
                pos_embed: Tensor, cfg: PatchEmbedConfig) -> Tensor:
    """Project non-overlapping patches, prepend [CLS], add positions.

    ``images`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``cls_token`` is
    ``(D,)`` and ``pos_embed`` is ``(T, D)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"expected {cfg.image_size}x{cfg.image_size} images, got "
            f"{images.shape[-2]}x{images.shape[-1]}")
    patches = extract_patches(images, cfg.patch_size)
    tokens = nx.matmul(patches, proj_w) + proj_b
    lead = patches.shape[:-2]
    cls = nx.add(cls_token, np.zeros(lead + (1, cfg.embed_dim)))
    x = nx.concat([cls, tokens], axis=-2)
    return x + pos_embed


def _swap_last(nd: int) -> tuple:
    return tuple(range(nd - 2)) + (nd - 1, nd - 2)


def attention(x: Tensor, block: AttentionBlock, return_weights: bool = False):
    """Pre-norm residual multi-head self-attention: ``x + Proj(MHSA(LN(x)))``."""
    *lead, t, d = x.shape
    heads = block.num_heads
    if d % heads:
        raise DimensionError(f"embed_dim {d} not divisible by {heads} heads")
    dh = d // heads
    lead = tuple(lead)
    nl = len(lead)

    h = nx.layernorm(x, block.norm1_w, block.norm1_b)
    qkv = (nx.matmul(h, block.qkv_w) + block.qkv_b).reshape(lead + (t, 3, heads, dh))
    # -> (3, *lead, heads, T, dh)
    qkv = qkv.transpose((nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.matmul(q, k.transpose(_swap_last(nl + 3))) * (1.0 / np.sqrt(dh))
    weights = nx.softmax(scores, axis=-1)
    ctx = nx.matmul(weights, v)
    ctx = ctx.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(lead + (t, d))
    out = x + (nx.matmul(ctx, block.proj_w) + block.proj_b)
    if return_weights:
        return out, weights
    return out


def ffn_forward(x: Tensor, ffn: FFN) -> Tensor:
    """``fc2(GELU(fc1(x)))`` per token; the caller owns norm and residual."""
    hidden = nx.gelu(nx.matmul(x, ffn.fc1_w) + ffn.fc1_b)
    return nx.matmul(hidden, ffn.fc2_w) + ffn.fc2_b


def classify_head(cls_token: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Linear logits from the [CLS] token(s): ``(..., D) -> (..., C)``."""
    if cls_token.ndim == 1:
        return nx.matmul(cls_token.reshape(1, -1), head_w).reshape(-1) + head_b
    return nx.matmul(cls_token, head_w) + head_b


def seg_head(tokens: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Per-patch linear logits: ``(..., T-1, D) -> (..., T-1, C)``."""
    return nx.matmul(tokens, head_w) + head_b
