"""ViMoE assembly: configuration, presets, replication init, forward pass, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, FormatError
from .moe import (RENORM_MODES, ROUTING_MODES, AuxLossAccumulator, GateDecision,
                  MoELayer, load_balance_loss, moe_forward, route_input)
from .numerics import Tensor
from .vit import (INIT_STD, FFN, AttentionBlock, PatchEmbedConfig, attention,
                  classify_head, ffn_forward, patch_embed, seg_head)

TASKS = ("classification", "segmentation")

PRESETS = {
    "vit-tiny-lab": dict(image_size=28, patch_size=7, in_channels=3, embed_dim=32,
                         depth=6, num_heads=4, mlp_ratio=4, num_classes=8),
    "vit-s-14": dict(image_size=224, patch_size=14, in_channels=3, embed_dim=384,
                     depth=12, num_heads=6, mlp_ratio=4, num_classes=1000),
}

DEFAULT_ALPHA = {"classification": 0.01, "segmentation": 0.001}
DEFAULT_ROUTING = {"classification": "image", "segmentation": "token"}


@dataclass(frozen=True)
class ModelConfig:
    """Backbone plus MoE placement.  Defaults are the vit-tiny-lab backbone.

    ``routing_mode="auto"`` and ``alpha=None`` resolve from ``task``:
    image routing with alpha 0.01 for classification, token routing with
    alpha 0.001 for segmentation.
    """

    image_size: int = 28
    patch_size: int = 7
    in_channels: int = 3
    embed_dim: int = 32
    depth: int = 6
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8
    task: str = "classification"
    moe_last_L: int = 0
    num_experts: int = 4
    top_k: int = 1
    shared_expert: bool = False
    routing_mode: str = "auto"
    renorm_mode: str = "topk"
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.routing_mode == "auto":
            object.__setattr__(self, "routing_mode", DEFAULT_ROUTING[self.task])
        if self.alpha is None:
            object.__setattr__(self, "alpha", DEFAULT_ALPHA[self.task])
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"unknown routing_mode {self.routing_mode!r}")
        if self.renorm_mode not in RENORM_MODES:
            raise ConfigError(f"unknown renorm_mode {self.renorm_mode!r}")
        for name in ("image_size", "patch_size", "in_channels", "embed_dim",
                     "depth", "num_heads", "mlp_ratio", "num_classes", "num_experts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.moe_last_L <= self.depth:
            raise ConfigError(
                f"moe_last_L={self.moe_last_L} outside [0, depth={self.depth}]")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k={self.top_k} outside [1, num_experts={self.num_experts}]")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def patch_config(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.image_size, self.patch_size,
                                self.in_channels, self.embed_dim)

    @property
    def token_count(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1

    @property
    def moe_blocks(self) -> list:
        """Block indices carrying an MoE layer (the deepest ``moe_last_L``)."""
        return list(range(self.depth - self.moe_last_L, self.depth))

    def paper_layer(self, block: int) -> int:
        """Reporting index of a block: 1 is the deepest block."""
        return self.depth - block


@dataclass
class Block:
    attn: AttentionBlock
    mlp: Optional[FFN] = None
    moe: Optional[MoELayer] = None

    def named_parameters(self, prefix: str):
        out = self.attn.named_parameters(prefix)
        if self.moe is not None:
            out += self.moe.named_parameters(f"{prefix}.moe")
        else:
            out += self.mlp.named_parameters(f"{prefix}.mlp")
        return out


@dataclass
class LayerRouting:
    block: int
    decision: GateDecision
    alpha: float

    @property
    def num_experts(self) -> int:
        return self.decision.probs.shape[1]

    def accumulator(self) -> AuxLossAccumulator:
        acc = AuxLossAccumulator(self.num_experts, self.alpha)
        acc.add(self.decision.probs)
        return acc


@dataclass
class ForwardResult:
    logits: Tensor
    routing: list

    def aux_losses(self) -> list:
        return [load_balance_loss(r.accumulator()) for r in self.routing]


class ViMoE:
    """A ViT whose deepest ``moe_last_L`` FFNs are sparse MoE layers."""

    def __init__(self, config: ModelConfig, patch_w, patch_b, cls_token, pos_embed,
                 blocks, norm_w, norm_b, head_w, head_b):
        self.config = config
        self.patch_w = patch_w
        self.patch_b = patch_b
        self.cls_token = cls_token
        self.pos_embed = pos_embed
        self.blocks = blocks
        self.norm_w = norm_w
        self.norm_b = norm_b
        self.head_w = head_w
        self.head_b = head_b

    def named_parameters(self) -> list:
        out = [("patch_embed.weight", self.patch_w), ("patch_embed.bias", self.patch_b),
               ("cls_token", self.cls_token), ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            out += blk.named_parameters(f"blocks.{i}")
        out += [("norm.weight", self.norm_w), ("norm.bias", self.norm_b),
                ("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def forward(self, images) -> ForwardResult:
        """Logits for a batch ``(B, C, H, W)`` (or one image) plus routing records.

        Classification logits are ``(B, C)``; segmentation logits are
        ``(B, T-1, C)``, one row per patch token.
        """
        cfg = self.config
        x = patch_embed(images, self.patch_w, self.patch_b, self.cls_token,
                        self.pos_embed, cfg.patch_config)
        routing = []
        for b, blk in enumerate(self.blocks):
            h = attention(x, blk.attn)
            z = nx.layernorm(h, blk.attn.norm2_w, blk.attn.norm2_b)
            if blk.moe is None:
                y = ffn_forward(z, blk.mlp)
            else:
                y, decision = moe_forward(z, route_input(z, blk.moe.routing_mode), blk.moe)
                routing.append(LayerRouting(b, decision, blk.moe.alpha))
            x = h + y
        x = nx.layernorm(x, self.norm_w, self.norm_b)
        if cfg.task == "classification":
            cls = x[..., 0, :]
            logits = classify_head(cls, self.head_w, self.head_b)
        else:
            logits = seg_head(x[..., 1:, :], self.head_w, self.head_b)
        return ForwardResult(logits, routing)

    __call__ = forward

    def moe_layers(self) -> list:
        return [(i, blk.moe) for i, blk in enumerate(self.blocks) if blk.moe is not None]


def build(config: ModelConfig, seed: int = 0, base_state: Optional[dict] = None) -> ViMoE:
    """Build a ViMoE with every expert replicated from its block's FFN.

    The dense backbone is drawn first from ``seed`` in a fixed order, so a
    dense model and any MoE variant built from the same seed share every
    backbone weight.  ``base_state`` (a state dict with dense ``mlp`` entries,
    e.g. from a dense checkpoint) overrides the fresh initialization.

    Gates start at zero.  Routed experts are exact copies of the FFN; when a
    shared expert is present, the routed experts and the shared expert each
    carry half of the FFN's output layer, so at initialization the layer
    reproduces the dense FFN exactly.
    """
    cfg = config
    rng = np.random.default_rng([seed, 0x56694D6F])
    d, hdim, t = cfg.embed_dim, cfg.hidden_dim, cfg.token_count
    pc = cfg.patch_config
    patch_w = nx.parameter(rng.normal(0.0, INIT_STD, (pc.patch_dim, d)))
    patch_b = nx.parameter(np.zeros(d))
    cls_token = nx.parameter(rng.normal(0.0, INIT_STD, d))
    pos_embed = nx.parameter(rng.normal(0.0, INIT_STD, (t, d)))
    attn_blocks, ffns = [], []
    for _ in range(cfg.depth):
        attn_blocks.append(AttentionBlock.init(rng, d, cfg.num_heads))
        ffns.append(FFN.init(rng, d, hdim))
    norm_w, norm_b = nx.parameter(np.ones(d)), nx.parameter(np.zeros(d))
    head_w = nx.parameter(rng.normal(0.0, INIT_STD, (d, cfg.num_classes)))
    head_b = nx.parameter(np.zeros(cfg.num_classes))

    blocks = [Block(a, mlp=f) for a, f in zip(attn_blocks, ffns)]
    dense = ViMoE(cfg.replace(moe_last_L=0), patch_w, patch_b, cls_token, pos_embed,
                  blocks, norm_w, norm_b, head_w, head_b)
    if base_state is not None:
        dense.load_state_dict(base_state)

    moe_set = set(cfg.moe_blocks)
    out_blocks = []
    for i, blk in enumerate(blocks):
        if i not in moe_set:
            out_blocks.append(blk)
            continue
        scale = 0.5 if cfg.shared_expert else 1.0
        experts = [blk.mlp.copy(scale) for _ in range(cfg.num_experts)]
        shared = blk.mlp.copy(scale) if cfg.shared_expert else None
        layer = MoELayer(nx.parameter(np.zeros((cfg.num_experts, d))), experts, shared,
                         k=cfg.top_k, routing_mode=cfg.routing_mode,
                         renorm_mode=cfg.renorm_mode, alpha=cfg.alpha)
        out_blocks.append(Block(blk.attn, moe=layer))
    return ViMoE(cfg, patch_w, patch_b, cls_token, pos_embed, out_blocks,
                 norm_w, norm_b, head_w, head_b)


def param_block_index(name: str, depth: int) -> Optional[int]:
    """Block index a parameter belongs to; -1 for embeddings, None for head/norm."""
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    if name.startswith(("patch_embed", "cls_token", "pos_embed")):
        return -1
    return None


# -- checkpoint container ------------------------------------------------------
#
# Layout (little-endian):
#   b"VIMO" | u32 version | u32 config_len | config JSON (utf-8)
#   | u32 entry_count | entries: u16 name_len, name, u8 ndim, u32 dims[ndim], u64 offset
#   | u64 payload_len | raw f64 payload | u32 crc32(payload)

CKPT_MAGIC = b"VIMO"
CKPT_VERSION = 1


def save_checkpoint(path, model: ViMoE):
    cfg_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    header = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg_blob)), cfg_blob]
    named = model.named_parameters()
    header.append(struct.pack("<I", len(named)))
    chunks, offset = [], 0
    for name, p in named:
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim))
        header.append(struct.pack(f"<{p.ndim}I", *p.shape))
        header.append(struct.pack("<Q", offset))
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    blob = b"".join(header) + struct.pack("<Q", len(payload)) + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated file", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path):
    """Return ``(ModelConfig, state_dict)`` from a VIMO file."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, cfg_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}", 12) from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (offset,) = r.unpack("<Q")
        entries.append((name, shape, offset))
    (plen,) = r.unpack("<Q")
    start = r.pos
    payload = r.take(plen)
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(payload):
        raise FormatError("checkpoint payload checksum mismatch", start)
    state = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) * 8
        if offset + n > plen:
            raise FormatError(f"entry {name} overruns payload", start + offset)
        state[name] = np.frombuffer(payload, dtype="<f8", count=n // 8,
                                    offset=offset).reshape(shape).astype(np.float64)
    return config, state


def load_model(path) -> ViMoE:
    config, state = load_checkpoint(path)
    model = build(config)
    model.load_state_dict(state)
    return model
