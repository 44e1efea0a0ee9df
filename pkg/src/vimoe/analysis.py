"""Routing forensics: logs, class-by-expert heatmaps, loads, layer recommendation.

Layers are addressed at this boundary by their reporting index ``l``,
where ``l = 1`` is the deepest block and ``l = depth`` the shallowest.
Records store the internal block index; :meth:`RoutingLog.block_of` and
:meth:`RoutingLog.layer_of` convert.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .counting import routing_degree
from .errors import ContractError, FormatError

# Fixed 16-colour palette for allocation maps, indexed by expert id.
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (0, 0, 0),
], dtype=np.uint8)

_MODE_TAGS = {"image": 0, "token": 1}


def record_dtype(num_experts: int, top_k: int) -> np.dtype:
    return np.dtype([
        ("layer", "<i4"), ("item", "<i8"), ("token", "<i4"), ("label", "<i4"),
        ("selected", "<i4", (top_k,)), ("probs", "<f8", (num_experts,)),
    ])


class RoutingLog:
    """Per-layer gate decisions collected during evaluation.

    Records are ``(layer, item, token, label, selected[k], probs[N])`` where
    ``layer`` is the internal block index, ``token`` is -1 for image-level
    routing and ``label`` is -1 when the unit has no class (e.g. [CLS]).
    """

    def __init__(self, num_experts: int, top_k: int, depth: int, num_classes: int,
                 routing_mode: str, grid: int = 0, model_hash: str = "",
                 dataset_hash: str = "", records: Optional[np.ndarray] = None):
        if routing_mode not in _MODE_TAGS:
            raise ContractError(f"unknown routing_mode {routing_mode!r}")
        self.num_experts = num_experts
        self.top_k = top_k
        self.depth = depth
        self.num_classes = num_classes
        self.routing_mode = routing_mode
        self.grid = grid
        self.model_hash = model_hash
        self.dataset_hash = dataset_hash
        self.dtype = record_dtype(num_experts, top_k)
        self._chunks = [] if records is None else [records.astype(self.dtype)]
        self._cache = None

    @classmethod
    def empty(cls, cfg, ds=None) -> "RoutingLog":
        return cls(cfg.num_experts, cfg.top_k, cfg.depth, cfg.num_classes,
                   cfg.routing_mode, cfg.image_size // cfg.patch_size,
                   cfg.config_hash(), ds.fingerprint() if ds is not None else "")

    # -- building ------------------------------------------------------------
    def add(self, layer: int, item: int, token: int, label: int, selected, probs):
        rec = np.zeros(1, dtype=self.dtype)
        rec["layer"], rec["item"], rec["token"], rec["label"] = layer, item, token, label
        rec["selected"][0] = np.atleast_1d(selected)
        rec["probs"][0] = probs
        self._append(rec)

    def add_batch(self, block: int, item_ids, decision, targets, cfg):
        """Append one forward batch of gate decisions for ``block``.

        ``targets`` are the batch's image labels (image routing) or
        ``(B, T-1)`` patch labels (token routing).
        """
        item_ids = np.asarray(item_ids)
        probs = decision.probs.data
        u = probs.shape[0]
        rec = np.zeros(u, dtype=self.dtype)
        rec["layer"] = block
        rec["selected"] = decision.selected
        rec["probs"] = probs
        if self.routing_mode == "image":
            rec["item"] = item_ids
            rec["token"] = -1
            rec["label"] = targets if np.ndim(targets) == 1 else -1
        else:
            b = len(item_ids)
            t = u // b
            rec["item"] = np.repeat(item_ids, t)
            rec["token"] = np.tile(np.arange(t), b)
            labels = np.full((b, t), -1, dtype=np.int64)
            if np.ndim(targets) == 2:
                labels[:, 1:] = targets
            rec["label"] = labels.reshape(-1)
        self._append(rec)

    def _append(self, rec):
        self._chunks.append(rec)
        self._cache = None

    @property
    def records(self) -> np.ndarray:
        if self._cache is None:
            self._cache = (np.concatenate(self._chunks) if self._chunks
                           else np.zeros(0, dtype=self.dtype))
            self._chunks = [self._cache]
        return self._cache

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, RoutingLog):
            return NotImplemented
        return (self.header() == other.header()
                and self.records.tobytes() == other.records.tobytes())

    def header(self) -> tuple:
        return (self.num_experts, self.top_k, self.depth, self.num_classes,
                self.routing_mode, self.grid, self.model_hash, self.dataset_hash)

    # -- addressing ----------------------------------------------------------
    @property
    def blocks(self) -> list:
        return sorted(int(b) for b in np.unique(self.records["layer"]))

    @property
    def layers(self) -> list:
        """Reporting indices present, deepest (1) first."""
        return sorted(self.layer_of(b) for b in self.blocks)

    def layer_of(self, block: int) -> int:
        return self.depth - block

    def block_of(self, layer: int) -> int:
        return self.depth - layer

    def for_layer(self, layer: int) -> np.ndarray:
        """Records of reporting layer ``layer`` in log order."""
        block = self.block_of(layer)
        recs = self.records
        sel = recs[recs["layer"] == block]
        if sel.size == 0:
            raise ContractError(
                f"layer l={layer} (block {block}) is not an MoE layer in this log; "
                f"available: {self.layers}")
        return sel

    # -- persistence ---------------------------------------------------------
    # Layout (little-endian):
    #   b"VIMR" | u32 version | u32 N | u32 k | u32 depth | u32 num_classes
    #   | u8 routing mode | u32 grid | 16s model hash | 16s dataset hash
    #   | u64 record count | records (packed, dtype above) | u32 crc32(records)
    _HEADER = struct.Struct("<4sIIIIIBI16s16sQ")
    MAGIC = b"VIMR"
    VERSION = 1

    def to_bytes(self) -> bytes:
        recs = self.records
        body = recs.tobytes()
        head = self._HEADER.pack(self.MAGIC, self.VERSION, self.num_experts, self.top_k,
                                 self.depth, self.num_classes, _MODE_TAGS[self.routing_mode],
                                 self.grid, self.model_hash.encode()[:16],
                                 self.dataset_hash.encode()[:16], len(recs))
        return head + body + struct.pack("<I", zlib.crc32(body))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RoutingLog":
        h = cls._HEADER
        if len(blob) < h.size:
            raise FormatError("truncated routing log header", len(blob))
        (magic, version, n, k, depth, ncls, mode, grid,
         mhash, dhash, count) = h.unpack_from(blob)
        if magic != cls.MAGIC:
            raise FormatError("bad routing log magic", 0)
        if version != cls.VERSION:
            raise FormatError(f"unsupported routing log version {version}", 4)
        modes = {v: m for m, v in _MODE_TAGS.items()}
        if mode not in modes:
            raise FormatError(f"unknown routing mode tag {mode}", 24)
        if n < 1 or not 1 <= k <= n:
            raise FormatError(f"invalid expert counts N={n}, k={k}", 8)
        dtype = record_dtype(n, k)
        end = h.size + count * dtype.itemsize
        if len(blob) < end + 4:
            raise FormatError("truncated routing log records", len(blob))
        body = blob[h.size:end]
        (crc,) = struct.unpack_from("<I", blob, end)
        if crc != zlib.crc32(body):
            raise FormatError("routing log checksum mismatch", h.size)
        if len(blob) != end + 4:
            raise FormatError("trailing bytes after routing log", end + 4)
        recs = np.frombuffer(body, dtype=dtype, count=count).copy()
        return cls(n, k, depth, ncls, modes[mode], grid,
                   mhash.rstrip(b"\0").decode(), dhash.rstrip(b"\0").decode(), recs)

    @classmethod
    def load(cls, path) -> "RoutingLog":
        return cls.from_bytes(Path(path).read_bytes())


# -- load statistics -------------------------------------------------------------

def expert_load(log: RoutingLog, layer: int) -> np.ndarray:
    """Fraction of routing units whose top-1 expert is e (all units, [CLS] included)."""
    recs = log.for_layer(layer)
    counts = np.bincount(recs["selected"][:, 0], minlength=log.num_experts)
    return counts / len(recs)


def balance_terms(log: RoutingLog, layer: int):
    """``(f, P)`` of the balancing loss recomputed from the logged probabilities."""
    recs = log.for_layer(layer)
    probs = np.ascontiguousarray(recs["probs"])
    t = len(recs)
    f = np.bincount(np.argmax(probs, axis=1), minlength=log.num_experts) / t
    P = probs.sum(axis=0) / t
    return f, P


def aux_loss_from_log(log: RoutingLog, alpha: float) -> float:
    """Sum over logged layers (shallow to deep) of ``alpha * N * f . P``."""
    total = 0.0
    for block in log.blocks:
        f, P = balance_terms(log, log.layer_of(block))
        total += float((P * f).sum() * (alpha * log.num_experts))
    return total


# -- heatmaps --------------------------------------------------------------------

@dataclass
class Heatmap:
    """Class-by-expert fractions of top-1 assignments for one layer.

    ``matrix`` is in raw class/expert order; ``row_order`` and ``col_order``
    give the display permutation.  Classes without samples are zero rows.
    """

    matrix: np.ndarray
    counts: np.ndarray
    row_order: np.ndarray
    col_order: np.ndarray
    layer: int
    block: int

    @property
    def num_experts(self) -> int:
        return self.matrix.shape[1]

    def display(self) -> np.ndarray:
        return self.matrix[self.row_order][:, self.col_order]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# layer", self.layer])
            w.writerow(["# block", self.block])
            w.writerow(["# row_order"] + [int(i) for i in self.row_order])
            w.writerow(["# col_order"] + [int(i) for i in self.col_order])
            w.writerow(["# counts"] + [int(c) for c in self.counts])
            w.writerow(["class"] + [f"e{e}" for e in range(self.num_experts)])
            for c, row in enumerate(self.matrix):
                w.writerow([c] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "Heatmap":
        meta, rows = {}, []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if row[0].startswith("#"):
                    meta[row[0][2:]] = [int(x) for x in row[1:]]
                elif row[0] != "class":
                    rows.append([float(x) for x in row[1:]])
        return cls(np.array(rows), np.array(meta["counts"]), np.array(meta["row_order"]),
                   np.array(meta["col_order"]), meta["layer"][0], meta["block"][0])


def reorder(matrix: np.ndarray, counts: np.ndarray):
    """Readability permutation.

    Columns by total load, heaviest first; rows grouped by the display
    position of their argmax expert, strongest first within a group; empty
    classes last.  Ties keep index order.
    """
    col_order = np.argsort(-matrix.sum(axis=0), kind="stable")
    pos = np.empty_like(col_order)
    pos[col_order] = np.arange(len(col_order))
    group = pos[np.argmax(matrix, axis=1)]
    empty = counts == 0
    row_order = np.lexsort((np.arange(len(matrix)), -matrix.max(axis=1), group, empty))
    return row_order, col_order


def build_heatmap(log: RoutingLog, layer: int, labels=None) -> Heatmap:
    """Heatmap of reporting layer ``layer``.

    Records labelled -1 (the [CLS] token under token routing) are skipped.
    ``labels`` optionally overrides record labels: an array indexed by item
    (image routing) or by ``(item, token - 1)`` (token routing).
    """
    recs = log.for_layer(layer)
    lab = recs["label"].astype(np.int64)
    if labels is not None:
        labels = np.asarray(labels)
        if log.routing_mode == "image":
            lab = labels[recs["item"]]
        else:
            tok = recs["token"]
            lab = np.where(tok > 0, labels.reshape(labels.shape[0], -1)[recs["item"], np.maximum(tok - 1, 0)], -1)
    keep = lab >= 0
    top1 = recs["selected"][keep, 0]
    lab = lab[keep]
    hist = np.zeros((log.num_classes, log.num_experts), dtype=np.int64)
    np.add.at(hist, (lab, top1), 1)
    counts = hist.sum(axis=1)
    matrix = np.divide(hist, counts[:, None], out=np.zeros(hist.shape),
                       where=counts[:, None] > 0)
    row_order, col_order = reorder(matrix, counts)
    return Heatmap(matrix, counts, row_order, col_order, layer, log.block_of(layer))


def specialization_score(h) -> float:
    """Mean over non-empty classes of ``(max_e H[c,e] - 1/N) / (1 - 1/N)``."""
    matrix = h.matrix if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float64)
    n = matrix.shape[1]
    if n < 2:
        raise ContractError("specialization is undefined for a single expert")
    rows = matrix[matrix.sum(axis=1) > 0]
    if len(rows) == 0:
        raise ContractError("heatmap has no non-empty rows")
    u = 1.0 / n
    return float(np.mean((rows.max(axis=1) - u) / (1.0 - u)))


# -- layer recommendation --------------------------------------------------------

@dataclass
class LayerReport:
    layer: int
    score: float
    load: Optional[np.ndarray] = None
    keep: bool = False
    degree: int = 1


@dataclass
class Recommendation:
    keep: list                     # reporting indices kept, deepest first
    degree: int
    num_experts: int
    top_k: int
    low_degree: bool = False
    note: str = ""
    reports: list = field(default_factory=list)

    @property
    def moe_last_L(self) -> int:
        return len(self.keep)


def recommend_layers(reports, num_experts: int, top_k: int = 1,
                     threshold: float = 0.5, min_degree: int = 32) -> Recommendation:
    """Keep the longest run of deepest layers whose score reaches ``threshold``.

    ``reports`` is a list of :class:`LayerReport` or a mapping from
    reporting index to score.  An empty keep set means a dense model.
    """
    if isinstance(reports, dict):
        reports = [LayerReport(int(l), float(s)) for l, s in reports.items()]
    reports = sorted(reports, key=lambda r: r.layer)
    keep = []
    for expected, rep in enumerate(reports, start=1):
        if rep.layer != expected or rep.score < threshold:
            break
        keep.append(rep.layer)
    degree = routing_degree(num_experts, top_k, len(keep))
    for rep in reports:
        rep.keep = rep.layer in keep
        rep.degree = degree
    rec = Recommendation(keep, degree, num_experts, top_k, reports=reports)
    if keep and degree < min_degree:
        rec.low_degree = True
        need = next((n for n in range(num_experts + 1, 4096)
                     if routing_degree(n, top_k, len(keep)) >= min_degree), None)
        rec.note = (f"routing degree {degree} < {min_degree}; "
                    f"consider N >= {need} experts for {len(keep)} layer(s)")
    elif not keep:
        rec.note = "no layer reaches the threshold; a dense model is recommended"
    return rec


def layer_reports(log: RoutingLog, threshold: float = 0.5) -> Recommendation:
    """Score every logged layer and recommend a keep set."""
    reports = []
    for layer in log.layers:
        h = build_heatmap(log, layer)
        reports.append(LayerReport(layer, specialization_score(h), expert_load(log, layer)))
    return recommend_layers(reports, log.num_experts, log.top_k, threshold)


# -- degree and allocation maps --------------------------------------------------

def empirical_degree(log: RoutingLog, layers=None) -> int:
    """Distinct per-image expert tuples across ``layers`` (default: all logged)."""
    if log.routing_mode != "image":
        raise ContractError("empirical_degree needs an image-routing log")
    layers = log.layers if layers is None else list(layers)
    if not layers:
        return 1
    per_item = {}
    for layer in layers:
        recs = log.for_layer(layer)
        for item, sel in zip(recs["item"].tolist(), recs["selected"].tolist()):
            per_item.setdefault(item, {})[layer] = tuple(sorted(sel))
    combos = {tuple(d.get(l) for l in layers) for d in per_item.values()}
    return len(combos)


def allocation_map(log: RoutingLog, image_id: int, layer: int) -> np.ndarray:
    """``(g, g)`` grid of top-1 expert ids for the patch tokens of one image."""
    if log.routing_mode != "token":
        raise ContractError("allocation maps need a token-routing log")
    recs = log.for_layer(layer)
    recs = recs[(recs["item"] == image_id) & (recs["token"] > 0)]
    g = log.grid
    if len(recs) != g * g:
        raise ContractError(
            f"image {image_id} has {len(recs)} patch records at l={layer}, expected {g * g}")
    grid = np.full(g * g, -1, dtype=np.int64)
    grid[recs["token"] - 1] = recs["selected"][:, 0]
    return grid.reshape(g, g)


def to_ppm(grid: np.ndarray, scale: int = 1, palette: np.ndarray = PALETTE) -> bytes:
    """Binary PPM (P6) with each grid cell a ``scale``-pixel square of its palette colour."""
    grid = np.asarray(grid)
    if grid.max() >= len(palette):
        raise ContractError(f"expert id {grid.max()} exceeds the {len(palette)}-colour palette")
    rgb = palette[grid]
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes()
