"""Deterministic synthetic image datasets and the VIMD container.

Every random draw comes from a generator keyed by (seed, split stream,
item index, field), so an item does not depend on how many items were
generated before it, and train/test splits never share a stream.

Class signatures are oriented sinusoidal gratings with a class-specific
frequency, orientation and channel mix.  Classification items carry one
grating at a random phase and contrast; segmentation items tile the image
with rectangular regions, each filled with its class's grating on top of a
class-specific mean colour.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

TASK_TAGS = {"classification": 0, "segmentation": 1}
SPLIT_STREAMS = {"train": 1, "test": 2, "val": 3}

_F_SIGNATURE, _F_PHASE, _F_CONTRAST, _F_NOISE, _F_LAYOUT = range(5)


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 28
    channels: int = 3
    noise: float = 0.3
    split: str = "train"
    signature_seed: int = 0
    min_regions: int = 2
    max_regions: int = 4
    min_region_size: int = 4

    def __post_init__(self):
        if self.split not in SPLIT_STREAMS:
            raise ConfigError(f"unknown split {self.split!r}")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ConfigError("need 1 <= min_regions <= max_regions")


@dataclass
class Dataset:
    images: np.ndarray          # (M, C, H, W) float64, exactly f32-representable
    labels: np.ndarray          # (M,) or (M, H, W) int64
    num_classes: int
    task: str = "classification"
    split: str = "train"

    def __post_init__(self):
        if self.task not in TASK_TAGS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels outside [0, num_classes)")

    def __len__(self):
        return self.images.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.task == other.task and self.num_classes == other.num_classes
                and self.split == other.split
                and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       self.task, self.split)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.images.astype("<f4").tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        return h.hexdigest()[:16]


def _rng(seed: int, stream: int, index: int, fld: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index, fld])


def class_signature(c: int, num_classes: int, signature_seed: int = 0, channels: int = 3):
    """Grating parameters ``(cycles, angle, channel_weights)`` of class ``c``.

    Orientations are spread evenly over half a turn with a small keyed
    jitter; frequencies alternate between two bands so neighbouring
    orientations also differ in scale.
    """
    rng = _rng(signature_seed, 0, c, _F_SIGNATURE)
    angle = np.pi * c / num_classes + rng.uniform(-0.1, 0.1) * np.pi / num_classes
    cycles = (2.5 if c % 2 == 0 else 4.0) + rng.uniform(-0.25, 0.25)
    w = rng.normal(size=channels)
    w = np.abs(w) + 0.5
    w /= np.linalg.norm(w)
    return cycles, angle, w * np.sqrt(channels)


def class_color(c: int, signature_seed: int = 0, channels: int = 3) -> np.ndarray:
    """Mean colour of class ``c`` in segmentation images."""
    if channels == 3 and c < 8:
        bits = np.array([(c >> i) & 1 for i in range(3)], dtype=np.float64)
        return 0.8 * (2.0 * bits - 1.0)
    return _rng(signature_seed, 0, c, _F_LAYOUT).uniform(-0.8, 0.8, channels)


def grating(c: int, num_classes: int, size: int, phase: float, cfg: SyntheticConfig):
    """``(C, size, size)`` unit-contrast grating of class ``c``."""
    cycles, angle, w = class_signature(c, num_classes, cfg.signature_seed, cfg.channels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = (xx * np.cos(angle) + yy * np.sin(angle)) / size
    wave = np.cos(2.0 * np.pi * cycles * proj + phase)
    return w[:, None, None] * wave[None]


def _to_f32_grid(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32).astype(np.float64)


def gen_cluster_classification(num_classes: int, M: int, seed: int,
                               cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Balanced classification set: item i has class ``i % num_classes``."""
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    stream = SPLIT_STREAMS[cfg.split]
    s = cfg.image_size
    images = np.empty((M, cfg.channels, s, s))
    labels = np.arange(M, dtype=np.int64) % num_classes
    for i in range(M):
        phase = _rng(seed, stream, i, _F_PHASE).uniform(0.0, 2.0 * np.pi)
        contrast = _rng(seed, stream, i, _F_CONTRAST).uniform(0.8, 1.2)
        img = contrast * grating(int(labels[i]), num_classes, s, phase, cfg)
        if cfg.noise > 0:
            img = img + cfg.noise * _rng(seed, stream, i, _F_NOISE).normal(size=img.shape)
        images[i] = img
    return Dataset(_to_f32_grid(images), labels, num_classes, "classification", cfg.split)


def _partition(rng: np.random.Generator, size: int, n_regions: int, min_size: int):
    """Split the square into ``n_regions`` axis-aligned rectangles (y0, y1, x0, x1)."""
    rects = [(0, size, 0, size)]
    while len(rects) < n_regions:
        order = sorted(range(len(rects)),
                       key=lambda j: -(rects[j][1] - rects[j][0]) * (rects[j][3] - rects[j][2]))
        split_done = False
        for j in order:
            y0, y1, x0, x1 = rects[j]
            axes = [a for a, ext in ((0, y1 - y0), (1, x1 - x0)) if ext >= 2 * min_size]
            if not axes:
                continue
            axis = axes[int(rng.integers(len(axes)))]
            lo, hi = (y0, y1) if axis == 0 else (x0, x1)
            cut = int(rng.integers(lo + min_size, hi - min_size + 1))
            if axis == 0:
                parts = [(y0, cut, x0, x1), (cut, y1, x0, x1)]
            else:
                parts = [(y0, y1, x0, cut), (y0, y1, cut, x1)]
            rects[j:j + 1] = parts
            split_done = True
            break
        if not split_done:
            break
    return rects


def gen_region_segmentation(num_classes: int, M: int, seed: int,
                            cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Images tiled by 2-4 rectangles (configurable), each one class's texture."""
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    stream = SPLIT_STREAMS[cfg.split]
    s = cfg.image_size
    images = np.empty((M, cfg.channels, s, s))
    labels = np.empty((M, s, s), dtype=np.int64)
    for i in range(M):
        rng = _rng(seed, stream, i, _F_LAYOUT)
        n = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
        rects = _partition(rng, s, n, cfg.min_region_size)
        classes = rng.choice(num_classes, size=len(rects), replace=len(rects) > num_classes)
        phases = _rng(seed, stream, i, _F_PHASE).uniform(0.0, 2.0 * np.pi, len(rects))
        img = np.empty((cfg.channels, s, s))
        for (y0, y1, x0, x1), c, ph in zip(rects, classes, phases):
            tex = class_color(int(c), cfg.signature_seed, cfg.channels)[:, None, None] \
                + 0.3 * grating(int(c), num_classes, s, ph, cfg)
            img[:, y0:y1, x0:x1] = tex[:, y0:y1, x0:x1]
            labels[i, y0:y1, x0:x1] = c
        if cfg.noise > 0:
            img = img + cfg.noise * _rng(seed, stream, i, _F_NOISE).normal(size=img.shape)
        images[i] = img
    return Dataset(_to_f32_grid(images), labels, num_classes, "segmentation", cfg.split)


def patch_majority_label(label_map, patch_size: int) -> np.ndarray:
    """Modal class of each ``patch_size`` square; ties go to the smaller class."""
    label_map = np.asarray(label_map)
    *lead, h, w = label_map.shape
    if h % patch_size or w % patch_size:
        raise ContractError(
            f"label map {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    blocks = label_map.reshape(*lead, gh, patch_size, gw, patch_size)
    nl = len(lead)
    blocks = blocks.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3)
    blocks = blocks.reshape(*lead, gh, gw, patch_size * patch_size)
    n_cls = int(label_map.max()) + 1 if label_map.size else 1
    counts = (blocks[..., None] == np.arange(n_cls)).sum(axis=-2)
    return np.argmax(counts, axis=-1)


def template_classify(images: np.ndarray, num_classes: int,
                      cfg: SyntheticConfig = SyntheticConfig()) -> np.ndarray:
    """Nearest class signature by phase-invariant (quadrature) template energy."""
    s = images.shape[-1]
    flat = images.reshape(len(images), -1)
    energy = np.empty((len(images), num_classes))
    for c in range(num_classes):
        cos_t = grating(c, num_classes, s, 0.0, cfg).reshape(-1)
        sin_t = grating(c, num_classes, s, -np.pi / 2, cfg).reshape(-1)
        energy[:, c] = (flat @ cos_t) ** 2 + (flat @ sin_t) ** 2
    return np.argmax(energy, axis=1)


def template_segment(images: np.ndarray, num_classes: int,
                     cfg: SyntheticConfig = SyntheticConfig(), window: int = 3) -> np.ndarray:
    """Per-pixel nearest class colour after a ``window`` box blur."""
    from scipy.ndimage import uniform_filter
    blurred = uniform_filter(images, size=(1, 1, window, window), mode="nearest")
    colors = np.stack([class_color(c, cfg.signature_seed, images.shape[1])
                       for c in range(num_classes)])
    d = ((blurred[:, None] - colors[None, :, :, None, None]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def batches(n: int, batch_size: int, seed: int | None = None, epoch: int = 0):
    """Index batches over ``range(n)``; shuffled by a stream keyed on (seed, epoch)."""
    order = np.arange(n)
    if seed is not None:
        order = np.random.default_rng([seed, 0x5348, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


# -- VIMD container ------------------------------------------------------------
#
# Layout (little-endian):
#   b"VIMD" | u32 version | u8 task tag | u8 split stream
#   | u32 M, C, H, W, num_classes | u32 crc32(images + labels)
#   | f32 images[M*C*H*W] | u16 labels[M] or labels[M*H*W]

DATA_MAGIC = b"VIMD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIBB5II")
_SPLITS_BY_STREAM = {v: k for k, v in SPLIT_STREAMS.items()}


def save_dataset(path, ds: Dataset):
    m = len(ds)
    if m < 1:
        raise ContractError("refusing to save an empty dataset")
    _, c, h, w = ds.images.shape
    img = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    lab = np.ascontiguousarray(ds.labels, dtype="<u2").tobytes()
    crc = zlib.crc32(lab, zlib.crc32(img))
    header = _HEADER.pack(DATA_MAGIC, DATA_VERSION, TASK_TAGS[ds.task],
                          SPLIT_STREAMS[ds.split], m, c, h, w, ds.num_classes, crc)
    Path(path).write_bytes(header + img + lab)


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated dataset header", len(blob))
    magic, version, tag, stream, m, c, h, w, ncls, crc = _HEADER.unpack_from(blob)
    if magic != DATA_MAGIC:
        raise FormatError("bad dataset magic", 0)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    tasks = {v: k for k, v in TASK_TAGS.items()}
    if tag not in tasks:
        raise FormatError(f"unknown task tag {tag}", 8)
    if stream not in _SPLITS_BY_STREAM:
        raise FormatError(f"unknown split stream {stream}", 9)
    task = tasks[tag]
    n_img = m * c * h * w
    n_lab = m if task == "classification" else m * h * w
    start = _HEADER.size
    end = start + 4 * n_img + 2 * n_lab
    if len(blob) < end:
        raise FormatError("truncated dataset payload", len(blob))
    if len(blob) > end:
        raise FormatError("trailing bytes after dataset payload", end)
    body = blob[start:end]
    if zlib.crc32(body) != crc:
        raise FormatError("dataset checksum mismatch", start)
    images = np.frombuffer(body, dtype="<f4", count=n_img).astype(np.float64)
    labels = np.frombuffer(body, dtype="<u2", count=n_lab, offset=4 * n_img).astype(np.int64)
    shape = (m,) if task == "classification" else (m, h, w)
    try:
        return Dataset(images.reshape(m, c, h, w), labels.reshape(shape), ncls,
                       task, _SPLITS_BY_STREAM[stream])
    except ContractError as exc:
        raise FormatError(str(exc), start + 4 * n_img) from exc
