"""Fine-tuning loop: AdamW with layer-wise lr decay, warmup + cosine, layer scans."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .analysis import RoutingLog
from .data import Dataset, batches, patch_majority_label
from .errors import ConfigError, NumericError, VimoeError
from .model import ModelConfig, ViMoE, build, param_block_index, save_checkpoint
from .moe import AuxLossAccumulator, load_balance_loss

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    peak_lr: float = 1e-3
    weight_decay: float = 0.05
    layer_decay: float = 0.65
    warmup_epochs: float = 1.0
    seed: int = 0
    alpha: Optional[float] = None  # None keeps the model's alpha
    eval_every: int = 1
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0 < self.layer_decay <= 1:
            raise ConfigError("layer_decay must lie in (0, 1]")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_config_file(text: str):
    """Split ``key=value`` lines into (ModelConfig, TrainConfig).

    Blank lines and ``#`` comments are skipped; every other key must name a
    ModelConfig or TrainConfig field.  Values are parsed as bool, int, float
    or string in that order.  ``alpha`` goes to the model.
    """
    model_keys = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name: f for f in dataclasses.fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parsed = _parse_value(value)
        if key in model_keys:
            model_kw[key] = parsed
        elif key in train_keys:
            train_kw[key] = parsed
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return ModelConfig.from_dict(model_kw), TrainConfig.from_dict(train_kw)


def _parse_value(v: str):
    low = v.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays_weight(name: str, p) -> bool:
    """Matrices decay; biases, norms, [CLS] and positions do not."""
    return p.ndim >= 2 and name not in ("pos_embed", "cls_token")


def layer_lr_scales(model: ViMoE, layer_decay: float) -> dict:
    """Per-parameter lr multiplier ``layer_decay ** (depth - 1 - block)``.

    Embeddings sit one level below block 0; head, final norm and gates get 1.
    """
    depth = model.config.depth
    out = {}
    for name, _ in model.named_parameters():
        b = param_block_index(name, depth)
        if b is None or ".gate." in name:
            out[name] = 1.0
        else:
            out[name] = layer_decay ** (depth - 1 - b)
    return out


def adamw_step(params, grads: dict, state: AdamWState, lr_per_param: dict,
               weight_decay: float, betas=BETAS, eps: float = ADAM_EPS):
    """One in-place AdamW update with decoupled weight decay.

    ``params`` is a sequence of ``(name, Tensor)``; ``grads`` maps name to
    gradient array (missing means zero).
    """
    for name, _ in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        lr = lr_per_param[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data
        if weight_decay and decays_weight(name, p):
            data = data * (1.0 - lr * weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * progress))


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the norm."""
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# -- evaluation ------------------------------------------------------------------

def targets_for(model: ViMoE, ds: Dataset) -> np.ndarray:
    """Training targets: image labels, or patch-majority labels for segmentation."""
    if ds.task != model.config.task:
        raise ConfigError(f"model task {model.config.task} does not match dataset task {ds.task}")
    if ds.task == "classification":
        return ds.labels
    grid = patch_majority_label(ds.labels, model.config.patch_size)
    return grid.reshape(len(ds), -1)


def mean_iou(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    ious = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.logical_or(p, t).sum()
        if union:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


@dataclass
class EvalResult:
    metric: float
    loss: float
    accumulators: dict          # block index -> AuxLossAccumulator
    routing_log: Optional[RoutingLog]

    def aux_loss(self) -> float:
        return float(sum(load_balance_loss(a).item() for a in self.accumulators.values()))

    def expert_loads(self) -> dict:
        return {b: a.f for b, a in self.accumulators.items()}


def evaluate(model: ViMoE, ds: Dataset, batch_size: int = 128,
             with_log: bool = True) -> EvalResult:
    """Metric, loss and routing statistics over ``ds`` in index order."""
    cfg = model.config
    targets = targets_for(model, ds)
    accs = {b: AuxLossAccumulator(layer.num_experts, layer.alpha)
            for b, layer in model.moe_layers()}
    rlog = RoutingLog.empty(cfg, ds) if with_log and accs else None
    correct, losses, preds = 0, [], []
    for idx in batches(len(ds), batch_size):
        res = model.forward(ds.images[idx])
        y = targets[idx]
        losses.append(nx.cross_entropy(res.logits, y).item() * len(idx))
        pred = np.argmax(res.logits.data, axis=-1)
        if cfg.task == "classification":
            correct += int((pred == y).sum())
        else:
            preds.append(pred)
        for r in res.routing:
            accs[r.block].add(r.decision.probs)
            if rlog is not None:
                rlog.add_batch(r.block, idx, r.decision, y, cfg)
    n = len(ds)
    if cfg.task == "classification":
        metric = correct / n
    else:
        metric = mean_iou(np.concatenate(preds), targets, cfg.num_classes)
    return EvalResult(metric, float(sum(losses) / n), accs, rlog)


# -- training --------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    epochs: list = field(default_factory=list)
    task_loss: list = field(default_factory=list)
    aux_loss: list = field(default_factory=list)
    eval_aux_loss: list = field(default_factory=list)
    metric: list = field(default_factory=list)
    expert_load: list = field(default_factory=list)    # per epoch: {block: f vector}
    routing_logs: list = field(default_factory=list)   # per epoch, when kept
    status: str = "ok"

    @property
    def final_metric(self) -> float:
        return self.metric[-1] if self.metric else float("nan")

    def to_csv(self, path, depth: int):
        blocks = sorted({b for loads in self.expert_load for b in loads})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "task_loss", "aux_loss", "eval_aux_loss", "metric"]
                       + [f"load_l{depth - b}" for b in blocks])
            for i, ep in enumerate(self.epochs):
                loads = self.expert_load[i]
                w.writerow([ep, repr(self.task_loss[i]), repr(self.aux_loss[i]),
                            repr(self.eval_aux_loss[i]), repr(self.metric[i])]
                           + [";".join(repr(float(x)) for x in loads[b]) for b in blocks])


def train(model: ViMoE, train_set: Dataset, cfg: TrainConfig,
          eval_set: Optional[Dataset] = None, out_dir=None,
          keep_logs: bool = False) -> RunRecord:
    """Train in place; returns the per-epoch record.

    With ``out_dir`` the final checkpoint (``model.vimo``), the record
    (``run.csv``) and one routing log per evaluated epoch
    (``routing_eNNN.vimr``) are written there.  A non-finite loss or
    gradient raises :class:`NumericError` carrying the partial record as
    ``.record``.
    """
    if cfg.alpha is not None:
        for _, layer in model.moe_layers():
            layer.alpha = cfg.alpha
    eval_set = eval_set if eval_set is not None else train_set
    targets = targets_for(model, train_set)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    named = model.named_parameters()
    scales = layer_lr_scales(model, cfg.layer_decay)
    state = AdamWState()
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    record = RunRecord(model.config.config_hash())
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            task_sum, aux_sum, seen = 0.0, 0.0, 0
            for idx in batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
                with nx.Tape() as tape:
                    res = model.forward(train_set.images[idx])
                    task = nx.cross_entropy(res.logits, targets[idx])
                    auxes = res.aux_losses()
                    loss = task
                    for aux in auxes:
                        loss = loss + aux
                    if not np.isfinite(loss.item()):
                        raise NumericError(f"loss became non-finite at epoch {epoch}")
                    model.zero_grad()
                    tape.backward(loss)
                grads = {name: p.grad for name, p in named if p.grad is not None}
                for name, g in grads.items():
                    if not np.all(np.isfinite(g)):
                        raise NumericError(f"non-finite gradient for parameter {name}")
                clip_grads(grads, cfg.clip_norm)
                lr = lr_at(step, total_steps, warmup, cfg.peak_lr)
                adamw_step(named, grads, state,
                           {name: lr * s for name, s in scales.items()}, cfg.weight_decay)
                step += 1
                task_sum += task.item() * len(idx)
                aux_sum += sum(a.item() for a in auxes) * len(idx)
                seen += len(idx)
            if epoch % cfg.eval_every and epoch != cfg.epochs:
                continue
            ev = evaluate(model, eval_set, with_log=keep_logs or out is not None)
            record.epochs.append(epoch)
            record.task_loss.append(task_sum / seen)
            record.aux_loss.append(aux_sum / seen)
            record.eval_aux_loss.append(ev.aux_loss())
            record.metric.append(ev.metric)
            record.expert_load.append(ev.expert_loads())
            if ev.routing_log is not None:
                if keep_logs:
                    record.routing_logs.append(ev.routing_log)
                if out is not None:
                    ev.routing_log.save(out / f"routing_e{epoch:03d}.vimr")
            log.info("epoch %d task %.4f aux %.5f metric %.4f",
                     epoch, task_sum / seen, aux_sum / seen, ev.metric)
    except NumericError as exc:
        record.status = "diverged"
        exc.record = record
        if out is not None:
            record.to_csv(out / "run.csv", model.config.depth)
        raise
    if out is not None:
        save_checkpoint(out / "model.vimo", model)
        record.to_csv(out / "run.csv", model.config.depth)
    return record


# -- layer scanning --------------------------------------------------------------

@dataclass
class ScanCell:
    num_experts: int
    moe_last_L: int
    shared_expert: bool
    seed: int
    metric: float
    status: str = "ok"
    record: Optional[RunRecord] = None


def scan_grid(L_values, N_values, shared_values):
    """Distinct (N, L, shared) cells; L=0 collapses to one dense baseline."""
    cells = []
    for L in L_values:
        if L == 0:
            if (0, 0, False) not in cells:
                cells.append((0, 0, False))
            continue
        for n in N_values:
            for s in shared_values:
                cells.append((n, L, bool(s)))
    return cells


def layer_scan(base_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset,
               eval_set: Dataset, L_values, N_values=(4,), shared_values=(False, True),
               seeds=(0,), keep_records: bool = False, keep_logs: bool = False) -> list:
    """One deterministic run per (N, L, shared, seed); failures are recorded, not raised.

    ``keep_records`` attaches each RunRecord to its cell; ``keep_logs``
    additionally keeps the per-epoch routing logs inside those records.
    """
    out = []
    for n, L, shared in scan_grid(L_values, N_values, shared_values):
        for seed in seeds:
            mcfg = base_cfg.replace(moe_last_L=L, shared_expert=shared,
                                    num_experts=n if L else base_cfg.num_experts)
            try:
                model = build(mcfg, seed=seed)
                rec = train(model, train_set, train_cfg.replace(seed=seed), eval_set,
                            keep_logs=keep_records and keep_logs)
                cell = ScanCell(n, L, shared, seed, rec.final_metric)
                if keep_records:
                    cell.record = rec
            except VimoeError as exc:
                log.warning("scan cell N=%d L=%d shared=%s seed=%d failed: %s",
                            n, L, shared, seed, exc)
                cell = ScanCell(n, L, shared, seed, float("nan"), status="failed")
            out.append(cell)
    return out


def write_scan_csv(path, cells):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "L", "shared", "seed", "metric", "status"])
        for c in cells:
            w.writerow([c.num_experts, c.moe_last_L, int(c.shared_expert), c.seed,
                        repr(c.metric), c.status])
