"""Joint optimization of the five alignment losses over the projection heads."""

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, ParseError, ShapeError
from .features import HEAD_NAMES, ProjectionHead, SistaModel, encode
from .instance import (InstanceLossConfig, SemanticMatrix, build_semantic_matrix, sia_aug_loss,
                       sia_loss, sila_loss, siva_loss)
from .sta import StaConfig, sta_loss

log = logging.getLogger(__name__)

LOSS_NAMES = ("sia", "sia_aug", "siva", "sila", "sta")
METRICS_COLUMNS = ("epoch", "split") + LOSS_NAMES + ("total", "lr")
CHECKPOINT_MAGIC = "SISTA-CHECKPOINT v1"


@dataclass(frozen=True)
class LossToggles:
    sia: bool = True
    sia_aug: bool = True
    siva: bool = True
    sila: bool = True
    sta: bool = True

    def enabled(self):
        return tuple(name for name in LOSS_NAMES if getattr(self, name))


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loss-selection settings.

    The defaults are the toy preset (larger learning rate than the full-scale
    preset because the heads are tiny); see :meth:`paper`.
    """

    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1e-2
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    init_lr: float = 1e-8
    temperature: float = 0.2
    toggles: LossToggles = field(default_factory=LossToggles)
    early_stop_patience: int = 5
    seed: int = 0
    soft_labels: bool = True
    val_fraction: float = 0.1
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        # zero rates are allowed: they freeze the model
        if self.base_lr < 0 or self.init_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be nonnegative")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be nonnegative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not self.toggles.enabled():
            raise ConfigError("at least one loss must be enabled")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @classmethod
    def paper(cls, **overrides):
        """Pre-training hyperparameters reported for the full-scale run."""
        values = dict(epochs=50, batch_size=256, base_lr=2e-5, weight_decay=0.05,
                      warmup_epochs=10, init_lr=1e-8, temperature=0.2, early_stop_patience=5)
        values.update(overrides)
        return cls(**values)

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class LossBreakdown:
    sia: float = 0.0
    sia_aug: float = 0.0
    siva: float = 0.0
    sila: float = 0.0
    sta: float = 0.0
    total: float = 0.0

    def components(self):
        return [getattr(self, name) for name in LOSS_NAMES]

    @classmethod
    def mean(cls, items):
        n = float(len(items))
        return cls(**{
            name: sum(getattr(b, name) for b in items) / n for name in LOSS_NAMES + ("total",)
        })


def lr_at(step, total_steps, cfg, steps_per_epoch=1):
    """Linear warmup from ``init_lr`` to ``base_lr``, then cosine decay back to ``init_lr``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    lo, hi = cfg.init_lr, cfg.base_lr
    if step < warmup:
        return lo + (hi - lo) * step / warmup
    if total_steps == warmup:
        return hi
    progress = (step - warmup) / (total_steps - warmup)
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.step, {k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()})


def adamw_step(params, grads, state, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update. Returns new (params, state)."""
    beta1, beta2 = betas
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p = p * (1.0 - lr * weight_decay)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def _loss_configs(cfg, loss_cfg, sta_cfg):
    loss_cfg = dataclasses.replace(loss_cfg or InstanceLossConfig(), temperature=cfg.temperature)
    sta_cfg = dataclasses.replace(sta_cfg or StaConfig(), temperature=cfg.temperature)
    return loss_cfg, sta_cfg


def compute_losses(model, instances, cfg, loss_cfg=None, sta_cfg=None, params=None):
    """Evaluate the enabled losses on one batch.

    Returns ``(breakdown, total)`` where ``total`` is a tensor (tracked if
    ``params`` holds tape variables).
    """
    loss_cfg, sta_cfg = _loss_configs(cfg, loss_cfg, sta_cfg)
    batch = encode(model, instances, params)
    if cfg.soft_labels:
        semantic = build_semantic_matrix(batch.report_global.value, loss_cfg)
    else:
        semantic = SemanticMatrix.identity(len(instances))
    fns = {
        "sia": lambda: sia_loss(batch.image_global, batch.report_global, semantic, cfg=loss_cfg),
        "sia_aug": lambda: sia_aug_loss(batch.image_global_aug, batch.report_global_aug, semantic,
                                        cfg=loss_cfg),
        "siva": lambda: siva_loss(batch.image_global, batch.image_global_aug, semantic, cfg=loss_cfg),
        "sila": lambda: sila_loss(batch.report_global, batch.report_global_aug, semantic,
                                  cfg=loss_cfg),
        "sta": lambda: sta_loss(batch.pairs, sta_cfg),
    }
    breakdown = LossBreakdown()
    total = None
    for name in cfg.toggles.enabled():
        term = fns[name]()
        setattr(breakdown, name, term.item())
        total = term if total is None else total + term
    breakdown.total = total.item()
    return breakdown, total


def batches(indices, batch_size):
    """Consecutive chunks; a trailing partial chunk of one item is dropped."""
    out = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    if len(out) > 1 and len(out[-1]) < min(2, batch_size):
        out.pop()
    return out


def split_indices(n, cfg):
    rng = np.random.default_rng([cfg.seed, 1])
    perm = rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    if n - n_val < 1:
        raise ConfigError("validation split leaves no training instances")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_losses(model, instances, cfg, loss_cfg=None, sta_cfg=None):
    """Mean loss breakdown over fixed-order batches (no gradients)."""
    idx = np.arange(len(instances))
    results = [
        compute_losses(model, [instances[i] for i in chunk], cfg, loss_cfg, sta_cfg)[0]
        for chunk in batches(idx, cfg.batch_size)
    ]
    return LossBreakdown.mean(results)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    sia: float
    sia_aug: float
    siva: float
    sila: float
    sta: float
    total: float
    lr: float

    @classmethod
    def from_breakdown(cls, epoch, split, b, lr):
        return cls(epoch, split, b.sia, b.sia_aug, b.siva, b.sila, b.sta, b.total, lr)


@dataclass
class TrainResult:
    model: SistaModel
    final_model: SistaModel
    state: AdamState
    step: int
    metrics: list
    step_log: list
    best_epoch: int
    stopped_early: bool
    train_indices: np.ndarray
    val_indices: np.ndarray


def train(corpus, model, cfg, loss_cfg=None, sta_cfg=None):
    """Train ``model`` in place on ``corpus``; returns a :class:`TrainResult`.

    ``model`` ends at the last step; ``result.model`` is the copy with the best
    validation total (the last model when there is no validation split).
    """
    if not corpus:
        raise ConfigError("cannot train on an empty corpus")
    train_idx, val_idx = split_indices(len(corpus), cfg)
    train_set = [corpus[i] for i in train_idx]
    val_set = [corpus[i] for i in val_idx]
    steps_per_epoch = len(batches(np.arange(len(train_set)), cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    order_rng = np.random.default_rng([cfg.seed, 2])

    state = AdamState()
    step = 0
    metrics, step_log = [], []
    best_total, best_epoch, bad_epochs = math.inf, 0, 0
    best = (model.copy(), state.copy(), step)
    stopped_early = False

    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_set)) if cfg.shuffle else np.arange(len(train_set))
        epoch_log = []
        lr = cfg.init_lr
        for chunk in batches(order, cfg.batch_size):
            lr = lr_at(step, total_steps, cfg, steps_per_epoch)
            tape = ad.Tape()
            current = model.named_params()
            variables = {name: tape.variable(value) for name, value in current.items()}
            breakdown, total = compute_losses(model, [train_set[i] for i in chunk], cfg,
                                              loss_cfg, sta_cfg, variables)
            grads = tape.backward(total)
            new_params, state = adamw_step(current, {k: grads[v] for k, v in variables.items()},
                                           state, lr, cfg.weight_decay)
            model.load_params(new_params)
            epoch_log.append(breakdown)
            step += 1
        step_log.extend(epoch_log)
        metrics.append(MetricsRow.from_breakdown(epoch, "train", LossBreakdown.mean(epoch_log), lr))

        if not val_set:
            best = (model.copy(), state.copy(), step)
            best_epoch = epoch
            continue
        val = evaluate_losses(model, val_set, cfg, loss_cfg, sta_cfg)
        metrics.append(MetricsRow.from_breakdown(epoch, "val", val, lr))
        log.info("epoch %d train %.4f val %.4f lr %.3g", epoch, metrics[-2].total, val.total, lr)
        if val.total < best_total:
            best_total, best_epoch, bad_epochs = val.total, epoch, 0
            best = (model.copy(), state.copy(), step)
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                stopped_early = True
                break

    best_model, best_state, best_step = best
    return TrainResult(best_model, model, best_state, best_step, metrics, step_log,
                       best_epoch, stopped_early, train_idx, val_idx)


# --- metrics CSV -------------------------------------------------------------

def write_metrics(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([r.epoch, r.split] + [repr(float(getattr(r, c))) for c in METRICS_COLUMNS[2:]])


def read_metrics(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise ParseError("metrics header does not match expected columns", 1)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_COLUMNS):
                raise ParseError(f"expected {len(METRICS_COLUMNS)} fields", lineno)
            try:
                rows.append(MetricsRow(int(rec[0]), rec[1], *(float(x) for x in rec[2:])))
            except ValueError:
                raise ParseError("malformed metrics value", lineno) from None
    return rows


# --- checkpoint --------------------------------------------------------------

def _matrix_lines(kind, name, arr):
    arr = np.atleast_2d(arr)
    lines = [f"{kind} {name} {arr.shape[0]} {arr.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in arr]
    return lines


def write_checkpoint(path, model, state=None, step=0):
    """Head parameters, AdamW moments and the step counter as versioned text."""
    state = state or AdamState()
    params = model.named_params()
    lines = [CHECKPOINT_MAGIC, f"step {int(step)}", f"adam_step {int(state.step)}",
             f"tensors {len(params) + len(state.m) + len(state.v)}"]
    for name, arr in params.items():
        lines += _matrix_lines("param", name, arr)
    for name in params:
        if name in state.m:
            lines += _matrix_lines("m", name, state.m[name])
            lines += _matrix_lines("v", name, state.v[name])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Returns ``(model, state, step)``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def nxt(what):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {what}", pos + 1)
        pos += 1
        return lines[pos - 1]

    def keyed_int(key):
        parts = nxt(key).split(" ")
        if len(parts) != 2 or parts[0] != key:
            raise ParseError(f"expected '{key} <int>'", pos)
        try:
            return int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer value for '{key}'", pos) from None

    if nxt("header") != CHECKPOINT_MAGIC:
        raise ParseError(f"missing '{CHECKPOINT_MAGIC}' header", 1)
    step = keyed_int("step")
    adam_step = keyed_int("adam_step")
    count = keyed_int("tensors")
    tensors = {"param": {}, "m": {}, "v": {}}
    for _ in range(count):
        head = nxt("tensor header").split(" ")
        if len(head) != 4 or head[0] not in tensors:
            raise ParseError("malformed tensor header", pos)
        try:
            rows, cols = int(head[2]), int(head[3])
        except ValueError:
            raise ParseError("non-integer tensor shape", pos) from None
        data = []
        for _ in range(rows):
            parts = nxt("tensor row").split(" ")
            if len(parts) != cols:
                raise ParseError(f"expected {cols} values", pos)
            try:
                data.append([float(x) for x in parts])
            except ValueError:
                raise ParseError("non-numeric tensor entry", pos) from None
        tensors[head[0]][head[1]] = np.array(data, dtype=np.float64).reshape(rows, cols)
    if pos != len(lines):
        raise ParseError("trailing content after last tensor", pos + 1)

    heads = {}
    for h in HEAD_NAMES:
        try:
            heads[h] = ProjectionHead({k: tensors["param"][f"{h}.{k}"] for k in ProjectionHead.param_names})
        except KeyError as exc:
            raise ParseError(f"missing parameter {exc.args[0]}") from None
    state = AdamState(adam_step, tensors["m"], tensors["v"])
    return SistaModel(heads), state, step
