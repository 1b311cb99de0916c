"""Loss, Adam, learning-rate schedule, early stopping, splitting,
oversampling and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from decimal import Decimal
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .metrics import Metrics, classification_metrics
from .model import Model, save_checkpoint
from .tensor import Tape, Tensor, add, backward, scale, sum_squares

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_acc", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    lam: float = 5e-4
    batch_size: int = 8
    max_epochs: int = 60
    early_stop_threshold: float = 1e-3
    early_stop_window: int = 5
    oversample_target: int | None = None
    split_ratio: tuple[int, int] = (4, 1)
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # Ring inputs only: draw each sample's arc start at random every epoch.
    random_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "split_ratio", tuple(self.split_ratio))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.initial_lr <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ValueError("learning-rate settings must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.early_stop_threshold <= 0 or self.early_stop_window < 1:
            raise ValueError("early-stop threshold must be positive and window >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        d["adam_betas"] = list(self.adam_betas)
        return d


# --------------------------------------------------------------------------
# Loss and optimizer
# --------------------------------------------------------------------------


def loss_total(logits: Tensor, labels, weights: Sequence[Tensor], lam: float, m: int | None = None) -> Tensor:
    """Mean cross-entropy plus ``lam / (2 m) * sum(w**2)``.

    ``m`` defaults to the number of elements in ``weights``.
    """
    ce = ops.cross_entropy(logits, labels)
    if lam == 0 or not weights:
        return ce
    if m is None:
        m = sum(w.size for w in weights)
    if m <= 0:
        raise ValueError("m must be positive")
    reg = sum_squares(weights[0])
    for w in weights[1:]:
        reg = add(reg, sum_squares(w))
    return add(ce, scale(reg, lam / (2.0 * m)))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied in place. Missing gradients count as zero."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer state must have equal length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState.zeros_like(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Step schedule: divide by ``lr_decay_factor`` every ``lr_decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    drops = epoch // config.lr_decay_every
    # Decimal arithmetic so 1e-4 / 10 is exactly the float 1e-5.
    lr = Decimal(repr(config.initial_lr)) / Decimal(repr(config.lr_decay_factor)) ** drops
    return float(lr)


def early_stop(val_losses: Sequence[float], threshold: float, window: int = 5) -> bool:
    """True when the last ``window`` relative drops
    ``(L[i-1] - L[i]) / L[i]`` are all below ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    losses = [float(x) for x in val_losses]
    if any(x <= 0 or not math.isfinite(x) for x in losses):
        raise ValueError("validation losses must be finite and positive")
    if len(losses) < window + 1:
        return False
    tail = losses[-(window + 1) :]
    return all((a - b) / b < threshold for a, b in zip(tail[:-1], tail[1:]))


# --------------------------------------------------------------------------
# Dataset plumbing
# --------------------------------------------------------------------------


def _by_class(labels: Sequence) -> dict:
    groups = defaultdict(list)
    for i, y in enumerate(labels):
        groups[y].append(i)
    return dict(sorted(groups.items(), key=lambda kv: str(kv[0])))


def split_train_val(items: Sequence, labels: Sequence, ratio=(4, 1), seed: int = 0, stratified: bool = True):
    """Seeded train/validation partition at ``ratio``.

    Returns ``(train_items, train_labels, val_items, val_labels)``. With
    stratification every class is split separately (at least one item
    lands on each side).
    """
    if len(items) != len(labels):
        raise ValueError("items and labels differ in length")
    a, b = ratio
    frac = a / (a + b)
    rng = np.random.default_rng(seed)
    if stratified:
        train_idx, val_idx = [], []
        for y, idx in _by_class(labels).items():
            if len(idx) < a + b:
                raise ValueError(f"class {y!r} has {len(idx)} items; stratified split needs >= {a + b}")
            perm = [idx[i] for i in rng.permutation(len(idx))]
            cut = int(round(len(idx) * frac))
            train_idx += perm[:cut]
            val_idx += perm[cut:]
        train_idx.sort()
        val_idx.sort()
        train_idx = [train_idx[i] for i in rng.permutation(len(train_idx))]
        val_idx = [val_idx[i] for i in rng.permutation(len(val_idx))]
    else:
        perm = rng.permutation(len(items)).tolist()
        cut = int(round(len(items) * frac))
        train_idx, val_idx = perm[:cut], perm[cut:]
    pick = lambda idx, seq: [seq[i] for i in idx]  # noqa: E731
    return pick(train_idx, items), pick(train_idx, labels), pick(val_idx, items), pick(val_idx, labels)


def oversample(items: Sequence, labels: Sequence, target_per_class: int, seed: int = 0):
    """Pad every class below ``target_per_class`` by resampling its own
    members uniformly with replacement. Larger classes are left alone.

    Returned lists hold the original objects (duplicates are references).
    """
    if len(items) != len(labels):
        raise ValueError("items and labels differ in length")
    groups = _by_class(labels)
    if not groups:
        raise ValueError("cannot oversample an empty dataset")
    rng = np.random.default_rng(seed)
    out_items, out_labels = list(items), list(labels)
    for y, idx in groups.items():
        short = target_per_class - len(idx)
        if short <= 0:
            continue
        for j in rng.integers(0, len(idx), size=short):
            out_items.append(items[idx[j]])
            out_labels.append(y)
    return out_items, out_labels


def class_counts(labels: Sequence) -> dict:
    return {y: len(idx) for y, idx in _by_class(labels).items()}


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float
    wall_ms: float


@dataclass
class TrainResult:
    model: Model
    metrics: Metrics
    log: list[EpochLog] = field(default_factory=list)
    checkpoint_checksum: str | None = None

    @property
    def final_val_loss(self) -> float:
        return self.log[-1].val_loss


def _stack(cubes: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(c, dtype=np.float64) for c in cubes])


@dataclass(frozen=True)
class RingWindow:
    """Cuts ``n_views`` contiguous views, ``step`` ring slots apart, from
    full-ring cubes ``[3, R, H, W]``."""

    n_views: int
    step: int = 1

    def indices(self, ring_len: int, start: int) -> np.ndarray:
        if self.n_views * self.step > ring_len:
            raise ValueError(f"{self.n_views} views x step {self.step} exceed a ring of {ring_len}")
        return (start + self.step * np.arange(self.n_views)) % ring_len

    def cut(self, cube: np.ndarray, start: int = 0) -> np.ndarray:
        return cube[:, self.indices(cube.shape[1], start)]


def batch_loss(model: Model, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    logits = model.forward(x)
    return float(loss_total(logits, y, model.regularized(), lam).data)


def _eval_loss_acc(model: Model, cubes, labels, lam: float, batch_size: int) -> tuple[float, float]:
    total, correct = 0.0, 0
    n = len(cubes)
    for start in range(0, n, batch_size):
        xb = _stack(cubes[start : start + batch_size])
        yb = np.asarray(labels[start : start + batch_size])
        logits = model.forward(xb)
        total += float(ops.cross_entropy(logits, yb).data) * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    reg = 0.0
    if lam:
        ws = model.regularized()
        reg = lam / (2.0 * sum(w.size for w in ws)) * sum(float(np.vdot(w.data, w.data)) for w in ws)
    return total / n + reg, correct / n


def train(
    model: Model,
    cubes: Sequence[np.ndarray],
    labels: Sequence[int],
    config: TrainConfig = TrainConfig(),
    out_dir=None,
    val: tuple[Sequence[np.ndarray], Sequence[int]] | None = None,
    window: RingWindow | None = None,
) -> TrainResult:
    """Fit ``model`` in place on ``cubes`` (each ``[3, N, H, W]``) with integer labels.

    The data is split 4:1 into train/validation unless ``val`` is given;
    only the training part is oversampled. With ``window``, ``cubes`` are
    full rings and each sample is cut to the model's view count (arc start
    0, or random per sample and epoch with ``config.random_start``).
    Stops on the validation-loss
    plateau rule or after ``max_epochs``; the last epoch's parameters are
    kept. With ``out_dir``, writes ``model.ckpt``, ``train_log.csv`` and
    ``metrics.json``.
    """
    n_views = model.config.n_views
    if window is not None and window.n_views != n_views:
        raise ValueError(f"window cuts {window.n_views} views, model expects N={n_views}")
    for c in cubes[:1]:
        if window is None and np.shape(c)[1] != n_views:
            raise ValueError(f"dataset has N={np.shape(c)[1]} views, model expects N={n_views}")
    if val is None:
        tr_x, tr_y, va_x, va_y = split_train_val(list(cubes), list(labels), config.split_ratio, config.seed)
    else:
        tr_x, tr_y = list(cubes), list(labels)
        va_x, va_y = list(val[0]), list(val[1])
    if config.oversample_target:
        tr_x, tr_y = oversample(tr_x, tr_y, config.oversample_target, config.seed)
    if window is not None:
        va_x = [window.cut(c) for c in va_x]

    rng = np.random.default_rng(config.seed)
    params = model.requires_grad_(True).parameters()
    weights = model.regularized()
    m = sum(w.size for w in weights)
    opt = Adam(params, config.adam_betas, config.adam_eps)
    tr_y_arr = np.asarray(tr_y, dtype=np.int64)
    log: list[EpochLog] = []
    val_losses: list[float] = []

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        order = rng.permutation(len(tr_x))
        run_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if window is None:
                xb = _stack([tr_x[i] for i in idx])
            else:
                starts = rng.integers(0, 1 << 30, size=len(idx)) if config.random_start else np.zeros(len(idx), int)
                xb = _stack([window.cut(tr_x[i], int(st) % tr_x[i].shape[1]) for i, st in zip(idx, starts)])
            yb = tr_y_arr[idx]
            opt.zero_grad()
            with Tape() as tape:
                logits = model.forward(xb, training=True, rng=rng)
                loss = loss_total(logits, yb, weights, config.lam, m)
            backward(tape, loss)
            opt.step(lr)
            run_loss += float(loss.data) * len(idx)
        val_loss, val_acc = _eval_loss_acc(model, va_x, va_y, config.lam, config.batch_size)
        entry = EpochLog(epoch, lr, run_loss / len(order), val_loss, val_acc, (time.perf_counter() - t0) * 1e3)
        log.append(entry)
        val_losses.append(val_loss)
        logger.info("epoch %d lr %.1e train %.4f val %.4f acc %.3f", epoch, lr, entry.train_loss, val_loss, val_acc)
        if early_stop(val_losses, config.early_stop_threshold, config.early_stop_window):
            break
    model.requires_grad_(False)
    for p in params:
        p.grad = None

    metrics = evaluate(model, va_x, va_y, batch_size=config.batch_size)
    metrics.train_loss_curve = [e.train_loss for e in log]
    metrics.val_loss_curve = [e.val_loss for e in log]
    result = TrainResult(model, metrics, log)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_checksum = save_checkpoint(model, out / "model.ckpt")
        write_log_csv(log, out / "train_log.csv")
        (out / "metrics.json").write_text(metrics.to_json())
    return result


def write_log_csv(log: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for e in log:
            writer.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_loss), repr(e.val_acc), f"{e.wall_ms:.1f}"])


def predict(model: Model, cubes: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    preds = []
    for start in range(0, len(cubes), batch_size):
        preds.append(model.forward(_stack(cubes[start : start + batch_size])).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, cubes: Sequence[np.ndarray], labels: Sequence[int], batch_size: int = 8, class_names=None) -> Metrics:
    """Argmax-of-logits accuracy, overall and per class."""
    if len(cubes) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    preds = predict(model, cubes, batch_size)
    names = class_names if class_names is not None else list(range(model.config.n_classes))
    return classification_metrics(np.asarray(labels), preds, names)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
