"""Dice loss, Adam, plateau decay, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .data import Split
from .layers import Context, softmax_channels
from .metrics import ConfusionMatrix, predict_classes
from .model import DDUNet
from .partition import PartitionLayout
from .runtime import Runtime, RuntimePlan
from .tensor import Parameter, Tensor, make_op, no_grad

log = logging.getLogger(__name__)

DICE_EPS = 1e-7
METRICS_HEADER = ("epoch", "train_loss", "val_loss", "val_miou", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.008
    max_epochs: int = 40
    early_stop_patience: int = 8
    lr_patience: int = 3
    lr_factor: float = 2.0
    min_stop_epoch: int = 20
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    loss: str = "dice"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {sorted(LOSSES)}")
        if self.early_stop_patience <= 0 or self.lr_patience <= 0:
            raise ValueError("patience values must be positive")
        if self.lr_factor <= 1:
            raise ValueError("lr decay factor must exceed 1")
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("batch size and epoch count must be positive")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------
def one_hot(mask: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(n, H, W) class ids -> (n, K, H, W) indicator array."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"mask values must lie in [0, {num_classes})")
    return (mask[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def dice_loss(logits: Tensor, mask: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - 2 (sum y*p + eps) / (sum y + sum p + eps) over all pixels and classes.

    ``p`` is the channel softmax of ``logits``; ``y`` the one-hot mask.
    """
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("non-finite logits reached the loss")
    y = one_hot(mask, logits.shape[1], logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"mask shape {np.shape(mask)} does not match logits {logits.shape}")
    probs = softmax_channels(logits)
    overlap = (probs * Tensor(y)).sum()
    total = probs.sum() + float(y.sum()) + eps
    return 1.0 - 2.0 * (overlap + eps) / total


def class_dice_loss(logits: Tensor, mask: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean_k 2 (sum_p y*p + eps) / (sum_p y + sum_p p + eps): dice per class, then averaged.

    Opt-in alternative to :func:`dice_loss`. With one-hot targets the pooled
    form reduces to one minus the mean true-class probability, which lets a
    rare class be ignored; averaging per-class ratios weights classes equally.
    """
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("non-finite logits reached the loss")
    y = one_hot(mask, logits.shape[1], logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"mask shape {np.shape(mask)} does not match logits {logits.shape}")
    probs = softmax_channels(logits)
    s = probs.data
    axes = (0, 2, 3)
    inter = (y * s).sum(axis=axes, keepdims=True) + eps
    denom = y.sum(axis=axes, keepdims=True) + s.sum(axis=axes, keepdims=True) + eps
    K = s.shape[1]
    value = 1.0 - float(np.mean(2.0 * inter / denom))

    def backward(g):
        d = (2.0 * y / denom - 2.0 * inter / denom**2) * (-1.0 / K)
        return ((g * d).astype(s.dtype),)

    return make_op(np.array([value], dtype=s.dtype), (probs,), backward, "class_dice")


LOSSES = {"dice": dice_loss, "class_dice": class_dice_loss}


# ---------------------------------------------------------------------------
# optimizer and schedules
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: list[Parameter], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update using each parameter's ``grad``."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.path or id(p))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[p.path or id(p)]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[p.path or id(p)] = m
        state.v[p.path or id(p)] = v
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, *self.betas, self.eps)


class PlateauScheduler:
    """Divide the lr by ``factor`` after ``patience`` epochs without strict improvement."""

    def __init__(self, lr: float, patience: int = 3, factor: float = 2.0):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    """Stop once ``patience`` epochs pass without improvement, never before ``min_epoch``."""

    def __init__(self, patience: int = 8, min_epoch: int = 20):
        self.patience = patience
        self.min_epoch = min_epoch
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience and epoch >= self.min_epoch


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def predict_logits(runtime: Runtime, images: np.ndarray, layout: PartitionLayout, batch_size: int = 16):
    """Eval-mode logits, one batch at a time."""
    with no_grad():
        for b in batches(len(images), batch_size):
            yield b, runtime.run_forward(Tensor(images[b]), layout, Context(training=False)).data


def evaluate(runtime: Runtime, split: Split, layout: PartitionLayout, batch_size: int = 16, loss: str = "dice"):
    """(mean loss, confusion matrix) over a split, on stitched full-size predictions."""
    cm = ConfusionMatrix(runtime.model.config.num_classes)
    loss_fn = LOSSES[loss]
    total = 0.0
    for b, logits in predict_logits(runtime, split.images, layout, batch_size):
        total += loss_fn(Tensor(logits), split.masks[b]).item() * len(b)
        cm.accumulate(predict_classes(logits), split.masks[b])
    return total / len(split), cm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainingRecord:
    rows: list[tuple] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    best_state: list[np.ndarray] | None = None
    stopped_early: bool = False
    step_log: list[tuple[int, float, int]] = field(default_factory=list)

    @property
    def train_losses(self) -> list[float]:
        return [r[1] for r in self.rows]


def snapshot(model: DDUNet) -> list[np.ndarray]:
    return [a.copy() for _, a in io.state_arrays(model)]


def restore(model: DDUNet, state: list[np.ndarray]) -> None:
    for (_, owner, attr), arr in zip(model.named_state(), state):
        value = getattr(owner, attr)
        if isinstance(value, np.ndarray):
            setattr(owner, attr, arr.copy())
        else:
            value.data[...] = arr


def fit(model: DDUNet, plan: RuntimePlan, train: Split, val: Split, layout: PartitionLayout,
        config: TrainConfig, out_dir: str | Path | None = None, progress=None) -> TrainingRecord:
    """Train with dice loss and Adam; keeps the lowest-validation-loss weights.

    With ``out_dir`` writes ``metrics.csv``, ``best.ckpt`` and ``run.log``.
    The model is left holding the best weights.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    record = TrainingRecord()
    opt = Adam(model.parameters(), config.lr, (config.beta1, config.beta2), config.adam_eps)
    sched = PlateauScheduler(config.lr, config.lr_patience, config.lr_factor)
    stopper = EarlyStopping(config.early_stop_patience, config.min_stop_epoch)
    shuffle = np.random.default_rng([config.seed, 1])
    loss_fn = LOSSES[config.loss]
    step = 0
    run_log = open(out / "run.log", "w") if out is not None else None
    try:
        with Runtime(model, plan) as runtime:
            for epoch in range(1, config.max_epochs + 1):
                lr = opt.lr
                total, seen = 0.0, 0
                for b in batches(len(train), config.batch_size, shuffle.permutation(len(train))):
                    step += 1
                    model.zero_grads()
                    ctx = Context(training=True, seed=(config.seed, 2, step))
                    logits = runtime.run_forward(Tensor(train.images[b]), layout, ctx)
                    loss = loss_fn(logits, train.masks[b])
                    runtime.run_backward(loss)
                    opt.step()
                    runtime.broadcast_weights()
                    value = loss.item()
                    total += value * len(b)
                    seen += len(b)
                    record.step_log.append((step, value, runtime.comm_values_sent))
                    if run_log is not None:
                        run_log.write(f"step={step} loss={value!r} comm_values_sent={runtime.comm_values_sent}\n")
                val_loss, cm = evaluate(runtime, val, layout, config.batch_size, config.loss)
                row = (epoch, total / seen, val_loss, cm.mean_iou(), lr)
                record.rows.append(row)
                if progress is not None:
                    progress(row)
                log.info("epoch %d train %.5f val %.5f miou %.4f lr %g", *row)
                if val_loss < record.best_val_loss:
                    record.best_val_loss = val_loss
                    record.best_epoch = epoch
                    record.best_state = snapshot(model)
                opt.lr = sched.step(val_loss)
                if stopper.step(epoch, val_loss):
                    record.stopped_early = True
                    break
    finally:
        if run_log is not None:
            run_log.close()
    if record.best_state is not None:
        restore(model, record.best_state)
    if out is not None:
        io.write_csv(out / "metrics.csv", METRICS_HEADER, record.rows)
        io.save_checkpoint(model, out / "best.ckpt")
    return record
