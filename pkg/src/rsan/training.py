"""Binary cross-entropy training with Adam and the two-phase learning rate.

The schedule is epoch-level: ``lr_phase1`` for the first ``phase1_epochs``,
``lr_phase2`` afterwards. Each epoch shuffles with its own seeded stream,
steps over mini-batches, then records an eval-mode validation loss; the best
validation snapshot is retained. Validation never touches parameters, batch
statistics, or the training RNG streams, so a run with validation disabled
produces the identical trajectory.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .data import Sample, split_samples
from .errors import ConfigError, DivergenceError, GradientMissingError, ShapeError
from .network import Network, state_records
from .tensor import Tensor, accumulate_grad, backward, no_grad, record_op


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the reference protocol."""

    batch_size: int = 2
    total_epochs: int = 200
    phase1_epochs: int = 150
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_count: int = 2

    def __post_init__(self):
        if self.phase1_epochs > self.total_epochs:
            raise ConfigError(
                f"phase1_epochs {self.phase1_epochs} exceeds total_epochs {self.total_epochs}")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.validation_count < 0:
            raise ConfigError("validation_count must be >= 0")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch index."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return cfg.lr_phase1 if epoch < cfg.phase1_epochs else cfg.lr_phase2


def bce_loss(pred: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy over all pixels.

    Predictions are clamped to [eps, 1-eps] before the logs; the clamp has
    zero gradient outside that band.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss target must contain only {0, 1}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    per_pixel = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    out = np.asarray(per_pixel.mean(dtype=np.float64), dtype=pred.data.dtype)

    def backward_fn(g):
        inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)
        grad = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) * (float(g) / p.size)
        accumulate_grad(pred, grad.astype(pred.data.dtype, copy=False))

    return record_op(out, (pred,), backward_fn)


class AdamState:
    """Per-parameter first/second moment buffers and the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise GradientMissingError(f"parameter {p.name or '<unnamed>'} has no gradient")
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float  # nan when validation is disabled


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    best_state: list | None = None  # (name, array copy) records at the best epoch


def _stack_batch(samples, dtype=np.float32):
    x = Tensor(np.stack([s.image for s in samples]).astype(dtype, copy=False))
    y = Tensor(np.stack([s.mask for s in samples]).astype(dtype, copy=False))
    return x, y


def evaluate_bce(net: Network, samples, batch_size: int = 4) -> float:
    """Eval-mode mean BCE over samples; records no graph, mutates nothing."""
    total = 0.0
    count = 0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x, y = _stack_batch(chunk)
            pred = net.forward(x, "eval")
            loss = bce_loss(pred, y)
            total += float(loss.data) * len(chunk)
            count += len(chunk)
    return total / count


def train(net: Network, samples: list[Sample], cfg: TrainConfig,
          callbacks=(), val_samples=None) -> TrainResult:
    """Run the full training loop; returns history plus the best-val snapshot.

    With ``val_samples=None`` a validation set of ``cfg.validation_count``
    images is split off ``samples``; passing an explicit list (possibly empty)
    trains on ``samples`` unsplit and validates on the given images.
    """
    if not samples:
        raise ConfigError("empty training dataset")
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_ss, drop_ss, split_seed_ss = ss.spawn(3)
    if val_samples is not None:
        train_samples, val_samples = list(samples), list(val_samples)
    elif cfg.validation_count > 0:
        split_seed = int(split_seed_ss.generate_state(1)[0])
        train_samples, val_samples = split_samples(samples, split_seed, cfg.validation_count)
    else:
        train_samples, val_samples = list(samples), []
    if cfg.batch_size > len(train_samples):
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds training set size {len(train_samples)}")

    shuffle_rng = np.random.default_rng(shuffle_ss)
    net.rng = np.random.default_rng(drop_ss)
    params = net.parameters
    state = AdamState(params)
    result = TrainResult()

    for epoch in range(cfg.total_epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(len(train_samples))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            x, y = _stack_batch(batch)
            pred = net.forward(x, "train")
            loss = bce_loss(pred, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss {value} at epoch {epoch}")
            zero_grads(params)
            backward(loss)
            adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            batch_losses.append(value)
        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate_bce(net, val_samples) if val_samples else float("nan")
        stats = EpochStats(epoch, lr, train_loss, val_loss)
        result.history.append(stats)
        if val_samples and (result.best_val_loss is None or val_loss < result.best_val_loss):
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_state = [(name, arr.copy()) for name, arr in state_records(net)]
        for cb in callbacks:
            cb(stats)
    return result


def loss_history_csv(history) -> str:
    """CSV with header epoch,phase_lr,train_loss,val_loss; floats at 6 decimals."""
    buf = io.StringIO()
    buf.write("epoch,phase_lr,train_loss,val_loss\n")
    for s in history:
        buf.write(f"{s.epoch},{s.lr:.6f},{s.train_loss:.6f},{s.val_loss:.6f}\n")
    return buf.getvalue()


def write_loss_history(history, path) -> None:
    with open(path, "w") as f:
        f.write(loss_history_csv(history))
