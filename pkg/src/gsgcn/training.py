"""Focal loss, SGD with a multistep schedule, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .model import GSGCN, ModelParams
from .skeleton import SampleSet

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    weight_decay: float = 5e-4
    initial_lr: float = 0.05
    lr_decay_factor: float = 0.1
    lr_milestones: tuple[int, ...] = (100, 200, 300, 400)
    gamma: float = 2.0
    momentum: float = 0.9
    max_epochs: int = 500
    seed: int = 0
    plateau_window: int = 20
    plateau_min_delta: float = 1e-4
    checkpoint_every: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if self.initial_lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning rate and decay factor must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.gamma < 0:
            raise ValueError("momentum must lie in [0, 1); weight_decay and gamma must be >= 0")
        if self.max_epochs < 0 or self.plateau_window < 0 or self.checkpoint_every < 0:
            raise ValueError("max_epochs, plateau_window and checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- loss


def focal_loss(probabilities, true_class, gamma: float = 2.0) -> Tensor:
    """``-(1 - p_t)^gamma * log(p_t)``, averaged over the batch.

    ``probabilities`` is (num_classes,) or (N, num_classes); ``true_class`` an
    int or (N,) ints. Probabilities are clamped to [1e-7, 1] before the log.
    """
    p = probabilities if isinstance(probabilities, Tensor) else Tensor(probabilities)
    single = p.ndim == 1
    if single:
        p = p.reshape(1, p.shape[0])
    labels = np.atleast_1d(np.asarray(true_class))
    N, C = p.shape
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= C)):
        raise IndexError(f"true class out of range 0..{C - 1}: {labels.tolist()}")
    sums = p.data.astype(np.float64).sum(axis=1)
    if np.any(np.abs(sums - 1) > 1e-4):
        raise ValueError(f"probabilities must sum to 1 (got {sums.min():.6f}..{sums.max():.6f})")
    onehot = np.zeros((N, C))
    onehot[np.arange(N), labels] = 1
    pt = ad.clip(ad.sum_(p * Tensor(onehot), axes=1), PROB_FLOOR, 1.0)
    per = -(ad.power(1.0 - pt, gamma) * ad.log(pt))
    return ad.mean(per)


def cross_entropy(probabilities: np.ndarray, true_class: int) -> float:
    return -math.log(max(float(probabilities[true_class]), PROB_FLOOR))


# ---------------------------------------------------------------- optimizer


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule, computed in decimal so 0.05 * 0.1**2 is exactly 5e-4 rather than 5.000000000000001e-4."""
    passed = sum(1 for m in config.lr_milestones if m <= epoch)
    return float(Decimal(repr(config.initial_lr)) * Decimal(repr(config.lr_decay_factor)) ** passed)


def decays(name: str) -> bool:
    """Residual adjacency masks are excluded from weight decay."""
    return not name.endswith(".mask")


def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
    momentum: float,
    buffers: dict[str, np.ndarray],
) -> None:
    """One momentum-SGD update; replaces each learnable tensor with a new one."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r}")
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        w = t.data
        if g.shape != w.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {w.shape}")
        dt = w.dtype.type
        if weight_decay and decays(name):
            g = g + dt(weight_decay) * w
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(w)
        buf = dt(momentum) * buf + g
        buffers[name] = buf
        params[name] = Tensor(w - dt(lr) * buf, requires_grad=True, name=name, dtype=w.dtype)


# ---------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    accuracy: float

    def line(self) -> str:
        return f"epoch={self.epoch} lr={self.lr:.6g} loss={self.loss:.6f} acc={self.accuracy:.4f}"


@dataclass
class TrainState:
    params: ModelParams
    epoch: int = 0  # number of completed epochs
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch permutation; a pure function of (seed, epoch) so resumed runs replay it."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model: GSGCN,
    data: SampleSet,
    params: ModelParams,
    config: TrainConfig,
    callbacks: Sequence[Callable[[EpochRecord, TrainState], bool | None]] = (),
    state: TrainState | None = None,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainState:
    """Train until ``max_epochs``, a loss plateau, or a callback returns True.

    The plateau test stops once the epoch loss improved by less than
    ``plateau_min_delta`` over the last ``plateau_window`` epochs.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if np.any(data.labels < 0):
        raise ValueError("every training sample needs a label")
    state = state or TrainState(params)
    n = len(data)
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.epoch < config.max_epochs:
            epoch = state.epoch
            lr = lr_at(epoch, config)
            order = epoch_order(n, config.seed, epoch)
            total_loss, correct = 0.0, 0
            for i in range(0, n, config.batch_size):
                idx = order[i:i + config.batch_size]
                p = state.params
                r = model.forward(data.inputs[idx], data.distances[idx], data.present[idx], p, training=True)
                loss = focal_loss(r.probabilities, data.labels[idx], config.gamma)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingAborted(f"loss became {value} at epoch {epoch}")
                names = p.names()
                g = ad.backward(loss, p.values())
                grads = {nm: g[t] for nm, t in zip(names, p.values())}
                sgd_step(p, grads, lr, config.weight_decay, config.momentum, state.momentum)
                total_loss += value * len(idx)
                correct += int((r.probabilities.data.argmax(axis=1) == data.labels[idx]).sum())
                del r, loss, g, grads  # free this batch's graph before the next forward
            state.epoch += 1
            rec = EpochRecord(epoch, lr, total_loss / n, correct / n)
            state.history.append(rec)
            log.info(rec.line())
            if logf:
                logf.write(rec.line() + "\n")
                logf.flush()
            if checkpoint_path and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                save_checkpoint(state, model.config, config, checkpoint_path)
            if any(cb(rec, state) for cb in callbacks):
                break
            w = config.plateau_window
            if w and len(state.history) > w:
                if state.history[-w - 1].loss - rec.loss < config.plateau_min_delta:
                    log.info("loss plateau over %d epochs, stopping", w)
                    break
    finally:
        if logf:
            logf.close()
    return state


def stop_at_accuracy(target: float) -> Callable[[EpochRecord, TrainState], bool]:
    def cb(rec: EpochRecord, state: TrainState) -> bool:
        return rec.accuracy >= target
    return cb
