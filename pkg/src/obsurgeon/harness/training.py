"""Losses, masked SGD training and per-minibatch gradient streams."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ToyModel, log_softmax

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass
class KDConfig:
    """Loss = (1 - h) * CE(labels) + h * T^2 * KL(teacher_T || student_T)."""

    hardness: float = 1.0
    temperature: float = 2.0
    teacher: ToyModel | None = None

    def __post_init__(self):
        if not 0.0 <= self.hardness <= 1.0:
            raise ValueError(f"KD hardness must lie in [0, 1], got {self.hardness}")
        if not self.temperature > 0:
            raise ValueError(f"KD temperature must be positive, got {self.temperature}")


def cross_entropy(logits, labels) -> float:
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-lp[np.arange(len(labels)), labels].mean())


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def loss_and_dlogits(logits, labels, kd: KDConfig | None = None, teacher_logits=None):
    """Mean loss over the batch and its gradient w.r.t. the student logits."""
    n = logits.shape[0]
    lp = log_softmax(logits)
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    ce = -np.sum(onehot * lp) / n
    dce = (np.exp(lp) - onehot) / n
    if kd is None or kd.hardness == 0.0:
        return float(ce), dce
    if teacher_logits is None:
        if kd.teacher is None:
            raise TrainingError("KD requested without a teacher")
        raise TrainingError("teacher logits must be supplied")
    if teacher_logits.shape != logits.shape:
        raise TrainingError(f"teacher output {teacher_logits.shape} does not match student {logits.shape}")
    T, h = kd.temperature, kd.hardness
    ls = log_softmax(logits / T)
    lt = log_softmax(np.asarray(teacher_logits, dtype=logits.dtype) / T)
    pt = np.exp(lt)
    kl = np.sum(pt * (lt - ls)) / n
    loss = (1.0 - h) * ce + h * T * T * kl
    dkd = T * (np.exp(ls) - pt) / n
    return float(loss), (1.0 - h) * dce + h * dkd


def loss_and_grads(model: ToyModel, x, labels, kd: KDConfig | None = None, teacher_logits=None):
    cache = []
    logits = model.forward(x, cache)
    if kd is not None and kd.hardness > 0 and teacher_logits is None:
        teacher_logits = kd.teacher.forward(x)
    loss, dlogits = loss_and_dlogits(logits, labels, kd, teacher_logits)
    return loss, model.backward(cache, dlogits.astype(model.dtype, copy=False))


def loss_and_grad(model: ToyModel, x, labels, kd: KDConfig | None = None, mask=None, batch_id=None):
    """Loss and flat prunable gradient, zeroed on masked coordinates."""
    loss, grads = loss_and_grads(model, x, labels, kd)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} on batch {batch_id}")
    g = model.flatten_grads(grads)
    if mask is not None:
        g[~_bits(mask)] = 0.0
    return loss, g


def _bits(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "bits", mask)).astype(bool)


def evaluate(model: ToyModel, x, y, batch_size: int = 1024) -> tuple[float, float]:
    """Cross-entropy and accuracy on ``(x, y)``."""
    logits = np.concatenate([model.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return cross_entropy(logits, y), accuracy(logits, y)


class BatchStream:
    """Endless minibatches over a fixed training set, reshuffled each pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size < 1 or batch_size > n:
            raise ValueError(f"batch size {batch_size} must lie in [1, {n}]")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.passes = 0
        self._perm = rng.permutation(n)
        self._pos = 0

    @property
    def steps_per_pass(self) -> int:
        return self.n // self.batch_size

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
            self.passes += 1
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class SGD:
    """SGD with momentum and coupled L2 weight decay on weight matrices."""

    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, model: ToyModel, grads: dict, lr: float, mask=None):
        keep = segment_masks(model, mask)
        for name, p in model.params.items():
            g = grads[name]
            if self.weight_decay and p.ndim == 2:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            if name in keep:
                v *= keep[name]
            self.velocity[name] = v
            p -= (lr * v).astype(p.dtype, copy=False)
            if name in keep:
                p *= keep[name]


def segment_masks(model: ToyModel, mask) -> dict:
    """Keep-mask reshaped onto each prunable tensor (empty if no mask)."""
    if mask is None:
        return {}
    bits = _bits(mask)
    return {s.name: bits[s.start:s.stop].reshape(model.params[s.name].shape).astype(model.dtype)
            for s in model.segments()}


class Trainer:
    """Owns a model, its optimizer state, the data stream and the mask."""

    def __init__(self, model: ToyModel, data, batch_size: int, rng: np.random.Generator,
                 kd: KDConfig | None = None, optimizer: SGD | None = None, mask=None):
        self.model = model
        self.data = data
        self.kd = kd
        self.optimizer = optimizer or SGD()
        self.mask = mask
        self.batch_size = batch_size
        self.stream = BatchStream(data.n_train, batch_size, rng)
        self.rng = rng
        self.steps = 0
        self.last_loss = float("nan")
        self._teacher_logits = None
        if kd is not None and kd.hardness > 0:
            self._teacher_logits = kd.teacher.forward(data.x_train)

    @property
    def steps_per_epoch(self) -> int:
        return self.stream.steps_per_pass

    def _batch(self, idx):
        x, y = self.data.x_train[idx], self.data.y_train[idx]
        t = None if self._teacher_logits is None else self._teacher_logits[idx]
        return x, y, t

    def step(self, lr: float, context=None) -> float:
        """One optimizer step. ``context`` wraps the forward/backward pass only."""
        idx = self.stream.next()
        x, y, t = self._batch(idx)
        with context or contextlib.nullcontext():
            loss, grads = loss_and_grads(self.model, x, y, self.kd, t)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss {loss:.4g} at step {self.steps} (batch of {len(idx)})")
        self.optimizer.step(self.model, grads, lr, self.mask)
        self.steps += 1
        self.last_loss = loss
        return loss

    def train_span(self, lrs, context=None) -> list[float]:
        return [self.step(float(lr), context) for lr in lrs]

    def objective(self, idx=None) -> float:
        """Training objective (KD-mixed if configured) on a fixed subset."""
        if idx is None:
            idx = np.arange(min(self.data.n_train, 1024))
        x, y, t = self._batch(idx)
        logits = self.model.forward(x)
        return loss_and_dlogits(logits, y, self.kd, t)[0]

    def gradient_stream(self, count: int, batch_size: int | None = None):
        """Yield ``count`` per-minibatch prunable gradients at the current weights."""
        if count < 1:
            raise ValueError("gradient count must be >= 1")
        stream = BatchStream(self.data.n_train, batch_size or self.batch_size, self.rng)
        for i in range(count):
            idx = stream.next()
            x, y, t = self._batch(idx)
            loss, grads = loss_and_grads(self.model, x, y, self.kd, t)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss while collecting Fisher gradient {i}")
            g = self.model.flatten_grads(grads)
            if self.mask is not None:
                g[~_bits(self.mask)] = 0.0
            yield g
        if stream.passes:
            log.debug("gradient stream cycled the training set %d time(s) with reshuffle", stream.passes)
        self.last_stream_cycles = stream.passes


def gradient_stream(model: ToyModel, data, mask, kd: KDConfig | None, count: int,
                    batch_size: int = 32, seed: int = 0):
    """Functional form of :meth:`Trainer.gradient_stream`."""
    tr = Trainer(model, data, batch_size, np.random.default_rng(seed), kd, mask=mask)
    return tr.gradient_stream(count)
