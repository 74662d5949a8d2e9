"""Symmetric per-tensor fake quantization of weight matrices with a straight-through gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ToyModel


@dataclass
class QuantConfig:
    bits: int = 8
    epochs: float = 10
    observer_epochs: float = 5

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bit width must lie in [2, 16], got {self.bits}")
        if self.observer_epochs > self.epochs:
            raise ValueError("observer_epochs cannot exceed the quantization epochs")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def quant_scale(max_abs: float, qmax: int = 127) -> float:
    """``max|w| / qmax``; an all-zero tensor falls back to 1.0."""
    return float(max_abs) / qmax if max_abs > 0 else 1.0


def fake_quantize(w, scale: float, qmax: int = 127) -> np.ndarray:
    """Quantize-dequantize with round-half-to-even and clamping to ``[-qmax, qmax]``."""
    w = np.asarray(w)
    q = np.clip(np.rint(w / scale), -qmax, qmax)
    return (q * scale).astype(w.dtype, copy=False)


class WeightObserver:
    """Running max-|w| per weight matrix; frozen once observation ends."""

    def __init__(self, model: ToyModel, qmax: int = 127):
        self.qmax = qmax
        self.max_abs = {n: 0.0 for n, p in model.params.items() if p.ndim == 2}
        self.frozen = False

    def observe(self, model: ToyModel):
        if self.frozen:
            return
        for n in self.max_abs:
            self.max_abs[n] = max(self.max_abs[n], float(np.max(np.abs(model.params[n]))))

    def scales(self) -> dict[str, float]:
        return {n: quant_scale(m, self.qmax) for n, m in self.max_abs.items()}


class FakeQuantContext:
    """Swap in quantized weights for one forward/backward, then restore float weights.

    Gradients computed against the quantized weights are applied unchanged to
    the float shadow weights (straight-through estimator).
    """

    def __init__(self, model: ToyModel, observer: WeightObserver):
        self.model, self.observer = model, observer
        self._saved = {}

    def __enter__(self):
        self.observer.observe(self.model)
        for n, s in self.observer.scales().items():
            p = self.model.params[n]
            self._saved[n] = p.copy()
            p[...] = fake_quantize(p, s, self.observer.qmax)
        return self

    def __exit__(self, *exc):
        for n, saved in self._saved.items():
            self.model.params[n][...] = saved
        self._saved.clear()
        return False


def quantize_model(model: ToyModel, observer: WeightObserver) -> ToyModel:
    """Bake the quantization grid into the weights (in place)."""
    for n, s in observer.scales().items():
        model.params[n][...] = fake_quantize(model.params[n], s, observer.qmax)
    return model


def fake_quant_finetune(trainer, qc: QuantConfig, lrs, steps_per_epoch: int):
    """QAT over ``lrs`` (one learning rate per step).

    Returns ``(model, scales)``: the model with weights baked onto the grid
    and the frozen per-tensor scales.

    Observers track max|w| during the first ``qc.observer_epochs`` and are then
    frozen. Masked weights stay exactly zero since 0 maps to 0.
    """
    model = trainer.model
    observer = WeightObserver(model, qc.qmax)
    observer_steps = int(round(qc.observer_epochs * steps_per_epoch))
    ctx = FakeQuantContext(model, observer)
    for i, lr in enumerate(lrs):
        if i == observer_steps:
            observer.frozen = True
        trainer.step(float(lr), ctx)
    observer.frozen = True
    return quantize_model(model, observer), observer.scales()
