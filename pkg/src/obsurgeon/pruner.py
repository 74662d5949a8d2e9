"""Gradual pruning: cubic sparsity schedule, GMP and second-order steps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fisher import FisherInverseEstimator
from .saliency import GroupSpec, MonotonicityError, SaliencyReport, prune_step, target_group_count
from .weights import Segment, WeightStore


class ScheduleError(ValueError):
    pass


class UninformedFisherError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Mask:
    """Cumulative keep-mask (``True`` = weight survives) over prunable weights."""

    bits: np.ndarray
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "segments", tuple(self.segments) or (Segment("all", 0, bits.size),))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.segments == other.segments and np.array_equal(self.bits, other.bits)

    __hash__ = None

    @classmethod
    def dense(cls, d: int, segments=()) -> Mask:
        return cls(np.ones(d, dtype=bool), segments)

    @property
    def d(self) -> int:
        return self.bits.size

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.bits.mean()) if self.d else 0.0

    def layer_sparsity(self) -> dict[str, float]:
        return {s.name: 1.0 - float(self.bits[s.start:s.stop].mean()) for s in self.segments}

    def with_bits(self, bits) -> Mask:
        bits = np.asarray(bits).astype(bool)
        if np.any(bits & ~self.bits):
            raise MonotonicityError("a pruned coordinate cannot be revived")
        return Mask(bits, self.segments)

    def contains(self, other: Mask) -> bool:
        """True if every coordinate kept by ``other`` is kept here too."""
        return bool(np.all(self.bits | ~other.bits))


@dataclass(frozen=True)
class SparsitySchedule:
    """Cubic interpolation between ``s_init`` at ``t_start`` and ``s_final`` at ``t_end``."""

    s_init: float
    s_final: float
    t_start: float
    t_end: float

    def __post_init__(self):
        if not 0.0 <= self.s_init <= self.s_final <= 1.0:
            raise ScheduleError(f"need 0 <= s_init <= s_final <= 1, got {self.s_init}, {self.s_final}")
        if not self.t_start < self.t_end:
            raise ScheduleError(f"need t_start < t_end, got {self.t_start}, {self.t_end}")


def sparsity_at(sched: SparsitySchedule, t: float) -> float:
    if t <= sched.t_start:
        return sched.s_init
    if t >= sched.t_end:
        return sched.s_final
    frac = (t - sched.t_start) / (sched.t_end - sched.t_start)
    return sched.s_final + (sched.s_init - sched.s_final) * (1.0 - frac) ** 3


def apply_mask(w, mask) -> np.ndarray:
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    w = np.asarray(w)
    if w.shape != bits.shape:
        raise ValueError(f"weights {w.shape} and mask {bits.shape} differ in shape")
    return np.where(bits, w, 0).astype(w.dtype, copy=False)


def _check_target(mask: Mask, target: float, granularity: int = 1):
    # rounding up to whole groups (per layer for GMP) may overshoot a target
    slack = granularity / mask.d + 1e-12
    if target < mask.sparsity - slack:
        raise ScheduleError(f"scheduled sparsity {target:.6g} is below current sparsity {mask.sparsity:.6g}")


def _layer_quotas(target: float, sizes: list[int], total: int) -> list[int]:
    """Groups to prune per layer: each within one group of ``target * size``, summing to the global count.

    Largest-remainder apportionment; ties go to the lower layer index.
    """
    goal = target_group_count(target, total, 1)
    share = [target * n for n in sizes]
    quota = [min(int(math.floor(x + 1e-9)), n) for x, n in zip(share, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(share[i] - quota[i]), i))
    for i in order[:max(0, goal - sum(quota))]:
        quota[i] = min(quota[i] + 1, sizes[i])
    return quota


def gmp_step(w, mask: Mask, target: float, group: GroupSpec = GroupSpec()) -> Mask:
    """Uniform per-layer magnitude pruning to ``target`` sparsity.

    Each layer segment independently loses its smallest-magnitude surviving
    groups (L2 norm for groups wider than one weight). No compensation.
    """
    _check_target(mask, target, group.size * len(mask.segments))
    w = np.asarray(w, dtype=np.float64)
    q = group.size
    bits = mask.bits.copy()
    quota = _layer_quotas(target, [seg.size // q for seg in mask.segments], mask.d // q)
    for seg, n_prune in zip(mask.segments, quota):
        wq = w[seg.start:seg.stop].reshape(-1, q)
        keep = bits[seg.start:seg.stop].reshape(-1, q)
        alive = np.all(keep, axis=1)
        want = n_prune - int((~alive).sum())
        if want <= 0:
            continue
        cand = np.flatnonzero(alive)
        norms = np.sqrt(np.einsum("gi,gi->g", wq[cand], wq[cand]))
        chosen = cand[np.argsort(norms, kind="stable")[:want]]
        keep[chosen] = False
    return mask.with_bits(bits)


def global_magnitude_step(w, mask: Mask, target: float, group: GroupSpec = GroupSpec()) -> Mask:
    """Magnitude pruning ranked across all layers at once (reference baseline)."""
    flat = Mask(mask.bits)
    out = gmp_step(w, flat, target, group)
    return Mask(out.bits, mask.segments)


@dataclass
class PruneResult:
    mask: Mask
    delta: np.ndarray
    report: SaliencyReport | None = None
    scheduled_sparsity: float = 0.0

    @property
    def predicted_loss_increase(self) -> float:
        return self.report.predicted_loss_increase if self.report is not None else float("nan")


def oberts_step(w, est: FisherInverseEstimator, mask: Mask, target: float,
                group: GroupSpec = GroupSpec(), compensate: bool = True) -> PruneResult:
    """Global second-order step: score all groups, prune the cheapest, compensate.

    The caller owns the estimator and should :meth:`~FisherInverseEstimator.reset`
    it before collecting gradients for the next step.
    """
    _check_target(mask, target, group.size)
    w = np.asarray(w, dtype=np.float64)
    if target <= mask.sparsity:
        return PruneResult(mask, np.zeros_like(w), SaliencyReport(np.zeros(0), group.size), target)
    if est.consumed == 0:
        raise UninformedFisherError("estimator holds no gradients; refusing to prune with F^-1 = I/lambda")
    group.validate(w.size, est.block_size, [s.start for s in mask.segments])
    bits, delta, report = prune_step(w, est, mask.bits, target, group, compensate)
    return PruneResult(mask.with_bits(bits), delta, report, target)


@dataclass
class PruneEvent:
    step: int
    epoch: float
    scheduled_sparsity: float
    achieved_sparsity: float
    predicted_loss_increase: float
    measured_loss_before: float
    measured_loss_after: float
    fisher_grads: int = 0
    extra: dict = field(default_factory=dict)

    PRUNE_LOG_FIELDS = ("step", "scheduled_sparsity", "achieved_sparsity", "predicted_loss_increase",
                        "measured_loss_before", "measured_loss_after")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.PRUNE_LOG_FIELDS}
