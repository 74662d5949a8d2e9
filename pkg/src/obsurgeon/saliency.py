"""Group saliency scores and optimal compensating weight updates.

For a group ``Q`` of contiguous coordinates and ``G = [F^-1]_QQ``::

    rho_Q   = 1/2 * w_Q^T G^-1 w_Q
    delta_w = -F^-1 E_Q^T G^-1 w_Q

Groups are scored independently (cross-group correlations ignored) and the
updates of all groups pruned in one step are summed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .fisher import AlignmentError, FisherInverseEstimator
from .weights import WeightStore

PRUNED = math.inf


class SaliencyError(ValueError):
    pass


class GroupConflictError(SaliencyError):
    pass


class MonotonicityError(SaliencyError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    """Contiguous groups of ``size`` weights, aligned to multiples of ``size``."""

    size: int = 1

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"group size must be >= 1, got {self.size}")

    def n_groups(self, d: int) -> int:
        return d // self.size

    def validate(self, d: int, block_size: int | None = None, boundaries=()):
        q = self.size
        if d % q:
            raise AlignmentError(f"group size {q} does not divide d={d}")
        if block_size is not None and block_size % q:
            raise AlignmentError(f"group size {q} does not divide Fisher block width {block_size}")
        for b in boundaries:
            if b % q:
                raise AlignmentError(f"layer boundary at {b} is not a multiple of group size {q}")

    def indices(self, group: int) -> np.ndarray:
        return np.arange(group * self.size, (group + 1) * self.size)


@dataclass
class SaliencyReport:
    scores: np.ndarray
    group_size: int = 1
    pruned_groups: list[int] = field(default_factory=list)

    @property
    def predicted_loss_increase(self) -> float:
        return predicted_loss_increase(self)

    def to_csv(self, path, store: WeightStore | None = None):
        chosen = set(int(g) for g in self.pruned_groups)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group_id", "layer", "offset", "score", "pruned_flag"])
            for g, score in enumerate(self.scores):
                start = g * self.group_size
                if store is not None:
                    seg = store.segment_of(start)
                    layer, offset = seg.name, start - seg.start
                else:
                    layer, offset = "", start
                writer.writerow([g, layer, offset, repr(float(score)), int(g in chosen)])
        return path


def _group_submatrices(est: FisherInverseEstimator, q: int) -> np.ndarray:
    """All diagonal ``q x q`` sub-blocks, one per aligned group, shape (n_groups, q, q)."""
    n, B = est.n_blocks, est.block_size
    if B % q:
        raise AlignmentError(f"group size {q} does not divide Fisher block width {B}")
    per = B // q
    r = est.blocks.reshape(n, per, q, per, q)
    k = np.arange(per)
    sub = r[:, k, :, k, :]  # advanced indices go first: (per, n, q, q)
    sub = sub.transpose(1, 0, 2, 3).reshape(n * per, q, q)
    return sub[: est.d // q]


def _cholesky_or_raise(sub: np.ndarray, group_ids) -> np.ndarray:
    try:
        return np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        for k, g in enumerate(group_ids):
            if np.any(np.linalg.eigvalsh(sub[k]) <= 0):
                raise SaliencyError(f"inverse-Fisher sub-matrix of group {g} is not positive definite")
        raise


def score_groups(w, est: FisherInverseEstimator, group: GroupSpec = GroupSpec(), mask=None) -> np.ndarray:
    """Saliency of every aligned group; groups touching the mask score ``+inf``."""
    w = np.asarray(w, dtype=np.float64)
    q = group.size
    group.validate(w.size, est.block_size)
    if w.size != est.d:
        raise SaliencyError(f"weights have length {w.size}, estimator d={est.d}")
    wq = w.reshape(-1, q)
    if q == 1:
        scores = 0.5 * wq[:, 0] ** 2 / est.inverse_diagonal()
    else:
        sub = _group_submatrices(est, q)
        L = _cholesky_or_raise(sub, range(len(sub)))
        y = np.linalg.solve(L, wq[:, :, None])[:, :, 0]
        scores = 0.5 * np.einsum("gi,gi->g", y, y)
    if mask is not None:
        scores = np.where(group_pruned(mask, q), PRUNED, scores)
    return scores


def score_group(w, est: FisherInverseEstimator, index: int, group: GroupSpec = GroupSpec(), mask=None) -> float:
    """Saliency of a single group; ``+inf`` if any of its weights is already pruned."""
    q = group.size
    idx = group.indices(index)
    if mask is not None and not np.all(np.asarray(mask)[idx]):
        return PRUNED
    G = est.group_inverse_submatrix(int(idx[0]), q)
    wq = np.asarray(w, dtype=np.float64)[idx]
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise SaliencyError(f"inverse-Fisher sub-matrix of group {index} is not positive definite") from None
    y = np.linalg.solve(L, wq)
    return 0.5 * float(y @ y)


def group_pruned(mask, q: int) -> np.ndarray:
    """True for groups containing at least one masked (zero) coordinate."""
    keep = np.asarray(mask).astype(bool).reshape(-1, q)
    return ~np.all(keep, axis=1)


def optimal_update(w, est: FisherInverseEstimator, groups, group: GroupSpec = GroupSpec(), mask=None) -> np.ndarray:
    """Summed optimal update that zeroes every group in ``groups``.

    The returned vector is the update actually applied: it is zero on
    coordinates that were already masked, and ``w + delta`` is exactly zero
    on every selected group as well as on the prior mask.
    """
    w = np.asarray(w, dtype=np.float64)
    q = group.size
    groups = np.asarray(sorted(int(g) for g in groups), dtype=np.int64)
    if groups.size and np.any(np.diff(groups) == 0):
        raise GroupConflictError("the same group was selected more than once")
    if groups.size and (groups[0] < 0 or groups[-1] >= w.size // q):
        raise SaliencyError(f"group index out of range [0, {w.size // q})")
    group.validate(w.size, est.block_size)
    keep = np.ones(w.size, dtype=bool) if mask is None else np.asarray(mask).astype(bool).copy()
    if groups.size == 0:
        return np.zeros_like(w)

    sub = _group_submatrices(est, q)[groups]
    wq = w.reshape(-1, q)[groups]
    L = _cholesky_or_raise(sub, groups)
    # G^-1 w_Q via the Cholesky factor
    y = np.linalg.solve(L, wq[:, :, None])
    alpha = np.linalg.solve(np.swapaxes(L, 1, 2), y)[:, :, 0]
    z = np.zeros(w.size)
    z.reshape(-1, q)[groups] = alpha
    delta = -est.ihvp(z)

    delta[~keep] = 0.0
    keep.reshape(-1, q)[groups] = False
    new_w = (w + delta) * keep
    return new_w - w


def select_groups(scores, mask, target_sparsity: float, group_size: int = 1) -> list[int]:
    """Lowest-score unpruned groups needed to reach ``target_sparsity``.

    Selects ``ceil(s * d / q) - already_pruned`` groups; ties go to the
    lowest group index.
    """
    if not 0.0 <= target_sparsity <= 1.0:
        raise SaliencyError(f"target sparsity must lie in [0, 1], got {target_sparsity}")
    mask = np.asarray(mask).astype(bool)
    d = mask.size
    current = 1.0 - mask.mean()
    if target_sparsity < current - group_size / d - 1e-12:
        raise MonotonicityError(
            f"target sparsity {target_sparsity:.6g} is below current sparsity {current:.6g}")
    scores = np.asarray(scores, dtype=np.float64)
    already = int(group_pruned(mask, group_size).sum())
    want = max(0, target_group_count(target_sparsity, d, group_size) - already)
    finite = np.flatnonzero(np.isfinite(scores))
    order = finite[np.argsort(scores[finite], kind="stable")]
    return [int(g) for g in order[:want]]


def target_group_count(s: float, d: int, group_size: int) -> int:
    # tolerance absorbs float noise such as 0.9 * 20000 = 18000.000000000004
    return int(math.ceil(s * d / group_size - 1e-9))


def predicted_loss_increase(report: SaliencyReport) -> float:
    if not len(report.pruned_groups):
        return 0.0
    return float(np.sum(report.scores[np.asarray(report.pruned_groups, dtype=np.int64)]))


def prune_step(w, est: FisherInverseEstimator, mask, target_sparsity: float,
               group: GroupSpec = GroupSpec(), compensate: bool = True):
    """Score, select and (optionally) compensate one pruning step.

    Returns ``(new_mask, delta, report)``.
    """
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    scores = score_groups(w, est, group, mask)
    chosen = select_groups(scores, mask, target_sparsity, group.size)
    report = SaliencyReport(scores=scores, group_size=group.size, pruned_groups=chosen)
    new_mask = mask.copy()
    new_mask.reshape(-1, group.size)[chosen] = False
    if compensate:
        delta = optimal_update(w, est, chosen, group, mask)
    else:
        delta = w * new_mask - w
    return new_mask, delta, report
