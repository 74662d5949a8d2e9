"""Block-diagonal inverse empirical Fisher, maintained by rank-1 WSM updates.

The estimator represents ``n_blocks`` dense ``B x B`` matrices approximating

    (lambda * I + 1/m * sum_i g_i g_i^T)^-1

restricted to the diagonal blocks. Each gradient is folded in with the
Sherman-Morrison downdate, batched over all blocks at once.

The recursion runs in square-root form: the state is ``T`` with
``F^-1 = T T^T / lambda`` and ``T = I`` at reset, and a gradient ``g`` applies

    b = T^T g,  beta = 1 / (m lambda + b^T b),  gamma = 1 / (1 + sqrt(m lambda beta))
    T <- T - beta gamma (T b) b^T

which is the same rank-1 downdate of ``F^-1``. Updating ``F^-1`` directly
cancels entries of size ``1/lambda`` when gradients are nearly collinear and
loses digits in proportion to cond(F); the square-root form loses about
sqrt(cond(F)).
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

DEFAULT_BLOCK_SIZE = 50
DEFAULT_NUM_GRADS = 1024
DEFAULT_DAMPENING = 1e-7

# d, B, lambda, m, consumed
_HEADER = struct.Struct("<qqdqq")


class FisherError(ValueError):
    """Base class for estimator errors."""


class InvalidDampeningError(FisherError):
    pass


class InvalidDimensionError(FisherError):
    pass


class CapacityError(FisherError):
    pass


class NonFiniteGradientError(FisherError):
    pass


class AlignmentError(FisherError):
    pass


def num_blocks(d: int, block_size: int) -> int:
    return -(-int(d) // int(block_size))


def estimator_memory_bytes(d: int, block_size: int, bytes_per_entry: int = 8) -> int:
    """Storage of the block tensor, ``n_blocks * B^2 * bytes_per_entry``.

    Pure arithmetic; nothing is allocated, so it is safe for BERT-sized ``d``.
    """
    return num_blocks(d, block_size) * int(block_size) ** 2 * int(bytes_per_entry)


class FisherInverseEstimator:
    """Inverse dampened empirical Fisher in block-diagonal form.

    Parameters
    ----------
    d : int
        Number of prunable weights.
    block_size : int
        Width ``B`` of the diagonal blocks. When ``B`` does not divide ``d``
        the last block is padded with phantom coordinates whose gradients
        are always zero.
    dampening : float
        ``lambda > 0``.
    num_grads : int
        Declared number of gradients ``m``; it appears in every denominator,
        independent of how many gradients have been consumed so far.
    """

    def __init__(self, d: int, block_size: int = DEFAULT_BLOCK_SIZE,
                 dampening: float = DEFAULT_DAMPENING, num_grads: int = DEFAULT_NUM_GRADS):
        if not (isinstance(dampening, (int, float)) and math.isfinite(dampening)) or dampening <= 0:
            raise InvalidDampeningError(f"dampening must be a positive finite real, got {dampening!r}")
        if d < 1 or block_size < 1:
            raise InvalidDimensionError(f"need d >= 1 and B >= 1, got d={d}, B={block_size}")
        if num_grads < 1:
            raise InvalidDimensionError(f"need m >= 1, got m={num_grads}")
        self.d = int(d)
        self.block_size = int(block_size)
        self.dampening = float(dampening)
        self.num_grads = int(num_grads)
        self.n_blocks = num_blocks(d, block_size)
        self.consumed = 0
        self.root = np.empty((self.n_blocks, self.block_size, self.block_size), dtype=np.float64)
        self._blocks = None
        self.reset()

    def reset(self):
        """Return to ``(1/lambda) I`` with no gradients consumed."""
        self.root[...] = 0.0
        idx = np.arange(self.block_size)
        self.root[:, idx, idx] = 1.0
        self._blocks = None
        self.consumed = 0
        return self

    @property
    def blocks(self) -> np.ndarray:
        """Read-only ``(n_blocks, B, B)`` view of ``F^-1``, materialized on first access after an update."""
        if self._blocks is None:
            p = np.matmul(self.root, self.root.transpose(0, 2, 1))
            # a + b == b + a bitwise, so the result is exactly symmetric
            p = (p + p.transpose(0, 2, 1)) * (0.5 / self.dampening)
            p.flags.writeable = False
            self._blocks = p
        return self._blocks

    @property
    def padded_dim(self) -> int:
        return self.n_blocks * self.block_size

    @property
    def memory_bytes(self) -> int:
        """Bytes of estimator state; the cached ``blocks`` view adds the same again while held."""
        return self.root.nbytes

    @property
    def is_full(self) -> bool:
        return self.consumed >= self.num_grads

    def _pad(self, v: np.ndarray, name: str) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.d:
            raise InvalidDimensionError(f"{name} must have shape ({self.d},), got {v.shape}")
        out = np.zeros(self.padded_dim)
        out[: self.d] = v
        return out.reshape(self.n_blocks, self.block_size)

    def update(self, grad) -> FisherInverseEstimator:
        """Fold one gradient into every block (in place); returns ``self``."""
        if self.consumed >= self.num_grads:
            raise CapacityError(f"estimator already holds m={self.num_grads} gradients")
        g = self._pad(grad, "gradient")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("gradient contains non-finite entries; estimator unchanged")
        b = np.matmul(g[:, None, :], self.root)[:, 0, :]
        mlam = self.num_grads * self.dampening
        beta = 1.0 / (mlam + np.einsum("ni,ni->n", b, b))
        coef = beta / (1.0 + np.sqrt(mlam * beta))
        tb = np.matmul(self.root, b[:, :, None])[:, :, 0]
        self.root -= (coef[:, None] * tb)[:, :, None] * b[:, None, :]
        self._blocks = None
        self.consumed += 1
        return self

    def update_many(self, grads) -> FisherInverseEstimator:
        for g in grads:
            self.update(g)
        return self

    def inverse_diagonal(self) -> np.ndarray:
        return np.diagonal(self.blocks, axis1=1, axis2=2).reshape(-1)[: self.d].copy()

    def locate(self, index: int, size: int = 1) -> tuple[int, int]:
        """Block id and intra-block offset of ``[index, index + size)``."""
        if index < 0 or index + size > self.d:
            raise InvalidDimensionError(f"range [{index}, {index + size}) outside [0, {self.d})")
        b, off = divmod(index, self.block_size)
        if off + size > self.block_size:
            raise AlignmentError(
                f"group [{index}, {index + size}) straddles Fisher blocks {b} and {b + 1}")
        return b, off

    def group_inverse_submatrix(self, index: int, size: int = 1) -> np.ndarray:
        b, off = self.locate(index, size)
        return self.blocks[b, off:off + size, off:off + size].copy()

    def ihvp(self, v) -> np.ndarray:
        """Block-diagonal product ``F^-1 v``."""
        vb = self._pad(v, "v")
        return np.einsum("nij,nj->ni", self.blocks, vb).reshape(-1)[: self.d]

    def dense_blocks_fisher(self) -> np.ndarray:
        """Invert each block back to the Fisher itself (diagnostics only)."""
        return np.linalg.inv(self.blocks)

    # checkpoint -----------------------------------------------------------

    def save(self, path):
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.d, self.block_size, self.dampening,
                                  self.num_grads, self.consumed))
            fh.write(np.ascontiguousarray(self.blocks, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path) -> FisherInverseEstimator:
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise FisherError(f"{path}: truncated header")
        d, B, lam, m, consumed = _HEADER.unpack_from(raw)
        est = cls(d, B, lam, m)
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != est.root.size:
            raise FisherError(f"{path}: expected {est.root.size} block entries, found {body.size}")
        blocks = body.reshape(est.root.shape).copy()
        try:
            est.root[...] = np.linalg.cholesky(blocks * lam)
        except np.linalg.LinAlgError as exc:
            raise FisherError(f"{path}: blocks are not positive definite") from exc
        blocks.flags.writeable = False
        est._blocks = blocks
        est.consumed = consumed
        return est

    def __repr__(self):
        return (f"FisherInverseEstimator(d={self.d}, B={self.block_size}, "
                f"lambda={self.dampening:g}, m={self.num_grads}, consumed={self.consumed})")
