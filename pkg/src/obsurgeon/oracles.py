"""Brute-force reference computations.

These deliberately avoid the fast paths: the Fisher oracle factorizes every
block directly (no rank-1 recursion) and polishes the inverse with one step
of extended-precision refinement, and the group oracle solves the full KKT
system of the constrained quadratic for every candidate group. They are
meant for small ``d`` only.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy import linalg

MAX_ORACLE_DIM = 512
MAX_EXHAUSTIVE_DIM = 16
MAX_EXACT_DIM = 8


def oracle_dense_inverse(gradients, dampening: float, num_grads: int, block_size: int) -> np.ndarray:
    """Blocks of ``(lambda I + 1/m sum g_b g_b^T)^-1``, shape (n_blocks, B, B)."""
    G = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
    if G.shape[1] == 0:
        raise ValueError("need the gradient dimension; pass an array of shape (0, d)")
    k, d = G.shape
    if d > MAX_ORACLE_DIM:
        raise ValueError(f"dense oracle is limited to d <= {MAX_ORACLE_DIM}, got {d}")
    if dampening <= 0:
        raise ValueError("dampening must be positive")
    n_blocks = -(-d // block_size)
    padded = np.zeros((k, n_blocks * block_size))
    padded[:, :d] = G
    out = np.empty((n_blocks, block_size, block_size))
    eye = np.eye(block_size)
    root_lam = np.sqrt(dampening) * eye
    for b in range(n_blocks):
        gb = padded[:, b * block_size:(b + 1) * block_size]
        # F = A^T A with A = [gb / sqrt(m); sqrt(lambda) I]. Factoring A keeps lambda
        # exact; summing lambda into the formed block rounds it away when |g|^2 >> lambda.
        A = np.vstack([gb / np.sqrt(num_grads), root_lam])
        R = linalg.qr(A, mode="r")[0][:block_size]
        if np.any(np.diag(R) == 0):
            raise np.linalg.LinAlgError(f"Fisher block {b} is singular")
        R_inv = linalg.solve_triangular(R, eye)
        out[b] = _refine(R_inv @ R_inv.T, gb, dampening, num_grads)
    return out


def _refine(X, gb, dampening, num_grads):
    """One Newton step ``X + X (I - F X)`` with the residual in extended precision.

    ``F X`` is applied as ``lambda X + gb^T (gb X) / m`` so ``F`` is never rounded.
    """
    ld = np.longdouble
    Xl, Gl = X.astype(ld), gb.astype(ld)
    FX = ld(dampening) * Xl + Gl.T @ (Gl @ Xl) / ld(num_grads)
    Xl = Xl + Xl @ (np.eye(X.shape[0], dtype=ld) - FX)
    return ((Xl + Xl.T) / 2).astype(np.float64)


def exact_block_inverse(gradients, dampening: float, num_grads: int) -> np.ndarray:
    """``(lambda I + 1/m G^T G)^-1`` for one small block in rational arithmetic, rounded once to float64."""
    G = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
    B = G.shape[1]
    if B > MAX_EXACT_DIM:
        raise ValueError(f"exact inverse is limited to B <= {MAX_EXACT_DIM}, got {B}")
    g = [[Fraction(float(v)) for v in row] for row in G]
    lam = Fraction(float(dampening))
    A = [[lam * (i == j) + sum(r[i] * r[j] for r in g) / num_grads for j in range(B)]
         + [Fraction(int(i == j)) for j in range(B)] for i in range(B)]
    for c in range(B):
        piv = A[c][c]
        A[c] = [v / piv for v in A[c]]
        for r in range(B):
            if r != c and A[r][c]:
                f = A[r][c]
                A[r] = [a - f * b for a, b in zip(A[r], A[c])]
    return np.array([[float(v) for v in row[B:]] for row in A])


def dense_fisher(gradients, dampening: float, num_grads: int) -> np.ndarray:
    """Full (non-block) dampened empirical Fisher."""
    G = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
    return dampening * np.eye(G.shape[1]) + G.T @ G / num_grads


def constrained_minimum(w, fisher, group_indices):
    """Solve ``min 1/2 dw^T F dw  s.t. dw_Q = -w_Q`` through its KKT system.

    Returns ``(dw, cost)``.
    """
    w = np.asarray(w, dtype=np.float64)
    F = np.asarray(fisher, dtype=np.float64)
    Q = np.asarray(group_indices)
    d, k = w.size, Q.size
    E = np.zeros((k, d))
    E[np.arange(k), Q] = 1.0
    kkt = np.block([[F, E.T], [E, np.zeros((k, k))]])
    rhs = np.concatenate([np.zeros(d), -w[Q]])
    sol = np.linalg.solve(kkt, rhs)
    dw = sol[:d]
    return dw, 0.5 * float(dw @ F @ dw)


def oracle_best_group(w, fisher, group_size: int) -> int:
    """Exhaustive single-group optimum under the full Fisher."""
    w = np.asarray(w, dtype=np.float64)
    d = w.size
    if d > MAX_EXHAUSTIVE_DIM:
        raise ValueError(f"exhaustive oracle is limited to d <= {MAX_EXHAUSTIVE_DIM}, got {d}")
    costs = [constrained_minimum(w, fisher, np.arange(g * group_size, (g + 1) * group_size))[1]
             for g in range(d // group_size)]
    return int(np.argmin(costs))


def oracle_check(n_configs: int = 50, n_instances: int = 200, seed: int = 0) -> dict:
    """Run both oracle comparisons on random instances; returns a summary."""
    from .fisher import FisherInverseEstimator
    from .saliency import GroupSpec, score_groups

    rng = np.random.default_rng(seed)
    worst = worst_rel = 0.0
    for _ in range(n_configs):
        B = int(rng.choice([2, 10, 50]))
        d = int(rng.integers(1, MAX_ORACLE_DIM + 1))
        m = int(rng.integers(1, 129))
        lam = float(10 ** rng.uniform(-7, -1))
        grads = rng.normal(size=(m, d)) * 10 ** rng.uniform(-2, 1)
        est = FisherInverseEstimator(d, B, lam, m).update_many(grads)
        ref = oracle_dense_inverse(grads, lam, m, B)
        err = float(np.max(np.abs(est.blocks - ref)))
        worst = max(worst, err)
        worst_rel = max(worst_rel, err / float(np.max(np.abs(ref))))

    matches = 0
    for _ in range(n_instances):
        q = int(rng.choice([1, 2, 4]))
        d = q * int(rng.integers(1, MAX_EXHAUSTIVE_DIM // q + 1))
        w = rng.normal(size=d)
        m = int(rng.integers(1, 2 * d + 1))
        grads = rng.normal(size=(m, d))
        lam = float(10 ** rng.uniform(-3, 0))
        est = FisherInverseEstimator(d, d, lam, m).update_many(grads)
        fast = int(np.argmin(score_groups(w, est, GroupSpec(q))))
        matches += fast == oracle_best_group(w, dense_fisher(grads, lam, m), q)
    return {"fisher_configs": n_configs, "fisher_max_abs_error": worst, "fisher_max_rel_error": worst_rel,
            "group_instances": n_instances, "group_matches": matches}
