"""Full SVD via one-sided Jacobi rotations, with a fixed sign convention.

One-sided Jacobi orthogonalizes the columns of the matrix by plane
rotations in a fixed cyclic pair order, which makes the decomposition
deterministic: identical inputs give bit-identical results. Accuracy is
machine-level at the expense of speed, which is the right trade for a
reference implementation.

Sign convention: in each left-singular-vector column, the entry of largest
absolute value is non-negative (ties broken by lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_matrix
from .factors import LowRankFactors

SWEEP_CAP = 60
OFFDIAG_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Jacobi sweeps exhausted before the off-diagonal threshold was met."""


@dataclass
class SvdResult:
    """u (m, k) column-orthonormal, s (k,) non-increasing, vt (k, n)."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank_limit(self) -> int:
        return len(self.s)


def _jacobi(a: np.ndarray):
    # Assumes m >= n. Rotates column pairs (i, j), i < j, in row-cyclic
    # order until no pair exceeds the relative off-diagonal threshold.
    m, n = a.shape
    v = np.eye(n)
    norms = np.einsum("ij,ij->j", a, a)
    for _ in range(SWEEP_CAP):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha, beta = norms[i], norms[j]
                if alpha == 0.0 or beta == 0.0:
                    continue
                gamma = a[:, i] @ a[:, j]
                if abs(gamma) <= OFFDIAG_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                # sign(0) must be +1 or equal-norm pairs would never rotate
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ai = a[:, i].copy()
                a[:, i] = c * ai - s * a[:, j]
                a[:, j] = s * ai + c * a[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
                norms[i] = a[:, i] @ a[:, i]
                norms[j] = a[:, j] @ a[:, j]
        if not rotated:
            return a, v
    raise ConvergenceError(
        f"one-sided Jacobi did not converge after {SWEEP_CAP} sweeps on a {m}x{n} matrix"
    )


def _complete_basis(u: np.ndarray, filled: list[int], empty: list[int]):
    # Deterministically extend the orthonormal columns in `filled` with unit
    # vectors for the (numerically) zero singular directions.
    m = u.shape[0]
    for k in empty:
        for cand in range(m):
            vec = np.zeros(m)
            vec[cand] = 1.0
            for _ in range(2):  # re-orthogonalize once for robustness
                for g in filled:
                    vec -= (u[:, g] @ vec) * u[:, g]
            nv = np.sqrt(vec @ vec)
            if nv > 0.1:
                u[:, k] = vec / nv
                filled.append(k)
                break
        else:
            raise ConvergenceError("failed to complete an orthonormal basis")


def svd(w: np.ndarray) -> SvdResult:
    """Full singular value decomposition with deterministic output."""
    w = as_matrix(w)
    m, n = w.shape
    if m < n:
        res = svd(w.T)
        return SvdResult(u=res.vt.T, s=res.s, vt=res.u.T)

    a, v = _jacobi(w.copy())
    s = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]

    u = np.zeros((m, n))
    cutoff = s[0] * m * np.finfo(np.float64).eps if s[0] > 0 else 0.0
    filled, empty = [], []
    for k in range(n):
        if s[k] > cutoff:
            u[:, k] = a[:, k] / s[k]
            filled.append(k)
        else:
            empty.append(k)
    if empty:
        _complete_basis(u, filled, empty)

    for k in range(n):  # sign convention
        idx = int(np.argmax(np.abs(u[:, k])))
        if u[idx, k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return SvdResult(u=u, s=s, vt=np.ascontiguousarray(v.T))


def truncate(res: SvdResult, r: int) -> LowRankFactors:
    """Best rank-r factors, splitting each singular value as sqrt(s) per side."""
    k = res.rank_limit
    if not 1 <= r <= k:
        raise ValueError(f"rank {r} out of range [1, {k}]")
    root = np.sqrt(res.s[:r])
    u = np.ascontiguousarray(res.u[:, :r] * root)
    v = np.ascontiguousarray(res.vt[:r, :].T * root)
    return LowRankFactors(u=u, v=v, r=r)


def spectrum_curve(w: np.ndarray) -> list[tuple[int, float]]:
    """Relative Frobenius reconstruction error of the best rank-r truncation.

    Returns (r, sqrt(sum_{i>r} s_i^2) / ||w||_F) for r = 1..min(m, n);
    non-increasing in r and ~0 at full rank.
    """
    res = svd(w)
    total = np.sqrt(np.sum(res.s**2))
    if total == 0.0:
        return [(r + 1, 0.0) for r in range(res.rank_limit)]
    tail = np.sqrt(np.maximum(np.cumsum((res.s**2)[::-1])[::-1], 0.0))
    out = []
    for r in range(1, res.rank_limit + 1):
        rem = tail[r] if r < res.rank_limit else 0.0
        out.append((r, float(rem / total)))
    return out
