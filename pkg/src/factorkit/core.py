"""Dense-matrix primitives shared by every other module.

Matrices are plain 2-D C-contiguous float64 numpy arrays throughout the
package; :func:`as_matrix` normalizes and validates at the boundaries.
All operations here are pure and deterministic: :func:`matmul` accumulates
over the inner dimension in ascending order, which makes its output
bit-identical to a naive triple loop and stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BIT_GENERATOR = "PCG64"


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64); identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(data, *, check_finite: bool = True) -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array, validating finiteness."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {a.shape}")
    if check_finite and not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite elements")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, ascending-k summation order.

    Each output element is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j])
    + ...)``, exactly the order of the textbook triple loop, so results are
    reproducible bit-for-bit across runs and match a triple-loop oracle to
    0 ULP.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


@dataclass(frozen=True)
class StridePermutation:
    """Blocked-transpose index bijection pi(i) = (i mod b)*(N/b) + i//b.

    ``blocks`` must divide ``length``; the inverse of (b, N) is (N/b, N).
    """

    length: int
    blocks: int

    def __post_init__(self):
        if self.length < 1 or self.blocks < 1:
            raise ValueError("length and blocks must be positive")
        if self.length % self.blocks != 0:
            raise ValueError(
                f"blocks={self.blocks} does not divide length={self.length}"
            )

    def map(self) -> np.ndarray:
        """Index array p with p[i] = pi(i)."""
        i = np.arange(self.length)
        return (i % self.blocks) * (self.length // self.blocks) + i // self.blocks

    def inverse(self) -> "StridePermutation":
        return StridePermutation(self.length, self.length // self.blocks)

    def matrix(self) -> np.ndarray:
        """Dense permutation matrix P with P[pi(i), i] = 1."""
        p = np.zeros((self.length, self.length), dtype=np.float64)
        p[self.map(), np.arange(self.length)] = 1.0
        return p


def permute_rows(w: np.ndarray, perm: StridePermutation) -> np.ndarray:
    """Row pi(i) of the output is row i of the input (out = P w)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != perm.length:
        raise ShapeError(f"permutation length {perm.length} != row count {w.shape[0]}")
    out = np.empty_like(w)
    out[perm.map(), ...] = w
    return out


def permute_cols(w: np.ndarray, perm: StridePermutation) -> np.ndarray:
    """Column pi(j) of the output is column j of the input (out = w P^T)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[1] != perm.length:
        raise ShapeError(f"permutation length {perm.length} != col count {w.shape[1]}")
    out = np.empty_like(w)
    out[:, perm.map()] = w
    return out


@dataclass(frozen=True)
class BlockGrid:
    """Partition of an (b1*o) x (b2*p) matrix into a b1 x b2 grid of o x p tiles."""

    b1: int
    b2: int
    o: int
    p: int

    def __post_init__(self):
        if min(self.b1, self.b2, self.o, self.p) < 1:
            raise ValueError("grid parameters must be positive")

    @property
    def rows(self) -> int:
        return self.b1 * self.o

    @property
    def cols(self) -> int:
        return self.b2 * self.p

    @staticmethod
    def for_shape(rows: int, cols: int, b1: int, b2: int) -> "BlockGrid":
        if rows % b1 != 0:
            raise ShapeError(f"b1={b1} does not divide rows={rows}")
        if cols % b2 != 0:
            raise ShapeError(f"b2={b2} does not divide cols={cols}")
        return BlockGrid(b1, b2, rows // b1, cols // b2)

    def check(self, w: np.ndarray):
        if w.shape != (self.rows, self.cols):
            raise ShapeError(f"grid {self} inconsistent with matrix {w.shape}")


def split_blocks(w: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """4-D view t[i,j,k,l] = w[i*o+k, j*p+l]; exact inverse of join_blocks."""
    w = np.asarray(w, dtype=np.float64)
    grid.check(w)
    return np.ascontiguousarray(
        w.reshape(grid.b1, grid.o, grid.b2, grid.p).transpose(0, 2, 1, 3)
    )


def join_blocks(t: np.ndarray) -> np.ndarray:
    """Reassemble the 4-D block tensor into a dense matrix, bit-exactly."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"expected a 4-D block tensor, got ndim={t.ndim}")
    b1, b2, o, p = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 1, 3).reshape(b1 * o, b2 * p))
