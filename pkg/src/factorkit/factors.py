"""Factorized representations of a dense matrix and their shared operations.

Four variants: ``Dense`` (unfactorized), ``LowRankFactors`` (W ~ U V^T),
``BlockLowRankFactors`` (an independent rank-r factorization per tile of a
block grid), and ``MonarchFactors`` (two block-diagonal factors joined by
fixed stride permutations). Every variant supports ``reconstruct`` back to
a dense matrix, ``apply`` to an activation batch, and ``param_count``.

Conventions
-----------
Weights multiply column-vector activations: ``y = W x`` with ``x`` of shape
(n, batch). A Monarch factorization with b blocks of rank r reconstructs as

    W = P1 . BD(lblocks) . P2^T . BD(rblocks)

where BD assembles block-diagonal matrices, P1 is the permutation matrix of
the stride permutation (m/b, m), and P2 the one of (b, b*b*r). The diagonal
blocks are packed so that this product equals, bit-for-bit, the inverse
row-stride-permuted block low-rank reconstruction of the row-stride-permuted
matrix (see ``factorize.monarch_project``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import (
    BlockGrid,
    ShapeError,
    StridePermutation,
    join_blocks,
    matmul,
    permute_rows,
)


@dataclass
class Dense:
    """An unfactorized matrix; reconstructs to itself."""

    w: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 2:
            raise ShapeError("Dense expects a 2-D matrix")

    @property
    def shape(self):
        return self.w.shape


@dataclass
class LowRankFactors:
    """W ~ u v^T with u (m, r) and v (n, r); stores r(m+n) scalars."""

    u: np.ndarray
    v: np.ndarray
    r: int

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise ShapeError("factors must be 2-D")
        if self.u.shape[1] != self.r or self.v.shape[1] != self.r:
            raise ShapeError(
                f"rank {self.r} inconsistent with factors {self.u.shape}, {self.v.shape}"
            )

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])


@dataclass
class BlockLowRankFactors:
    """Per-tile rank-r factors: l (b1, b2, o, r) and rt (b1, b2, r, p)."""

    grid: BlockGrid
    l: np.ndarray
    rt: np.ndarray
    r: int

    def __post_init__(self):
        g = self.grid
        if self.l.shape != (g.b1, g.b2, g.o, self.r):
            raise ShapeError(f"l has shape {self.l.shape}, grid expects {(g.b1, g.b2, g.o, self.r)}")
        if self.rt.shape != (g.b1, g.b2, self.r, g.p):
            raise ShapeError(f"rt has shape {self.rt.shape}, grid expects {(g.b1, g.b2, self.r, g.p)}")

    @property
    def shape(self):
        return (self.grid.rows, self.grid.cols)


@dataclass
class MonarchFactors:
    """Block-diagonal factor pair for W = P1 . BD(lblocks) . P2^T . BD(rblocks).

    ``lblocks`` holds b diagonal blocks of shape (o, b*r); ``rblocks`` holds
    b diagonal blocks of shape (b*r, p). Tile (s, t) of the row-permuted
    matrix is recovered as lblocks[s][:, t::b] @ rblocks[t][s*r:(s+1)*r, :].
    """

    grid: BlockGrid
    lblocks: np.ndarray
    rblocks: np.ndarray
    r: int
    row_perm: StridePermutation
    out_perm: StridePermutation
    mid_perm: StridePermutation

    def __post_init__(self):
        g = self.grid
        if g.b1 != g.b2:
            raise ShapeError("Monarch requires a square block grid (b1 == b2)")
        b = g.b1
        if self.lblocks.shape != (b, g.o, b * self.r):
            raise ShapeError(f"lblocks has shape {self.lblocks.shape}, expected {(b, g.o, b * self.r)}")
        if self.rblocks.shape != (b, b * self.r, g.p):
            raise ShapeError(f"rblocks has shape {self.rblocks.shape}, expected {(b, b * self.r, g.p)}")

    @property
    def b(self) -> int:
        return self.grid.b1

    @property
    def shape(self):
        return (self.grid.rows, self.grid.cols)


Factorization = Union[Dense, LowRankFactors, BlockLowRankFactors, MonarchFactors]


def reconstruct(f: Factorization) -> np.ndarray:
    """Dense matrix represented by the factorization."""
    if isinstance(f, Dense):
        return np.array(f.w, dtype=np.float64)
    if isinstance(f, LowRankFactors):
        return matmul(f.u, f.v.T)
    if isinstance(f, BlockLowRankFactors):
        g = f.grid
        tiles = np.empty((g.b1, g.b2, g.o, g.p), dtype=np.float64)
        for i in range(g.b1):
            for j in range(g.b2):
                tiles[i, j] = matmul(f.l[i, j], f.rt[i, j])
        return join_blocks(tiles)
    if isinstance(f, MonarchFactors):
        g, b = f.grid, f.b
        permuted = np.empty((g.rows, g.cols), dtype=np.float64)
        for s in range(b):
            for t in range(b):
                permuted[s * g.o : (s + 1) * g.o, t * g.p : (t + 1) * g.p] = matmul(
                    f.lblocks[s][:, t::b], f.rblocks[t][s * f.r : (s + 1) * f.r, :]
                )
        return permute_rows(permuted, f.out_perm)
    raise TypeError(f"not a factorization: {type(f).__name__}")


def apply(f: Factorization, x: np.ndarray) -> np.ndarray:
    """Compute reconstruct(f) @ x along the factored fast path.

    ``x`` has shape (n, batch); the low-rank path costs O(r(m+n)*batch)
    instead of the dense O(m*n*batch).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("apply expects a 2-D activation batch (n, batch)")
    m, n = f.shape
    if x.shape[0] != n:
        raise ShapeError(f"input has {x.shape[0]} rows, factorization expects {n}")
    if isinstance(f, Dense):
        return matmul(f.w, x)
    if isinstance(f, LowRankFactors):
        return matmul(f.u, matmul(f.v.T, x))
    if isinstance(f, BlockLowRankFactors):
        g = f.grid
        out = np.zeros((m, x.shape[1]), dtype=np.float64)
        for i in range(g.b1):
            row = out[i * g.o : (i + 1) * g.o]
            for j in range(g.b2):
                row += matmul(f.l[i, j], matmul(f.rt[i, j], x[j * g.p : (j + 1) * g.p]))
        return out
    if isinstance(f, MonarchFactors):
        g, b, r = f.grid, f.b, f.r
        z = np.empty((b * b * r, x.shape[1]), dtype=np.float64)
        for t in range(b):
            z[t * b * r : (t + 1) * b * r] = matmul(f.rblocks[t], x[t * g.p : (t + 1) * g.p])
        h = permute_rows(z, f.mid_perm.inverse())  # h = P2^T z
        y = np.empty((m, x.shape[1]), dtype=np.float64)
        for s in range(b):
            y[s * g.o : (s + 1) * g.o] = matmul(f.lblocks[s], h[s * b * r : (s + 1) * b * r])
        return permute_rows(y, f.out_perm)  # y = P1 y'
    raise TypeError(f"not a factorization: {type(f).__name__}")


def param_count(f: Factorization) -> int:
    """Number of stored trainable scalars (weight matrices only, no biases)."""
    if isinstance(f, Dense):
        return int(f.w.size)
    if isinstance(f, LowRankFactors):
        return int(f.u.size + f.v.size)
    if isinstance(f, BlockLowRankFactors):
        return int(f.l.size + f.rt.size)
    if isinstance(f, MonarchFactors):
        return int(f.lblocks.size + f.rblocks.size)
    raise TypeError(f"not a factorization: {type(f).__name__}")
