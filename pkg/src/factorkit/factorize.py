"""Projection of dense matrices onto the factorized forms, plus rank solving.

``block_lr_project`` with a (1, 1, m, n) grid is bit-identical to
``low_rank_project``, and ``monarch_project`` is defined as block low-rank
projection of the row-stride-permuted matrix, repacked into block-diagonal
factors. Both reductions are verified as identities in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BlockGrid, ShapeError, StridePermutation, as_matrix, permute_rows
from .factors import (
    BlockLowRankFactors,
    Dense,
    Factorization,
    LowRankFactors,
    MonarchFactors,
    apply,
    param_count,
    reconstruct,
)
from .svd import svd, truncate

__all__ = [
    "Dense",
    "LowRankFactors",
    "BlockLowRankFactors",
    "MonarchFactors",
    "Factorization",
    "apply",
    "param_count",
    "reconstruct",
    "low_rank_project",
    "block_lr_project",
    "monarch_project",
    "project",
    "solve_rank",
    "RankSolution",
    "METHODS",
]

METHODS = ("dense", "low_rank", "block_lr", "monarch")


def low_rank_project(w: np.ndarray, r: int) -> LowRankFactors:
    """Best rank-r approximation of w (truncated SVD, sqrt-split factors)."""
    w = as_matrix(w)
    return truncate(svd(w), r)


def block_lr_project(w: np.ndarray, grid: BlockGrid, r: int) -> BlockLowRankFactors:
    """Independent best rank-r approximation of every tile of the grid."""
    w = as_matrix(w)
    grid.check(w)
    if not 1 <= r <= min(grid.o, grid.p):
        raise ValueError(f"rank {r} out of range [1, {min(grid.o, grid.p)}] for {grid.o}x{grid.p} blocks")
    l = np.empty((grid.b1, grid.b2, grid.o, r))
    rt = np.empty((grid.b1, grid.b2, r, grid.p))
    for i in range(grid.b1):
        for j in range(grid.b2):
            tile = w[i * grid.o : (i + 1) * grid.o, j * grid.p : (j + 1) * grid.p]
            fac = truncate(svd(tile), r)
            l[i, j] = fac.u
            rt[i, j] = fac.v.T
    return BlockLowRankFactors(grid=grid, l=l, rt=rt, r=r)


def monarch_project(w: np.ndarray, b: int, r: int) -> MonarchFactors:
    """Monarch factors from block low-rank projection of the permuted matrix.

    Rows of w are stride-permuted with (b, m) so that tile (s, t) of the
    permuted matrix collects the rows {i : i mod b == s} (distant rows) and
    the contiguous column band t. Each tile's rank-r factors are then packed
    into the block-diagonal pair: lblocks[s][:, tau*b + t] holds column tau
    of the tile factor L_st, and rblocks[t][s*r + tau, :] holds row tau of
    R_st. With P1 = perm(m/b, m) and P2 = perm(b, b*b*r), the product
    P1 . BD(lblocks) . P2^T . BD(rblocks) reproduces the inverse-permuted
    block low-rank reconstruction bit-for-bit.
    """
    w = as_matrix(w)
    m, n = w.shape
    if m % b != 0 or n % b != 0:
        raise ShapeError(f"block count {b} must divide both dimensions {m}x{n}")
    grid = BlockGrid(b, b, m // b, n // b)
    if not 1 <= r <= min(grid.o, grid.p):
        raise ValueError(f"rank {r} out of range [1, {min(grid.o, grid.p)}]")
    row_perm = StridePermutation(m, b)
    blr = block_lr_project(permute_rows(w, row_perm), grid, r)
    lblocks = np.empty((b, grid.o, b * r))
    rblocks = np.empty((b, b * r, grid.p))
    for s in range(b):
        for t in range(b):
            lblocks[s][:, t::b] = blr.l[s, t]
            rblocks[t][s * r : (s + 1) * r, :] = blr.rt[s, t]
    return MonarchFactors(
        grid=grid,
        lblocks=lblocks,
        rblocks=rblocks,
        r=r,
        row_perm=row_perm,
        out_perm=row_perm.inverse(),
        mid_perm=StridePermutation(b * b * r, b),
    )


def project(w: np.ndarray, method: str, r: int | None = None, blocks: int = 4) -> Factorization:
    """Dispatch to the projection for ``method`` ("dense" passes through)."""
    if method == "dense":
        return Dense(w=as_matrix(w))
    if r is None:
        raise ValueError(f"method {method!r} requires a rank")
    if method == "low_rank":
        return low_rank_project(w, r)
    if method == "block_lr":
        m, n = as_matrix(w).shape
        return block_lr_project(w, BlockGrid.for_shape(m, n, blocks, blocks), r)
    if method == "monarch":
        return monarch_project(w, blocks, r)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _cost(method: str, shapes, r: int, blocks: int) -> int:
    if method == "low_rank":
        return sum(r * (m + n) for m, n in shapes)
    if method in ("block_lr", "monarch"):
        return sum(blocks * r * (m + n) for m, n in shapes)
    raise ValueError(f"method {method!r} has no rank to solve")


def _max_rank(method: str, shapes, blocks: int) -> int:
    if method == "low_rank":
        return min(min(m, n) for m, n in shapes)
    for m, n in shapes:
        if m % blocks != 0 or n % blocks != 0:
            raise ShapeError(f"block count {blocks} does not divide layer shape {m}x{n}")
    return min(min(m // blocks, n // blocks) for m, n in shapes)


@dataclass(frozen=True)
class RankSolution:
    rank: int
    blocks: int
    achieved_params: int
    dense_params: int

    @property
    def ratio(self) -> float:
        return self.achieved_params / self.dense_params


def solve_rank(method: str, shapes, target_params: int, blocks: int = 4) -> RankSolution:
    """Largest uniform rank whose total parameter count fits the budget.

    The same rank is used for every listed layer; block methods use the
    given block count on both axes. Raises ValueError when even rank 1
    exceeds the budget.
    """
    shapes = [(int(m), int(n)) for m, n in shapes]
    if not shapes:
        raise ValueError("no layer shapes given")
    r_cap = _max_rank(method, shapes, blocks)
    if _cost(method, shapes, 1, blocks) > target_params:
        raise ValueError(
            f"budget {target_params} is below the rank-1 cost "
            f"{_cost(method, shapes, 1, blocks)} for method {method!r}"
        )
    r = r_cap
    while _cost(method, shapes, r, blocks) > target_params:
        r -= 1
    return RankSolution(
        rank=r,
        blocks=blocks if method in ("block_lr", "monarch") else 1,
        achieved_params=_cost(method, shapes, r, blocks),
        dense_params=sum(m * n for m, n in shapes),
    )
