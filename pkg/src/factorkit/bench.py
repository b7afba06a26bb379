"""Inference micro-benchmark for dense vs factorized apply.

Wall-clock CPU timings on a single thread; the first ``warmup_runs``
samples are discarded and the mean/std (population formula) are taken over
the remaining ``measured_runs``. Absolute milliseconds are machine-specific;
the reproducible quantities are orderings and flop-predicted ratios.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import BlockGrid, StridePermutation, make_rng
from .factors import (
    BlockLowRankFactors,
    Dense,
    Factorization,
    LowRankFactors,
    MonarchFactors,
    apply,
    param_count,
)


@dataclass(frozen=True)
class BenchConfig:
    warmup_runs: int = 2
    measured_runs: int = 8
    batch: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.warmup_runs < 1:
            raise ValueError("warmup_runs must be >= 1")
        if self.measured_runs < 3:
            raise ValueError("measured_runs must be >= 3")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class BenchResult:
    mean_ms: float
    std_ms: float
    samples_ms: list
    warmup_ms: list


def bench_apply(f: Factorization, cfg: BenchConfig) -> BenchResult:
    """Time apply() over a seeded random batch; warmups excluded from stats."""
    _, n = f.shape
    x = make_rng(cfg.seed).normal(size=(n, cfg.batch))
    samples = []
    for _ in range(cfg.warmup_runs + cfg.measured_runs):
        t0 = time.perf_counter()
        apply(f, x)
        samples.append((time.perf_counter() - t0) * 1e3)
    warmup = samples[: cfg.warmup_runs]
    measured = samples[cfg.warmup_runs :]
    mean = sum(measured) / len(measured)
    std = (sum((s - mean) ** 2 for s in measured) / len(measured)) ** 0.5
    return BenchResult(mean_ms=mean, std_ms=std, samples_ms=measured, warmup_ms=warmup)


def random_factorization(
    method: str, m: int, n: int, r: int | None = None, blocks: int = 4, seed: int = 0
) -> Factorization:
    """Random factors of the requested structure (for timing, not accuracy)."""
    rng = make_rng(seed)
    if method == "dense":
        return Dense(w=rng.normal(0.0, 1.0 / np.sqrt(n), size=(m, n)))
    if r is None:
        raise ValueError(f"method {method!r} requires a rank")
    if method == "low_rank":
        scale = 1.0 / np.sqrt(r)
        return LowRankFactors(
            u=rng.normal(0.0, scale, size=(m, r)),
            v=rng.normal(0.0, scale, size=(n, r)),
            r=r,
        )
    if method == "block_lr":
        grid = BlockGrid.for_shape(m, n, blocks, blocks)
        scale = 1.0 / np.sqrt(r)
        return BlockLowRankFactors(
            grid=grid,
            l=rng.normal(0.0, scale, size=(grid.b1, grid.b2, grid.o, r)),
            rt=rng.normal(0.0, scale, size=(grid.b1, grid.b2, r, grid.p)),
            r=r,
        )
    if method == "monarch":
        grid = BlockGrid.for_shape(m, n, blocks, blocks)
        b = blocks
        scale = 1.0 / np.sqrt(b * r)
        return MonarchFactors(
            grid=grid,
            lblocks=rng.normal(0.0, scale, size=(b, grid.o, b * r)),
            rblocks=rng.normal(0.0, scale, size=(b, b * r, grid.p)),
            r=r,
            row_perm=StridePermutation(m, b),
            out_perm=StridePermutation(m, m // b),
            mid_perm=StridePermutation(b * b * r, b),
        )
    raise ValueError(f"unknown method {method!r}")


def flop_ratio(f: Factorization) -> float:
    """Factored-apply flops relative to the dense matmul (per batch column)."""
    m, n = f.shape
    return param_count(f) / (m * n)
