"""Checkpoint bundles: a directory of FKT1 array files plus a JSON manifest.

Manifest schema::

    {"method": "dense|low_rank|block_lr|monarch", "rank": r, "blocks": b,
     "layers": [{"name": ..., "rows": m, "cols": n, "files": [...]}]}

Factor payloads are stored 2-D; 4-D block tensors are flattened with their
leading axes folded into rows (l as (b1*b2*o, r), rt as (b1*b2*r, p),
lblocks as (b*o, b*r), rblocks as (b*b*r, p)) and unfolded on load using
the manifest's rank/blocks and the layer shape.
"""

from __future__ import annotations

import json
from pathlib import Path

from .arrayio import read_array, write_array
from .core import BlockGrid, StridePermutation
from .factors import (
    BlockLowRankFactors,
    Dense,
    Factorization,
    LowRankFactors,
    MonarchFactors,
)

MANIFEST_NAME = "manifest.json"


def _layer_files(name: str, f: Factorization) -> dict:
    if isinstance(f, Dense):
        return {f"{name}.w.fkt": f.w}
    if isinstance(f, LowRankFactors):
        return {f"{name}.u.fkt": f.u, f"{name}.v.fkt": f.v}
    if isinstance(f, BlockLowRankFactors):
        g = f.grid
        return {
            f"{name}.l.fkt": f.l.reshape(g.b1 * g.b2 * g.o, f.r),
            f"{name}.rt.fkt": f.rt.reshape(g.b1 * g.b2 * f.r, g.p),
        }
    if isinstance(f, MonarchFactors):
        g, b = f.grid, f.b
        return {
            f"{name}.lblocks.fkt": f.lblocks.reshape(b * g.o, b * f.r),
            f"{name}.rblocks.fkt": f.rblocks.reshape(b * b * f.r, g.p),
        }
    raise TypeError(f"not a factorization: {type(f).__name__}")


def save_bundle(directory, layers, method: str, rank=None, blocks=None, extra: dict | None = None):
    """Write layer factorizations and the manifest into ``directory``.

    ``layers`` is a list of (name, Factorization) pairs; ``extra`` is merged
    into the manifest (provenance such as projection errors).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"method": method, "rank": rank, "blocks": blocks, "layers": []}
    for name, f in layers:
        files = _layer_files(name, f)
        for fname, arr in files.items():
            write_array(directory / fname, arr)
        m, n = f.shape
        manifest["layers"].append(
            {"name": name, "rows": m, "cols": n, "files": sorted(files)}
        )
    if extra:
        manifest.update(extra)
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_bundle(directory):
    """Read a bundle back; returns (manifest, [(name, Factorization), ...])."""
    directory = Path(directory)
    with open(directory / MANIFEST_NAME) as fh:
        manifest = json.load(fh)
    method = manifest["method"]
    rank = manifest.get("rank")
    blocks = manifest.get("blocks")
    layers = []
    for entry in manifest["layers"]:
        name, m, n = entry["name"], entry["rows"], entry["cols"]
        if method == "dense":
            f: Factorization = Dense(w=read_array(directory / f"{name}.w.fkt"))
        elif method == "low_rank":
            f = LowRankFactors(
                u=read_array(directory / f"{name}.u.fkt"),
                v=read_array(directory / f"{name}.v.fkt"),
                r=rank,
            )
        elif method == "block_lr":
            grid = BlockGrid.for_shape(m, n, blocks, blocks)
            f = BlockLowRankFactors(
                grid=grid,
                l=read_array(directory / f"{name}.l.fkt").reshape(
                    grid.b1, grid.b2, grid.o, rank
                ),
                rt=read_array(directory / f"{name}.rt.fkt").reshape(
                    grid.b1, grid.b2, rank, grid.p
                ),
                r=rank,
            )
        elif method == "monarch":
            grid = BlockGrid.for_shape(m, n, blocks, blocks)
            b = blocks
            f = MonarchFactors(
                grid=grid,
                lblocks=read_array(directory / f"{name}.lblocks.fkt").reshape(
                    b, grid.o, b * rank
                ),
                rblocks=read_array(directory / f"{name}.rblocks.fkt").reshape(
                    b, b * rank, grid.p
                ),
                r=rank,
                row_perm=StridePermutation(m, b),
                out_perm=StridePermutation(m, m // b),
                mid_perm=StridePermutation(b * b * rank, b),
            )
        else:
            raise ValueError(f"unknown method {method!r} in manifest")
        layers.append((name, f))
    return manifest, layers
