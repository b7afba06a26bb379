"""Command-line interface.

Subcommands: factorize, reconstruct, spectrum, experiment, bench, plan.
Every command writes ``manifest.json`` with its fully resolved configuration
into the output directory, so a run is reproducible from the manifest alone.
Errors exit non-zero with a single JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import bundle, experiment, staged
from .arrayio import read_array
from .core import ShapeError
from .factorize import METHODS, param_count, project, reconstruct, solve_rank
from .svd import spectrum_curve


def _write_manifest(out_dir: Path, command: str, config: dict, results: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": config}
    if results:
        payload["results"] = results
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2)


def _load_json_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config parse error in {path} at line {exc.lineno}, column {exc.colno}: {exc.msg}")


def cmd_factorize(args) -> int:
    manifest, layers = bundle.load_bundle(args.input)
    if manifest["method"] != "dense":
        raise ValueError(f"input bundle is already factorized ({manifest['method']})")
    shapes = [f.shape for _, f in layers]
    if args.method != "dense" and args.blocks:
        bad = [f"{m}x{n}" for m, n in shapes if args.method != "low_rank" and (m % args.blocks or n % args.blocks)]
        if bad:
            raise ShapeError(f"block count {args.blocks} does not divide layer shapes: {', '.join(bad)}")
    if args.budget is not None:
        sol = solve_rank(args.method, shapes, args.budget, args.blocks)
        ranks = [sol.rank] * len(layers)
    elif args.rank == "full":
        if args.method == "low_rank":
            ranks = [min(m, n) for m, n in shapes]
        else:
            ranks = [min(m // args.blocks, n // args.blocks) for m, n in shapes]
    else:
        ranks = [int(args.rank)] * len(layers)

    out_layers = []
    per_layer = []
    achieved = 0
    dense_total = 0
    for (name, f), r in zip(layers, ranks):
        w = f.w
        fac = project(w, args.method, r, args.blocks)
        err = float(np.linalg.norm(w - reconstruct(fac)))
        rel = err / float(np.linalg.norm(w)) if np.linalg.norm(w) else 0.0
        per_layer.append({"name": name, "rank": r, "frobenius_error": err, "relative_error": rel})
        achieved += param_count(fac)
        dense_total += w.size
        out_layers.append((name, fac))

    uniform_rank = ranks[0] if len(set(ranks)) == 1 else None
    results = {
        "achieved_params": achieved,
        "dense_params": dense_total,
        "compression_ratio": achieved / dense_total,
        "per_layer": per_layer,
    }
    bundle.save_bundle(
        args.out_dir, out_layers, args.method,
        rank=uniform_rank,
        blocks=args.blocks if args.method in ("block_lr", "monarch") else None,
        extra=results,
    )
    _write_manifest(
        Path(args.out_dir), "factorize",
        {"input": str(args.input), "method": args.method, "rank": args.rank,
         "budget": args.budget, "blocks": args.blocks, "seed": args.seed},
        results,
    )
    print(json.dumps(results["per_layer"], indent=2))
    return 0


def cmd_reconstruct(args) -> int:
    _, layers = bundle.load_bundle(args.input)
    dense_layers = [(name, project(reconstruct(f), "dense")) for name, f in layers]
    bundle.save_bundle(args.out_dir, dense_layers, "dense")
    _write_manifest(Path(args.out_dir), "reconstruct", {"input": str(args.input)})
    return 0


def cmd_spectrum(args) -> int:
    w = read_array(args.input)
    curve = spectrum_curve(w)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        out = out_dir / "spectrum.json"
        with open(out, "w") as fh:
            json.dump([{"r": r, "relative_error": e} for r, e in curve], fh, indent=2)
    else:
        out = out_dir / "spectrum.csv"
        with open(out, "w") as fh:
            fh.write("r,relative_error\n")
            for r, e in curve:
                fh.write(f"{r},{e!r}\n")
    _write_manifest(out_dir, "spectrum", {"input": str(args.input), "format": args.format})
    print(str(out))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_json_config(args.config)
    grid = experiment.ExperimentGrid.from_dict(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = out_dir / "ledger.jsonl"
    records = experiment.run_grid(grid, ledger_path, jobs=args.jobs)
    report = experiment.aggregate(records)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(
            {"cells": report.to_dict(), "by_size": experiment.data_size_split(report)},
            fh, indent=2,
        )
    with open(out_dir / "report.csv", "w") as fh:
        fh.write(report.to_csv())
    _write_manifest(out_dir, "experiment", cfg, {"records": len(records)})
    print(report.to_csv(), end="")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_json_config(args.config) if args.config else {}
    shapes = [tuple(s) for s in cfg.get("shapes", [[768, 768]])]
    methods = cfg.get("methods", list(METHODS))
    blocks = cfg.get("blocks", 4)
    bc = bench_mod.BenchConfig(
        warmup_runs=cfg.get("warmup_runs", 2),
        measured_runs=cfg.get("measured_runs", 8),
        batch=cfg.get("batch", 100),
        seed=cfg.get("seed", args.seed),
    )
    rows = []
    samples = {}
    for m, n in shapes:
        for method in methods:
            if method == "dense":
                rank = None
            elif "rank" in cfg:
                rank = cfg["rank"]
            else:
                rank = solve_rank(method, [(m, n)], cfg.get("budget", m * n // 4), blocks).rank
            f = bench_mod.random_factorization(method, m, n, rank, blocks, seed=bc.seed)
            res = bench_mod.bench_apply(f, bc)
            rows.append((method, param_count(f), res.mean_ms, res.std_ms))
            samples[f"{method}_{m}x{n}"] = res.samples_ms
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = ["method,params,mean_ms,std_ms"] + [
        f"{meth},{p},{mean:.4f},{std:.4f}" for meth, p, mean, std in rows
    ]
    (out_dir / "bench.csv").write_text("\n".join(csv_lines) + "\n")
    with open(out_dir / "bench_samples.json", "w") as fh:
        json.dump(samples, fh, indent=2)
    _write_manifest(out_dir, "bench", {**cfg, **asdict(bc)}, {"rows": len(rows)})
    print("\n".join(csv_lines))
    return 0


def cmd_plan(args) -> int:
    plan = staged.build_plan(args.layers, args.order, args.steps_per_stage, args.layers_per_stage)
    out = json.dumps(plan.to_dict(), indent=2)
    _write_manifest(
        Path(args.out_dir), "plan",
        {"layers": args.layers, "order": args.order,
         "steps_per_stage": args.steps_per_stage, "layers_per_stage": args.layers_per_stage},
        plan.to_dict(),
    )
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factorkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default="factorkit_out")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("factorize", help="project a dense bundle onto a factorized form")
    p.add_argument("--input", required=True)
    p.add_argument("--method", required=True, choices=[m for m in METHODS if m != "dense"])
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--rank", help="integer rank, or 'full'")
    group.add_argument("--budget", type=int, help="total parameter budget")
    p.add_argument("--blocks", type=int, default=4)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("reconstruct", help="densify a factorized bundle")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("spectrum", help="reconstruction error vs retained singular values")
    p.add_argument("--input", required=True, help="a single FKT1 matrix file")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("experiment", help="run a stability sweep from a JSON grid config")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bench", help="latency micro-benchmark")
    p.add_argument("--config", help="JSON bench config (shapes, methods, rank/budget, ...)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", help="print a staged-factorization plan")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--order", choices=staged.ORDERS, default=staged.HIGH_TO_LOW)
    p.add_argument("--steps-per-stage", type=int, default=staged.DEFAULT_STEPS_PER_STAGE)
    p.add_argument("--layers-per-stage", type=int, default=1)
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
