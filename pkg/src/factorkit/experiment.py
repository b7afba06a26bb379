"""Stability-protocol orchestration: seed x learning-rate x method x staging
sweeps, a resumable JSON-lines ledger, and failed-run aggregation.

Protocol shape: for every dataset a dense base model is trained once (the
"pretrained" checkpoint all runs share), and each run copies it, re-seeds
the classifier head, projects per its method, and fine-tunes. Aggregation
then follows the fine-tuning protocol: within every
(method, staged, budget, dataset) sub-cell the learning rate is selected by
the smallest final training loss of the lowest seed's run (ties to the
larger rate, NaN runs excluded), and the sub-cell's verdict is taken over
all seeds at the selected rate. A seed is unstable when its run failed,
i.e. scored at or below the majority classifier.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .core import make_rng
from .factorize import METHODS, solve_rank
from .staged import HIGH_TO_LOW, TOY_STEPS_PER_STAGE, build_plan, staged_train
from .train import (
    LR_GRID,
    FactorizeSpec,
    RunRecord,
    ToyModel,
    TrainConfig,
    build_toy_model,
    train_run,
    make_task,
)

DEFAULT_SEEDS = (1, 2, 3, 4, 5, 6)
HIGH_DATA_SIZE = 12_800
LOW_DATA_SIZE = 1_280


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n_features: int = 32
    n_classes: int = 8
    n_train: int = LOW_DATA_SIZE
    n_eval: int = 512
    separation: float = 3.0
    seed: int = 7

    @property
    def size_class(self) -> str:
        return "high" if self.n_train > 10_000 else "low"

    def build(self):
        return make_task(
            self.name, self.n_features, self.n_classes, self.n_train,
            self.n_eval, self.separation, self.seed,
        )


@dataclass(frozen=True)
class ExperimentGrid:
    methods: tuple
    datasets: tuple
    budgets: tuple = ()
    staged: tuple = (False, True)
    seeds: tuple = DEFAULT_SEEDS
    learning_rates: tuple = LR_GRID
    widths: tuple = (32, 128, 128, 8)
    epochs: int = 3
    batch_size: int = 32
    optimizer: str = "adamw"
    blocks: int = 4
    stage_order: str = HIGH_TO_LOW
    steps_per_stage: int = TOY_STEPS_PER_STAGE
    layers_per_stage: int = 1
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    pretrain_optimizer: str = "adamw"
    pretrain_seed: int = 0
    reinit_head: bool = True

    def __post_init__(self):
        if not self.methods or not self.datasets or not self.staged:
            raise ValueError("methods, datasets, and staged must be non-empty")
        if not self.seeds or not self.learning_rates:
            raise ValueError("seeds and learning_rates must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if any(m != "dense" for m in self.methods) and not self.budgets:
            raise ValueError("factorized methods need at least one parameter budget")
        for ds in self.datasets:
            if ds.n_features != self.widths[0] or ds.n_classes != self.widths[-1]:
                raise ValueError(
                    f"dataset {ds.name!r} ({ds.n_features} features, {ds.n_classes} "
                    f"classes) does not match model widths {self.widths}"
                )

    def layer_shapes(self):
        return [(o, i) for i, o in zip(self.widths[:-1], self.widths[1:])]

    def points(self):
        """Grid points; the staged and budget axes collapse for dense."""
        for method in self.methods:
            budgets = self.budgets if method != "dense" else (None,)
            staged_axis = self.staged if method != "dense" else (False,)
            for budget in budgets:
                for staged in staged_axis:
                    for ds in self.datasets:
                        for lr in self.learning_rates:
                            for seed in self.seeds:
                                yield {
                                    "method": method,
                                    "staged": staged,
                                    "seed": seed,
                                    "learning_rate": lr,
                                    "budget": budget,
                                    "dataset": ds.name,
                                }

    @staticmethod
    def from_dict(cfg: dict) -> "ExperimentGrid":
        cfg = dict(cfg)
        datasets = tuple(DatasetSpec(**d) for d in cfg.pop("datasets"))
        tuple_keys = ("methods", "budgets", "staged", "seeds", "learning_rates", "widths")
        kwargs = {k: tuple(v) if k in tuple_keys else v for k, v in cfg.items()}
        return ExperimentGrid(datasets=datasets, **kwargs)


def run_key(point: dict) -> str:
    """Stable identity of a grid point, for ledger resumption."""
    blob = json.dumps(
        [point["method"], point["staged"], point["seed"], point["learning_rate"],
         point["budget"], point["dataset"]],
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# Pretrained base models, keyed per (grid, dataset); process-local.
_BASE_CACHE: dict = {}


def _base_model(grid: ExperimentGrid, ds: DatasetSpec, task) -> ToyModel:
    key = (grid.widths, grid.pretrain_epochs, grid.pretrain_lr,
           grid.pretrain_optimizer, grid.pretrain_seed, grid.batch_size, ds)
    if key not in _BASE_CACHE:
        model = build_toy_model(grid.widths, seed=grid.pretrain_seed)
        cfg = TrainConfig(
            learning_rate=grid.pretrain_lr,
            epochs=grid.pretrain_epochs,
            batch_size=grid.batch_size,
            seed=grid.pretrain_seed,
            optimizer=grid.pretrain_optimizer,
        )
        train_run(model, task, cfg)
        _BASE_CACHE[key] = model
    return copy.deepcopy(_BASE_CACHE[key])


def _fresh_model(grid: ExperimentGrid, ds: DatasetSpec, task, seed: int) -> ToyModel:
    """Copy of the dataset's pretrained base with a freshly seeded head."""
    model = _base_model(grid, ds, task)
    if grid.reinit_head:
        rng = make_rng(seed)
        head = model.layers[-1]
        m, n = head.shape
        head.factor.w[:] = rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, n))
        head.bias[:] = 0.0
    return model


def run_point(grid: ExperimentGrid, point: dict) -> RunRecord:
    """Execute one grid point end to end (pure given grid + point)."""
    ds = next(d for d in grid.datasets if d.name == point["dataset"])
    task = ds.build()
    cfg = TrainConfig(
        learning_rate=point["learning_rate"],
        epochs=grid.epochs,
        batch_size=grid.batch_size,
        seed=point["seed"],
        optimizer=grid.optimizer,
    )
    model = _fresh_model(grid, ds, task, point["seed"])
    rank = blocks = None
    if point["method"] == "dense":
        record = train_run(model, task, cfg)
    else:
        sol = solve_rank(point["method"], grid.layer_shapes(), point["budget"], grid.blocks)
        rank, blocks = sol.rank, sol.blocks
        spec = FactorizeSpec(method=point["method"], rank=rank, blocks=blocks)
        if point["staged"]:
            plan = build_plan(
                len(model.layers), grid.stage_order, grid.steps_per_stage,
                grid.layers_per_stage,
            )
            record = staged_train(model, task, cfg, plan, spec)
        else:
            for layer in model.layers:
                layer.project(spec)
            record = train_run(model, task, cfg)
    record.budget = point["budget"]
    record.rank = rank
    record.blocks = blocks
    record.key = run_key(point)
    return record


def load_ledger(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RunRecord(**json.loads(line)))
    return records


def append_record(path, record: RunRecord):
    with open(path, "a") as fh:
        fh.write(json.dumps(asdict(record)) + "\n")


def run_grid(grid: ExperimentGrid, ledger_path, jobs: int = 1, on_error=None) -> list:
    """Run every missing grid point, appending to the ledger as runs finish.

    Existing records are skipped by key, so an interrupted sweep resumes
    without duplicates. Per-point errors are reported through ``on_error``
    (or stderr) without aborting the sweep.
    """
    records = load_ledger(ledger_path)
    have = {r.key for r in records}
    todo = [p for p in grid.points() if run_key(p) not in have]
    if jobs > 1 and todo:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(p, pool.submit(run_point, grid, p)) for p in todo]
            for point, fut in futures:
                try:
                    rec = fut.result()
                except Exception as exc:  # surface and continue
                    _report_error(point, exc, on_error)
                    continue
                append_record(ledger_path, rec)
                records.append(rec)
    else:
        for point in todo:
            try:
                rec = run_point(grid, point)
            except Exception as exc:
                _report_error(point, exc, on_error)
                continue
            append_record(ledger_path, rec)
            records.append(rec)
    return records


def _report_error(point: dict, exc: Exception, on_error):
    if on_error is not None:
        on_error(point, exc)
    else:
        import sys

        print(f"run {run_key(point)} failed: {exc!r}", file=sys.stderr)


@dataclass
class CellStats:
    attempted: int = 0
    failed: int = 0
    accuracies: list = field(default_factory=list)  # successful runs only
    sub_cells: list = field(default_factory=list)

    @property
    def unstable_pct(self) -> float:
        return 100.0 * self.failed / self.attempted if self.attempted else 0.0

    @property
    def mean_eval_accuracy(self) -> Optional[float]:
        # absent when every run in the cell failed (the tables' dash)
        return sum(self.accuracies) / len(self.accuracies) if self.accuracies else None


@dataclass
class StabilityReport:
    cells: dict  # "method/staged|unstaged" -> CellStats

    def to_dict(self) -> dict:
        return {
            key: {
                "attempted": c.attempted,
                "failed": c.failed,
                "unstable_pct": c.unstable_pct,
                "mean_eval_accuracy": c.mean_eval_accuracy,
                "sub_cells": c.sub_cells,
            }
            for key, c in self.cells.items()
        }

    def to_csv(self) -> str:
        lines = ["method,staged,attempted,failed,unstable_pct,mean_eval_accuracy"]
        for key, c in sorted(self.cells.items()):
            method, staged = key.split("/")
            acc = "" if c.mean_eval_accuracy is None else f"{c.mean_eval_accuracy:.6f}"
            lines.append(f"{method},{staged},{c.attempted},{c.failed},{c.unstable_pct:.4f},{acc}")
        return "\n".join(lines) + "\n"


def cell_key(method: str, staged: bool) -> str:
    return f"{method}/{'staged' if staged else 'unstaged'}"


def _select_lr(sub_records: list) -> float:
    search_seed = min(r.seed for r in sub_records)
    best = None
    for rec in sub_records:
        if rec.seed != search_seed:
            continue
        loss = rec.final_train_loss
        if loss is None or not math.isfinite(loss):
            continue
        cand = (loss, -rec.learning_rate)
        if best is None or cand < best:
            best = cand
    if best is None:  # every search run diverged; the cell is failed anyway
        return max(r.learning_rate for r in sub_records)
    return -best[1]


def aggregate(records: list) -> StabilityReport:
    """Pure function of the ledger; recomputable and order-independent."""
    if not records:
        raise ValueError("empty ledger")
    groups: dict = {}
    for rec in records:
        groups.setdefault(
            (rec.method, rec.staged, rec.budget, rec.dataset), []
        ).append(rec)
    cells: dict = {}
    for (method, staged, budget, dataset), sub in sorted(
        groups.items(), key=lambda kv: str(kv[0])
    ):
        selected_lr = _select_lr(sub)
        chosen = [r for r in sub if r.learning_rate == selected_lr]
        cell = cells.setdefault(cell_key(method, staged), CellStats())
        failed_seeds = sorted(r.seed for r in chosen if r.failed)
        cell.attempted += len(chosen)
        cell.failed += len(failed_seeds)
        cell.accuracies.extend(r.eval_accuracy for r in chosen if not r.failed)
        cell.sub_cells.append(
            {
                "budget": budget,
                "dataset": dataset,
                "size_class": _size_class(sub),
                "selected_lr": selected_lr,
                "attempted": len(chosen),
                "failed": len(failed_seeds),
                "failed_seeds": failed_seeds,
            }
        )
    return StabilityReport(cells=cells)


def _size_class(records: list) -> str:
    n = records[0].dataset_train_size
    return "high" if n is not None and n > 10_000 else "low"


def data_size_split(report: StabilityReport) -> dict:
    """Unstable percentage per (method, size-class), pooled over staging."""
    counts: dict = {}
    for key, cell in report.cells.items():
        method = key.split("/")[0]
        for sc in cell.sub_cells:
            attempted, failed = counts.get((method, sc["size_class"]), (0, 0))
            counts[(method, sc["size_class"])] = (
                attempted + sc["attempted"],
                failed + sc["failed"],
            )
    return {
        f"{method}/{size}": 100.0 * failed / attempted
        for (method, size), (attempted, failed) in sorted(counts.items())
        if attempted
    }
