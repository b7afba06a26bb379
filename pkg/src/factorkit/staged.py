"""Staged factorization: project layer subsets in stages between training
steps instead of factorizing the whole model at once.

High-to-low order starts from the last layer and works backward; each stage
is followed by a fixed number of optimizer steps (500 in the full protocol,
50 as the desk-scale default). Stage projections use each layer's current,
partially trained weights.
"""

from __future__ import annotations

from dataclasses import dataclass

from .train import FactorizeSpec, RunRecord, SyntheticTask, ToyModel, TrainConfig, _run_loop
from .factors import Dense

HIGH_TO_LOW = "high_to_low"
LOW_TO_HIGH = "low_to_high"
ALL_AT_ONCE = "all_at_once"
ORDERS = (HIGH_TO_LOW, LOW_TO_HIGH, ALL_AT_ONCE)

DEFAULT_STEPS_PER_STAGE = 500
TOY_STEPS_PER_STAGE = 50


@dataclass(frozen=True)
class StagedPlan:
    """Ordered stages of layer indices; disjoint and jointly exhaustive."""

    order: str
    steps_per_stage: int
    stages: tuple

    def validate(self, layer_count: int):
        seen: set = set()
        for stage in self.stages:
            if not stage:
                raise ValueError("empty stage")
            if seen & set(stage):
                raise ValueError("stages overlap")
            seen |= set(stage)
        if seen != set(range(layer_count)):
            raise ValueError(
                f"stages cover {sorted(seen)}, expected all of 0..{layer_count - 1}"
            )

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "steps_per_stage": self.steps_per_stage,
            "stages": [list(stage) for stage in self.stages],
        }


def build_plan(
    layer_count: int,
    order: str = HIGH_TO_LOW,
    steps_per_stage: int = DEFAULT_STEPS_PER_STAGE,
    layers_per_stage: int = 1,
) -> StagedPlan:
    if layer_count < 1:
        raise ValueError("layer_count must be positive")
    if layers_per_stage < 1:
        raise ValueError("layers_per_stage must be positive")
    if steps_per_stage < 0:
        raise ValueError("steps_per_stage must be non-negative")
    if order not in ORDERS:
        raise ValueError(f"unknown order {order!r}; expected one of {ORDERS}")
    if order == ALL_AT_ONCE:
        stages = (tuple(range(layer_count)),)
    else:
        idx = list(range(layer_count))
        if order == HIGH_TO_LOW:
            idx.reverse()
        chunks = [idx[i : i + layers_per_stage] for i in range(0, layer_count, layers_per_stage)]
        stages = tuple(tuple(sorted(chunk)) for chunk in chunks)
    plan = StagedPlan(order=order, steps_per_stage=steps_per_stage, stages=stages)
    plan.validate(layer_count)
    return plan


def staged_train(
    model: ToyModel,
    task: SyntheticTask,
    cfg: TrainConfig,
    plan: StagedPlan,
    spec: FactorizeSpec,
) -> RunRecord:
    """Train with stage-by-stage projection, then to the epoch budget.

    Stage k is projected once the global step count reaches
    k * steps_per_stage; stages still pending when the budget ends are
    projected at the end, so every layer is factorized exactly once.
    """
    plan.validate(len(model.layers))
    for li, layer in enumerate(model.layers):
        if not isinstance(layer.factor, Dense):
            raise ValueError(f"layer {li} is already factorized; staged runs start dense")
    schedule = [
        (k * plan.steps_per_stage, stage, spec) for k, stage in enumerate(plan.stages)
    ]
    return _run_loop(model, task, cfg, schedule=schedule, plan_dict=plan.to_dict(), staged=True)
