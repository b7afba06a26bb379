"""factorkit: compression factorizations for dense weight matrices.

Three factorized parameterizations (rank-r low-rank, block low-rank, and
Monarch), SVD projection from pretrained weights, trainable factorized
layers with a staged-factorization scheduler, a fine-tuning stability
harness, and an inference micro-benchmark.
"""

from .arrayio import FormatError, read_array, write_array
from .bench import BenchConfig, BenchResult, bench_apply, random_factorization
from .core import (
    BlockGrid,
    ShapeError,
    StridePermutation,
    as_matrix,
    join_blocks,
    make_rng,
    matmul,
    permute_cols,
    permute_rows,
    split_blocks,
)
from .experiment import (
    DatasetSpec,
    ExperimentGrid,
    StabilityReport,
    aggregate,
    data_size_split,
    run_grid,
)
from .factorize import (
    BlockLowRankFactors,
    Dense,
    Factorization,
    LowRankFactors,
    MonarchFactors,
    RankSolution,
    apply,
    block_lr_project,
    low_rank_project,
    monarch_project,
    param_count,
    project,
    reconstruct,
    solve_rank,
)
from .staged import StagedPlan, build_plan, staged_train
from .svd import ConvergenceError, SvdResult, spectrum_curve, svd, truncate
from .train import (
    LR_GRID,
    FactorizedLinear,
    FactorizeSpec,
    RunRecord,
    SyntheticTask,
    ToyModel,
    TrainConfig,
    backward,
    build_toy_model,
    forward,
    lr_search,
    majority_accuracy,
    make_task,
    train_run,
)

__version__ = "0.1.0"
