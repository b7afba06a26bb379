"""Toy classifier with hand-derived reverse-mode gradients for every
factorized layer type, plus the training loop used by the stability
protocol.

The model is a chain of ``FactorizedLinear`` layers with GELU between them
and a softmax cross-entropy head. Activations are column batches: a layer
computes ``y = W x + bias`` with ``x`` of shape (n, batch). Gradients are
written out analytically per factor type and checked against central
finite differences in the test suite.

A training run is bit-reproducible: the config seed drives batch shuffling
(and, by convention, the caller seeds model initialization with the same
value), and all linear algebra uses the deterministic ``core.matmul``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .core import ShapeError, make_rng, matmul, permute_rows
from .factorize import project
from .factors import (
    BlockLowRankFactors,
    Dense,
    Factorization,
    LowRankFactors,
    MonarchFactors,
    apply,
    reconstruct,
)

# Six-point learning-rate grid of the fine-tuning protocol.
LR_GRID = (1e-4, 5e-4, 1e-5, 5e-5, 1e-6, 5e-6)


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int = 5
    batch_size: int = 32
    seed: int = 1
    optimizer: str = "sgd"  # "sgd" or "adamw"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    paper_protocol: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.paper_protocol and self.learning_rate not in LR_GRID:
            raise ValueError(
                f"learning rate {self.learning_rate} not in the protocol grid {LR_GRID}"
            )


@dataclass
class RunRecord:
    """Outcome of one training run; ``failed`` is exactly
    eval_accuracy <= majority_accuracy (NaN runs report accuracy 0.0)."""

    seed: int
    learning_rate: float
    method: str
    staged: bool
    final_train_loss: Optional[float]
    eval_accuracy: float
    majority_accuracy: float
    failed: bool
    diagnostic: Optional[str] = None
    plan: Optional[dict] = None
    dataset: Optional[str] = None
    dataset_train_size: Optional[int] = None
    budget: Optional[int] = None
    rank: Optional[int] = None
    blocks: Optional[int] = None
    key: Optional[str] = None


@dataclass(frozen=True)
class FactorizeSpec:
    """How a layer gets projected: method plus its rank/block knobs."""

    method: str
    rank: Optional[int] = None
    blocks: int = 4


@dataclass
class FactorizedLinear:
    factor: Factorization
    bias: np.ndarray
    trainable: dict = field(default_factory=dict)  # tensor name -> bool; default all

    @property
    def shape(self):
        return self.factor.shape

    def tensors(self):
        """(name, array) pairs of the stored trainable tensors."""
        f = self.factor
        if isinstance(f, Dense):
            yield "w", f.w
        elif isinstance(f, LowRankFactors):
            yield "u", f.u
            yield "v", f.v
        elif isinstance(f, BlockLowRankFactors):
            yield "l", f.l
            yield "rt", f.rt
        elif isinstance(f, MonarchFactors):
            yield "lblocks", f.lblocks
            yield "rblocks", f.rblocks
        yield "bias", self.bias

    def is_trainable(self, name: str) -> bool:
        return self.trainable.get(name, True)

    def project(self, spec: FactorizeSpec):
        """Replace the factor with a projection of its current dense form."""
        self.factor = project(reconstruct(self.factor), spec.method, spec.rank, spec.blocks)


@dataclass
class ToyModel:
    layers: list

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].shape[0]

    def layer_shapes(self):
        return [layer.shape for layer in self.layers]


def build_toy_model(widths, seed: int) -> ToyModel:
    """Dense model with N(0, 1/sqrt(fan_in)) weights and zero biases."""
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError("need at least one layer (two widths)")
    rng = make_rng(seed)
    layers = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))
        layers.append(FactorizedLinear(factor=Dense(w=w), bias=np.zeros(d_out)))
    return ToyModel(layers=layers)


def infer_method(model: ToyModel) -> str:
    names = {
        Dense: "dense",
        LowRankFactors: "low_rank",
        BlockLowRankFactors: "block_lr",
        MonarchFactors: "monarch",
    }
    kinds = {names[type(layer.factor)] for layer in model.layers}
    non_dense = kinds - {"dense"}
    if len(non_dense) > 1:
        return "mixed"
    return non_dense.pop() if non_dense else "dense"


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _layer_forward(layer: FactorizedLinear, x: np.ndarray):
    cache = {"x": x}
    f = layer.factor
    if isinstance(f, LowRankFactors):
        t = matmul(f.v.T, x)
        pre = matmul(f.u, t)
        cache["t"] = t
    elif isinstance(f, BlockLowRankFactors):
        g = f.grid
        t = np.empty((g.b1, g.b2, f.r, x.shape[1]))
        pre = np.zeros((g.rows, x.shape[1]))
        for i in range(g.b1):
            row = pre[i * g.o : (i + 1) * g.o]
            for j in range(g.b2):
                t[i, j] = matmul(f.rt[i, j], x[j * g.p : (j + 1) * g.p])
                row += matmul(f.l[i, j], t[i, j])
        cache["t"] = t
    elif isinstance(f, MonarchFactors):
        g, b, r = f.grid, f.b, f.r
        z = np.empty((b * b * r, x.shape[1]))
        for t_ in range(b):
            z[t_ * b * r : (t_ + 1) * b * r] = matmul(f.rblocks[t_], x[t_ * g.p : (t_ + 1) * g.p])
        h = permute_rows(z, f.mid_perm.inverse())
        y = np.empty((g.rows, x.shape[1]))
        for s in range(b):
            y[s * g.o : (s + 1) * g.o] = matmul(f.lblocks[s], h[s * b * r : (s + 1) * b * r])
        pre = permute_rows(y, f.out_perm)
        cache["h"] = h
    else:
        pre = apply(f, x)
    pre = pre + layer.bias[:, None]
    cache["pre"] = pre
    return pre, cache


def _layer_backward(layer: FactorizedLinear, cache: dict, g: np.ndarray):
    """Gradients for the layer's tensors plus the gradient w.r.t. its input."""
    x = cache["x"]
    f = layer.factor
    grads = {"bias": g.sum(axis=1)}
    if isinstance(f, Dense):
        grads["w"] = matmul(g, x.T)
        dx = matmul(f.w.T, g)
    elif isinstance(f, LowRankFactors):
        t = cache["t"]
        grads["u"] = matmul(g, t.T)
        dt = matmul(f.u.T, g)
        grads["v"] = matmul(x, dt.T)
        dx = matmul(f.v, dt)
    elif isinstance(f, BlockLowRankFactors):
        gr = f.grid
        t = cache["t"]
        dl = np.empty_like(f.l)
        drt = np.empty_like(f.rt)
        dx = np.zeros_like(x)
        for i in range(gr.b1):
            gi = g[i * gr.o : (i + 1) * gr.o]
            for j in range(gr.b2):
                dl[i, j] = matmul(gi, t[i, j].T)
                dt = matmul(f.l[i, j].T, gi)
                drt[i, j] = matmul(dt, x[j * gr.p : (j + 1) * gr.p].T)
                dx[j * gr.p : (j + 1) * gr.p] += matmul(f.rt[i, j].T, dt)
        grads["l"] = dl
        grads["rt"] = drt
    elif isinstance(f, MonarchFactors):
        gr, b, r = f.grid, f.b, f.r
        h = cache["h"]
        dy = permute_rows(g, f.out_perm.inverse())
        dlb = np.empty_like(f.lblocks)
        dh = np.empty_like(h)
        for s in range(b):
            dys = dy[s * gr.o : (s + 1) * gr.o]
            dlb[s] = matmul(dys, h[s * b * r : (s + 1) * b * r].T)
            dh[s * b * r : (s + 1) * b * r] = matmul(f.lblocks[s].T, dys)
        dz = permute_rows(dh, f.mid_perm)
        drb = np.empty_like(f.rblocks)
        dx = np.empty_like(x)
        for t_ in range(b):
            dzt = dz[t_ * b * r : (t_ + 1) * b * r]
            drb[t_] = matmul(dzt, x[t_ * gr.p : (t_ + 1) * gr.p].T)
            dx[t_ * gr.p : (t_ + 1) * gr.p] = matmul(f.rblocks[t_].T, dzt)
        grads["lblocks"] = dlb
        grads["rblocks"] = drb
    else:
        raise TypeError(f"not a factorization: {type(f).__name__}")
    return grads, dx


def forward(model: ToyModel, batch: np.ndarray):
    """Logits plus the cache needed by :func:`backward`."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.in_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input dim {model.in_dim}")
    caches = []
    last = len(model.layers) - 1
    for idx, layer in enumerate(model.layers):
        pre, cache = _layer_forward(layer, x)
        caches.append(cache)
        x = _gelu(pre) if idx < last else pre
    return x, caches


def backward(model: ToyModel, caches: list, loss_grad: np.ndarray):
    """Per-layer gradients (list of name->array dicts) for every stored tensor."""
    if len(caches) != len(model.layers):
        raise ValueError("cache does not match model (stale cache?)")
    g = np.asarray(loss_grad, dtype=np.float64)
    grads: list = [None] * len(model.layers)
    for idx in range(len(model.layers) - 1, -1, -1):
        if idx < len(model.layers) - 1:
            g = g * _gelu_grad(caches[idx]["pre"])
        grads[idx], g = _layer_backward(model.layers[idx], caches[idx], g)
    return grads


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits (C, batch)."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=0, keepdims=True)
    batch = logits.shape[1]
    idx = np.arange(batch)
    lse = np.log(expv.sum(axis=0))
    loss = float(np.mean(lse - shifted[labels, idx]))
    dlogits = probs.copy()
    dlogits[labels, idx] -= 1.0
    return loss, dlogits / batch


def majority_accuracy(labels) -> float:
    """Accuracy of the constant most-frequent-class predictor."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label vector")
    return float(np.bincount(labels).max() / labels.size)


class _Sgd:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, model: ToyModel, grads: list):
        lr, wd = self.cfg.learning_rate, self.cfg.weight_decay
        for layer, layer_grads in zip(model.layers, grads):
            for name, tensor in layer.tensors():
                if not layer.is_trainable(name):
                    continue
                if wd and name != "bias":
                    tensor -= lr * wd * tensor
                tensor -= lr * layer_grads[name]


class _AdamW:
    # Decoupled weight decay. Moments for tensors replaced mid-run (stage
    # projections swap layer tensors) start from zero.
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict = {}

    def step(self, model: ToyModel, grads: list):
        cfg = self.cfg
        for li, (layer, layer_grads) in enumerate(zip(model.layers, grads)):
            for name, tensor in layer.tensors():
                if not layer.is_trainable(name):
                    continue
                g = layer_grads[name]
                key = (li, name)
                st = self.state.get(key)
                if st is None or st[0].shape != g.shape:
                    st = (np.zeros_like(g), np.zeros_like(g), 0)
                m, v, step = st
                step += 1
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                self.state[key] = (m, v, step)
                mhat = m / (1 - cfg.beta1**step)
                vhat = v / (1 - cfg.beta2**step)
                if cfg.weight_decay and name != "bias":
                    tensor -= cfg.learning_rate * cfg.weight_decay * tensor
                tensor -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _make_optimizer(cfg: TrainConfig):
    return _AdamW(cfg) if cfg.optimizer == "adamw" else _Sgd(cfg)


@dataclass
class SyntheticTask:
    """Gaussian class clusters; features are stored as (n_features, N)."""

    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def n_train(self) -> int:
        return self.y_train.size

    @property
    def size_class(self) -> str:
        # strictly more than 10k training points counts as high-data
        return "high" if self.n_train > 10_000 else "low"


def make_task(
    name: str,
    n_features: int,
    n_classes: int,
    n_train: int,
    n_eval: int,
    separation: float,
    seed: int,
) -> SyntheticTask:
    """Balanced classification task with unit-variance clusters whose means
    sit ``separation`` apart in a random direction."""
    rng = make_rng(seed)
    means = rng.normal(size=(n_classes, n_features))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def sample(n):
        labels = np.tile(np.arange(n_classes), n // n_classes + 1)[:n]
        labels = labels[rng.permutation(n)]
        x = means[labels].T + rng.normal(size=(n_features, n))
        return x, labels

    x_train, y_train = sample(n_train)
    x_eval, y_eval = sample(n_eval)
    return SyntheticTask(name, x_train, y_train, x_eval, y_eval)


def evaluate_accuracy(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(model, x)
    return float(np.mean(np.argmax(logits, axis=0) == y))


def _run_loop(
    model: ToyModel,
    task: SyntheticTask,
    cfg: TrainConfig,
    schedule=None,
    plan_dict: Optional[dict] = None,
    staged: bool = False,
) -> RunRecord:
    """Shared loop for plain and staged runs.

    ``schedule`` is a list of (trigger_step, layer_indices, FactorizeSpec);
    due stages are projected before the step executes, and any stages still
    pending when the step budget runs out are projected at the end so every
    scheduled layer is factorized exactly once.
    """
    rng = make_rng(cfg.seed)
    opt = _make_optimizer(cfg)
    n = task.n_train
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"batch size {cfg.batch_size} exceeds training set size {n}")
    pending = list(schedule or [])
    step = 0
    nan_step = None
    final_losses: list = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for bi in range(steps_per_epoch):
            while pending and step >= pending[0][0]:
                _, layer_idxs, spec = pending.pop(0)
                for li in layer_idxs:
                    model.layers[li].project(spec)
            sel = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            logits, caches = forward(model, task.x_train[:, sel])
            loss, dlogits = softmax_xent(logits, task.y_train[sel])
            if not math.isfinite(loss):
                nan_step = step
                break
            grads = backward(model, caches, dlogits)
            opt.step(model, grads)
            epoch_losses.append(loss)
            step += 1
        if nan_step is not None:
            break
        final_losses = epoch_losses
    for _, layer_idxs, spec in pending:
        for li in layer_idxs:
            model.layers[li].project(spec)

    maj = majority_accuracy(task.y_train)
    if nan_step is not None:
        final_loss, acc, diagnostic = None, 0.0, f"nan_loss_at_step_{nan_step}"
    else:
        final_loss = float(np.mean(final_losses)) if final_losses else None
        acc, diagnostic = evaluate_accuracy(model, task.x_eval, task.y_eval), None
    return RunRecord(
        seed=cfg.seed,
        learning_rate=cfg.learning_rate,
        method=infer_method(model),
        staged=staged,
        final_train_loss=final_loss,
        eval_accuracy=acc,
        majority_accuracy=maj,
        failed=acc <= maj,
        diagnostic=diagnostic,
        plan=plan_dict,
        dataset=task.name,
        dataset_train_size=task.n_train,
    )


def train_run(model: ToyModel, task: SyntheticTask, cfg: TrainConfig) -> RunRecord:
    """Train to the epoch budget and score against the majority baseline."""
    return _run_loop(model, task, cfg)


def lr_search(
    model_factory: Callable[[], ToyModel],
    task: SyntheticTask,
    grid=LR_GRID,
    base_cfg: Optional[TrainConfig] = None,
) -> Optional[float]:
    """Grid member whose one-epoch run reaches the smallest training loss.

    Ties go to the larger learning rate; runs ending in NaN are excluded.
    Returns None when every candidate diverges.
    """
    if not grid:
        raise ValueError("empty learning-rate grid")
    base = base_cfg or TrainConfig(learning_rate=grid[0])
    best = None
    for lr in grid:
        cfg = replace(base, learning_rate=lr, epochs=1, paper_protocol=False)
        rec = train_run(model_factory(), task, cfg)
        if rec.final_train_loss is None or not math.isfinite(rec.final_train_loss):
            continue
        cand = (rec.final_train_loss, -lr)
        if best is None or cand < best:
            best = cand
    return None if best is None else -best[1]
