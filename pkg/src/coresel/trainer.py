"""The training loop over a task stream.

Each iteration takes one candidate batch from the current task's shuffled
stream: score and select a subset, form the objective gradient (selected-batch
mean loss plus lambda times a replay-batch mean loss), optionally project it
away from conflicting with the replay gradient, step, and stage the selected
examples for the end-of-task buffer commit. After each task the model is
evaluated on every test set seen so far, filling one row of the accuracy
matrix.

Every random draw derives from (seed, task, epoch, iteration, purpose tag),
so a run is a pure function of (stream, config).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .datastream import TaskStream, stream_manifest
from .errors import DimensionError, EmptyInputError
from .ioutil import atomic_write_text
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting
from .model import (
    GradSelector,
    ParamSet,
    accuracy,
    embeddings,
    init_params,
    mean_gradient,
    per_example_gradients,
    save_checkpoint,
    sgd_step,
)
from .replay import (
    Coreset,
    StoredExample,
    examples_as_arrays,
    format_sig,
    sample_items,
    write_dump,
)
from .selection import (
    ReservoirState,
    SelectionConfig,
    cosines_to_vector,
    kmeans_embedding_select,
    reservoir_update,
    score_batch,
    select_topk,
    uniform_select,
)

# Purpose tags for seed derivation.
_T_INIT = 0
_T_SHUFFLE = 1
_T_BUFFER = 2
_T_SELECT = 3
_T_COMMIT_REF = 4
_T_COMMIT_RANK = 5
_T_RESERVOIR = 6


@dataclass(frozen=True)
class TrainConfig:
    stream_batch_size: int = 100
    buffer_batch_size: int = 10
    buffer_capacity: int = 200
    lr0: float = 0.005
    lr_decay: float = 0.8
    epochs: int = 1
    lam: float = 1.0
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    agem: bool = False
    grad_selector: GradSelector | None = None
    hidden: tuple[int, ...] = (256, 256)
    num_classes: int = 10
    seed: int = 0
    log_scores: bool = False
    # Test seams: replace per-iteration index choice / commit preference order.
    selection_override: object = None
    commit_override: object = None

    def __post_init__(self):
        if self.selection.kappa > self.stream_batch_size:
            raise ValueError(
                f"kappa {self.selection.kappa} exceeds stream batch size {self.stream_batch_size}"
            )
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.buffer_batch_size < 1:
            raise ValueError(f"buffer_batch_size must be >= 1, got {self.buffer_batch_size}")
        if self.buffer_capacity < 0:
            raise ValueError(f"buffer_capacity must be nonnegative, got {self.buffer_capacity}")


@dataclass(frozen=True)
class StreamBatch:
    task_id: int
    x: np.ndarray
    y: np.ndarray
    source_index: np.ndarray


@dataclass(frozen=True)
class IterationInfo:
    selected: np.ndarray
    buffer_batch_size: int
    agem_fired: bool
    lr: float


@dataclass
class RunState:
    params: ParamSet
    coreset: Coreset | None
    reservoir: ReservoirState | None
    matrix: AccuracyMatrix
    lr: float
    task_index: int = 0
    epoch: int = 0
    iteration_in_epoch: int = 0
    global_iteration: int = 0
    agem_projections: int = 0
    score_rows: list = field(default_factory=list)
    commit_records: list = field(default_factory=list)

    def buffer_examples(self) -> list[StoredExample]:
        if self.reservoir is not None:
            return list(self.reservoir.items)
        return self.coreset.all_examples()


def _seed_seq(cfg_seed: int, *parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(cfg_seed)] + [int(p) for p in parts])


def new_run_state(cfg: TrainConfig, num_tasks: int, input_dim: int = 784) -> RunState:
    sizes = [input_dim, *cfg.hidden, cfg.num_classes]
    params = init_params(sizes, np.random.default_rng(_seed_seq(cfg.seed, _T_INIT)))
    if cfg.selection.strategy == "reservoir":
        coreset, reservoir = None, ReservoirState(capacity=cfg.buffer_capacity)
    else:
        coreset, reservoir = Coreset(cfg.buffer_capacity, cfg.seed, cfg.num_classes), None
    return RunState(
        params=params,
        coreset=coreset,
        reservoir=reservoir,
        matrix=AccuracyMatrix(num_tasks),
        lr=cfg.lr0,
    )


# ---------------------------------------------------------------------------
# gradient plumbing


def agem_project(g, g_ref) -> np.ndarray:
    """Remove g's conflicting component along g_ref when their dot is negative."""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape or g.ndim != 1:
        raise DimensionError(f"gradient shapes differ: {g.shape} vs {g_ref.shape}")
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    ref_sq = float(g_ref @ g_ref)
    projected = g - (dot / ref_sq) * g_ref
    assert float(projected @ g_ref) >= -1e-10
    return projected


def objective_gradient(params, sel_x, sel_y, buf_x, buf_y, lam: float) -> np.ndarray:
    """Full-parameter gradient of mean(selected loss) + lam * mean(buffer loss)."""
    g = mean_gradient(params, sel_x, sel_y)
    if buf_x is not None:
        g = g + lam * mean_gradient(params, buf_x, buf_y)
    return g


def _score_pool(params, x, y, selector, ref, tau: float, chunk: int = 64) -> np.ndarray:
    """Combined selection scores for a large pool without a pool-sized gradient matrix.

    Two chunked passes: first accumulate the pool mean gradient and the sum of
    unit gradient rows, then score each chunk against those aggregates —
    algebraically the same similarity/diversity/affinity sum as score_batch.
    """
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("empty pool")
    grad_sum = None
    unit_sum = None
    for start in range(0, n, chunk):
        rows = per_example_gradients(params, x[start : start + chunk], y[start : start + chunk], selector).matrix
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        unit = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0.0)
        grad_sum = rows.sum(axis=0) if grad_sum is None else grad_sum + rows.sum(axis=0)
        unit_sum = unit.sum(axis=0) if unit_sum is None else unit_sum + unit.sum(axis=0)
    pool_mean = grad_sum / n

    combined = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        rows = per_example_gradients(params, x[start:stop], y[start:stop], selector).matrix
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        unit = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0.0)
        s = cosines_to_vector(rows, pool_mean)
        if n == 1:
            v = np.zeros(1)
        else:
            self_sim = np.einsum("ij,ij->i", unit, unit)
            v = np.clip(-(unit @ unit_sum - self_sim) / (n - 1), -1.0, 0.0)
        total = s + v
        if ref is not None:
            total = total + tau * cosines_to_vector(rows, ref)
        combined[start:stop] = total
    return combined


# ---------------------------------------------------------------------------
# one iteration


def _pick_indices(state: RunState, cfg: TrainConfig, batch: StreamBatch, buf_x, buf_y, kappa: int):
    """Index set to train on, per strategy; also the score breakdown when scored."""
    if cfg.selection_override is not None:
        return np.asarray(cfg.selection_override(batch.x, batch.y, kappa), dtype=np.int64), None
    strategy = cfg.selection.strategy
    ctx = (state.task_index, state.epoch, state.iteration_in_epoch)
    if strategy == "ocs":
        grads = per_example_gradients(state.params, batch.x, batch.y, cfg.grad_selector)
        ref = None
        if buf_x is not None:
            ref = mean_gradient(state.params, buf_x, buf_y, cfg.grad_selector)
        breakdown = score_batch(grads, ref, cfg.selection.tau)
        return select_topk(breakdown.combined, kappa), breakdown
    if strategy in ("uniform", "reservoir"):
        seed = _seed_seq(cfg.seed, *ctx, _T_SELECT)
        return uniform_select(batch.x.shape[0], kappa, seed), None
    if strategy == "kmeans_embedding":
        seed = _seed_seq(cfg.seed, *ctx, _T_SELECT)
        emb = embeddings(state.params, batch.x)
        return kmeans_embedding_select(emb, kappa, seed), None
    raise ValueError(f"unknown strategy {strategy!r}")


def train_iteration(state: RunState, batch: StreamBatch, cfg: TrainConfig) -> IterationInfo:
    """One selective update from a candidate batch; mutates state in place."""
    if batch.x.shape[0] == 0:
        raise EmptyInputError("empty candidate batch")
    kappa = min(cfg.selection.kappa, batch.x.shape[0])
    ctx = (state.task_index, state.epoch, state.iteration_in_epoch)

    buf_x = buf_y = None
    buffer_items = state.buffer_examples()
    if buffer_items:
        sampled = sample_items(buffer_items, cfg.buffer_batch_size, _seed_seq(cfg.seed, *ctx, _T_BUFFER))
        buf_x, buf_y = examples_as_arrays(sampled)

    selected, breakdown = _pick_indices(state, cfg, batch, buf_x, buf_y, kappa)

    grad = objective_gradient(state.params, batch.x[selected], batch.y[selected], buf_x, buf_y, cfg.lam)
    agem_fired = False
    if cfg.agem and buf_x is not None:
        g_ref = mean_gradient(state.params, buf_x, buf_y)
        projected = agem_project(grad, g_ref)
        agem_fired = projected is not grad
        if agem_fired:
            state.agem_projections += 1
        grad = projected
    state.params = sgd_step(state.params, grad, state.lr)

    if cfg.selection.strategy == "reservoir":
        seed = int(_seed_seq(cfg.seed, _T_RESERVOIR).generate_state(1, np.uint64)[0])
        for n in range(batch.x.shape[0]):
            item = StoredExample(batch.task_id, batch.x[n].copy(), int(batch.y[n]), int(batch.source_index[n]))
            reservoir_update(state.reservoir, item, None, seed)
    else:
        state.coreset.stage_candidates(
            batch.task_id, batch.x[selected], batch.y[selected], batch.source_index[selected]
        )

    if cfg.log_scores and breakdown is not None:
        chosen = set(int(i) for i in selected)
        for n in range(batch.x.shape[0]):
            affinity = breakdown.affinity[n] if breakdown.affinity is not None else float("nan")
            state.score_rows.append(
                (state.global_iteration, n, breakdown.similarity[n], breakdown.diversity[n],
                 affinity, int(n in chosen))
            )

    state.iteration_in_epoch += 1
    state.global_iteration += 1
    return IterationInfo(
        selected=selected,
        buffer_batch_size=0 if buf_x is None else buf_x.shape[0],
        agem_fired=agem_fired,
        lr=state.lr,
    )


# ---------------------------------------------------------------------------
# task boundary


def _commit_ranking(state: RunState, cfg: TrainConfig, pool_x, pool_y) -> np.ndarray:
    n = pool_x.shape[0]
    if cfg.commit_override is not None:
        return np.asarray(cfg.commit_override(pool_x, pool_y), dtype=np.int64)
    strategy = cfg.selection.strategy
    if strategy == "ocs":
        ref = None
        buffer_items = state.buffer_examples()
        if buffer_items:
            sampled = sample_items(
                buffer_items, cfg.buffer_batch_size, _seed_seq(cfg.seed, state.task_index, _T_COMMIT_REF)
            )
            ref_x, ref_y = examples_as_arrays(sampled)
            ref = mean_gradient(state.params, ref_x, ref_y, cfg.grad_selector)
        scores = _score_pool(state.params, pool_x, pool_y, cfg.grad_selector, ref, cfg.selection.tau)
        return np.argsort(-scores, kind="stable").astype(np.int64)
    if strategy == "uniform":
        rng = np.random.default_rng(_seed_seq(cfg.seed, state.task_index, _T_COMMIT_RANK))
        return rng.permutation(n).astype(np.int64)
    if strategy == "kmeans_embedding":
        quota = cfg.buffer_capacity // (len(state.coreset.committed_tasks) + 1)
        if quota < 1:
            return np.arange(n, dtype=np.int64)
        reps = kmeans_embedding_select(
            embeddings(state.params, pool_x), min(quota, n), _seed_seq(cfg.seed, state.task_index, _T_COMMIT_RANK)
        )
        rest = np.setdiff1d(np.arange(n, dtype=np.int64), reps)
        return np.concatenate([reps, rest])
    raise ValueError(f"unknown strategy {strategy!r}")


def commit_current_task(state: RunState, cfg: TrainConfig, task_id: int):
    """Reduce the staged pool into the bounded buffer (no-op for the reservoir)."""
    if cfg.selection.strategy == "reservoir":
        return None
    pool_x, pool_y, _ = state.coreset.staged_pool(task_id)
    ranking = _commit_ranking(state, cfg, pool_x, pool_y)
    balanced = cfg.selection.strategy == "ocs" and cfg.commit_override is None
    record = state.coreset.commit_task(task_id, ranking, class_balanced=balanced)
    state.commit_records.append(record)
    return record


# ---------------------------------------------------------------------------
# full runs


def _iter_task_batches(task_train, cfg: TrainConfig, task_index: int, epoch: int):
    n = len(task_train)
    order = np.random.default_rng(_seed_seq(cfg.seed, task_index, epoch, _T_SHUFFLE)).permutation(n)
    for start in range(0, n, cfg.stream_batch_size):
        idx = order[start : start + cfg.stream_batch_size]
        yield idx


def run_stream(stream: TaskStream, cfg: TrainConfig, out_dir: str | None = None) -> RunState:
    """Train through every task, evaluate after each, and emit artifacts.

    Evaluation is the only place test sets are touched; iteration code only
    ever sees train data.
    """
    state = new_run_state(cfg, len(stream))
    try:
        for t, task in enumerate(stream.tasks):
            state.task_index = t
            state.lr = cfg.lr0 * cfg.lr_decay**t
            for epoch in range(cfg.epochs):
                state.epoch = epoch
                state.iteration_in_epoch = 0
                for idx in _iter_task_batches(task.train, cfg, t, epoch):
                    batch = StreamBatch(t, task.train.x[idx], task.train.y[idx], task.train.source_index[idx])
                    train_iteration(state, batch, cfg)
            commit_current_task(state, cfg, t)
            for i in range(t + 1):
                state.matrix.set(t, i, accuracy(state.params, stream.tasks[i].test.x, stream.tasks[i].test.y))
    finally:
        if out_dir is not None:
            _write_artifacts(state, stream, cfg, out_dir)
    return state


# ---------------------------------------------------------------------------
# artifacts


def run_metrics(state: RunState) -> dict:
    completed = [t for t in range(state.matrix.num_tasks) if not np.isnan(state.matrix.values[t, : t + 1]).any()]
    per_task = [average_accuracy(state.matrix, t) for t in completed]
    out = {
        "final_average_accuracy": per_task[-1] if per_task else None,
        "average_forgetting": average_forgetting(state.matrix) if len(completed) == state.matrix.num_tasks else None,
        "per_task_average_accuracy": per_task,
        "diagnostic_table": [],
    }
    return out


def _matrix_csv(matrix: AccuracyMatrix) -> str:
    T = matrix.num_tasks
    header = "trained_through," + ",".join(f"task{i}" for i in range(T))
    lines = [header]
    for t in range(T):
        cells = []
        for i in range(T):
            v = matrix.values[t, i]
            cells.append("" if np.isnan(v) else format_sig(v))
        lines.append(f"{t}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def _manifest_text(cfg: TrainConfig, stream: TaskStream) -> str:
    lines = ["[train]"]
    for f in fields(cfg):
        if f.name in ("selection_override", "commit_override"):
            continue
        value = getattr(cfg, f.name)
        if f.name == "selection":
            lines.append(f"strategy = {value.strategy}")
            lines.append(f"kappa = {value.kappa}")
            lines.append(f"tau = {value.tau:g}")
        elif f.name == "grad_selector":
            lines.append(f"grad_layers = {'all' if value is None else ','.join(str(l) for l in value.layers)}")
        elif f.name == "hidden":
            lines.append(f"hidden = {','.join(str(h) for h in value)}")
        else:
            lines.append(f"{f.name} = {value}")
    lines.append("")
    lines.append("[stream]")
    lines.append(stream_manifest(stream).rstrip("\n"))
    return "\n".join(lines) + "\n"


def _write_artifacts(state: RunState, stream: TaskStream, cfg: TrainConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "accuracy_matrix.csv"), _matrix_csv(state.matrix))
    atomic_write_text(
        os.path.join(out_dir, "metrics.json"), json.dumps(run_metrics(state), indent=2, sort_keys=True) + "\n"
    )
    write_dump(state.buffer_examples(), os.path.join(out_dir, "coreset_dump.csv"))
    atomic_write_text(os.path.join(out_dir, "run_manifest.txt"), _manifest_text(cfg, stream))
    save_checkpoint(state.params, os.path.join(out_dir, "model.ckpt"))
    if cfg.log_scores:
        rows = ["iteration,index,similarity,diversity,affinity,selected"]
        for it, n, s, v, a, sel in state.score_rows:
            rows.append(f"{it},{n},{format_sig(s)},{format_sig(v)},{format_sig(a)},{sel}")
        atomic_write_text(os.path.join(out_dir, "scores.csv"), "\n".join(rows) + "\n")
