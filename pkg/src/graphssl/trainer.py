"""Epoch loop over graph-aware batches with stochastic neighbour-batch regularization."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import batching
from .data import Dataset
from .model import (
    Hyperparams,
    ModelParams,
    NonFiniteError,
    OptimizerState,
    adagrad_step,
    init_params,
    loss_and_gradient,
    predict,
)
from .partition import adjacency

__all__ = [
    "STRATEGIES",
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "TrainingDiverged",
    "BatchPlan",
    "holdout_split",
    "plan_batches",
    "train",
    "evaluate",
    "sweep",
    "grid_cells",
]

log = logging.getLogger(__name__)

STRATEGIES = ("meta", "graph_partition_only", "shuffled")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``params`` holds the last finite parameters."""

    def __init__(self, msg, params: ModelParams, state: OptimizerState, epoch: int):
        super().__init__(msg)
        self.params = params
        self.state = state
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    blocks_per_batch: int | None = None  # None: class count
    strategy: str = "meta"
    stochastic_neighbor_reg: bool = True
    patience: int = 10
    holdout_fraction: float = 0.1
    hidden: tuple[int, ...] = (64,)
    partition_epsilon: float = 0.05
    data_seed: int = 0
    batch_seed: int = 0
    dropout_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    supervised: float
    graph: float
    entropy: float
    l2: float
    holdout_accuracy: float
    connectivity: float
    batch_entropy: float
    neighbor_draws: int
    wall_time: float = field(default=0.0, compare=False)


REPORT_COLUMNS = ["epoch", "loss", "supervised", "graph", "entropy", "l2",
                  "holdout_accuracy", "connectivity", "batch_entropy", "neighbor_draws"]


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_holdout_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    stopped_early: bool = False

    def to_csv(self) -> str:
        """Per-epoch rows; wall times are left out so the file is reproducible."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.epochs:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in REPORT_COLUMNS[1:-1]]
                       + [r.neighbor_draws])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_holdout_accuracy": self.best_holdout_accuracy,
            "test_accuracy": self.test_accuracy,
            "stopped_early": self.stopped_early,
            "final_connectivity": self.epochs[-1].connectivity if self.epochs else None,
            "final_batch_entropy": self.epochs[-1].batch_entropy if self.epochs else None,
        }

    def write(self, stem) -> None:
        stem = Path(stem)
        Path(f"{stem}.csv").write_text(self.to_csv())
        Path(f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.epochs)


def holdout_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, np.ndarray]:
    """Hide a class-stratified ``fraction`` of the labeled samples for early stopping.

    Returns the training view (held-out labels removed) and the held-out indices.
    Each class with at least two labels contributes at least one held-out sample.
    """
    if fraction <= 0:
        return ds, np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    ids = ds.class_ids()
    held = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ids == c)
        if members.size < 2:
            continue
        take = min(members.size - 1, max(1, int(round(fraction * members.size))))
        held.append(rng.choice(members, size=take, replace=False))
    held = np.sort(np.concatenate(held)) if held else np.zeros(0, dtype=np.int64)
    mask = ds.labeled_mask.copy()
    mask[held] = False
    labels = np.where(mask[:, None], ds.labels, 0.0)
    return replace(ds, labels=labels, labeled_mask=mask), held


@dataclass
class BatchPlan:
    """Strategy artifacts built once per run (the partitioning is the costly part)."""

    strategy: str
    blocks: list | None = None
    partition_batches: list | None = None

    def epoch_batches(self, n: int, cfg: TrainConfig, seed) -> list[np.ndarray]:
        if self.strategy == "meta":
            k = cfg.blocks_per_batch or 1
            return [b.nodes for b in batching.assemble_meta_batches(self.blocks, k, seed)]
        if self.strategy == "graph_partition_only":
            return list(self.partition_batches)
        return batching.shuffled_batches(n, min(cfg.batch_size, n), seed)


def plan_batches(cfg: TrainConfig, adj, n: int) -> BatchPlan:
    if cfg.strategy == "meta":
        blocks = batching.make_mini_blocks(adj, cfg.batch_size, cfg.blocks_per_batch,
                                           seed=cfg.batch_seed, epsilon=cfg.partition_epsilon)
        return BatchPlan("meta", blocks=blocks)
    if cfg.strategy == "graph_partition_only":
        parts = batching.partition_batches(adj, cfg.batch_size, seed=cfg.batch_seed,
                                           epsilon=cfg.partition_epsilon)
        return BatchPlan("graph_partition_only", partition_batches=parts)
    return BatchPlan("shuffled")


def evaluate(params: ModelParams, ds: Dataset, collapse_map=None) -> float:
    """Argmax accuracy on the labeled rows of ``ds``.

    ``collapse_map[c]`` maps model class ``c`` to a scoring class; it is applied
    to both predictions and truth.
    """
    idx = np.flatnonzero(ds.labeled_mask)
    if idx.size == 0:
        raise ValueError("evaluation set has no labels")
    pred = np.argmax(predict(params, ds.features[idx]), axis=1)
    truth = np.argmax(ds.labels[idx], axis=1)
    if collapse_map is not None:
        cmap = np.asarray(collapse_map, dtype=np.int64)
        if cmap.shape != (ds.class_count,):
            raise ValueError(f"collapse map must cover all {ds.class_count} classes")
        pred, truth = cmap[pred], cmap[truth]
    return float((pred == truth).mean())


def train(cfg: TrainConfig, ds: Dataset, graph, hp: Hyperparams, test: Dataset | None = None,
          diag_labels=None, plan: BatchPlan | None = None, init: ModelParams | None = None):
    """Train with AdaGrad; returns (best params, TrainReport).

    ``graph`` spans exactly the samples of ``ds``. ``diag_labels`` (true class
    ids) is only used for the batch entropy diagnostic; without it the visible
    labels are used and unlabeled nodes are skipped.
    """
    wmat = graph if hasattr(graph, "tocsr") else graph.matrix
    wmat = wmat.tocsr()
    if wmat.shape[0] != ds.n:
        raise ValueError("graph nodes must match dataset samples")
    if cfg.blocks_per_batch is None:
        cfg = replace(cfg, blocks_per_batch=ds.class_count)
    adj = adjacency(wmat)
    train_ds, held = holdout_split(ds, cfg.holdout_fraction, cfg.data_seed)
    held_ds = ds.subset(held) if held.size else None
    if plan is None:
        plan = plan_batches(cfg, adj, ds.n)
    diag = np.asarray(diag_labels) if diag_labels is not None else ds.class_ids()

    params = init.copy() if init is not None else init_params(ds.dim, cfg.hidden, ds.class_count, cfg.init_seed)
    state = OptimizerState.for_params(params)
    last = (params.copy(), state.copy())
    drop_rng = np.random.default_rng(cfg.dropout_seed)
    report = TrainReport()
    best = (-1.0, None)
    since_best = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        batches = plan.epoch_batches(ds.n, cfg, [cfg.batch_seed, epoch])
        order_rng = np.random.default_rng([cfg.batch_seed, epoch, 1])
        sample_rng = np.random.default_rng([cfg.batch_seed, epoch, 2])
        mg = None
        if cfg.stochastic_neighbor_reg and len(batches) > 1:
            mg = batching.build_meta_batch_graph(batches, adj)
        sums = np.zeros(5)
        draws = 0
        conn, ent = [], []
        for bi in order_rng.permutation(len(batches)):
            batch = batches[bi]
            nbr = None
            if mg is not None:
                j = batching.sample_neighbor_batch(mg, int(bi), sample_rng)
                if j is not None:
                    nbr = batches[j]
                    draws += 1
            try:
                loss, terms, grads = loss_and_gradient(params, batch, nbr, train_ds, wmat, hp, drop_rng)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}", *last, epoch) from exc
            if not np.isfinite(loss) or not all(np.isfinite(a).all() for a in grads.arrays()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", *last, epoch)
            # the state that produced a finite loss, handed back if the next step blows up
            last = (params.copy(), state.copy())
            adagrad_step(state, params, grads, hp)
            sums += np.array([loss, *terms])
            conn.append(batching.connectivity_score(batch, adj))
            known = batch[diag[batch] >= 0]
            if known.size:
                ent.append(batching.batch_entropy(known, diag))
        sums /= len(batches)
        try:
            acc = evaluate(params, held_ds) if held_ds is not None else float("nan")
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{exc} at epoch {epoch}", *last, epoch) from exc
        rec = EpochRecord(epoch, *map(float, sums), acc, float(np.mean(conn)),
                          float(np.mean(ent)) if ent else float("nan"), draws,
                          wall_time=time.perf_counter() - t0)
        report.epochs.append(rec)
        log.debug("epoch %d loss %.5f holdout %.4f", epoch, rec.loss, acc)
        if held_ds is None or acc > best[0]:
            best = (acc, params.copy())
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stopped_early = True
                break
    report.best_holdout_accuracy = best[0] if held_ds is not None else float("nan")
    params = best[1]
    if test is not None:
        report.test_accuracy = evaluate(params, test)
    return params, report


# --- sweeps -------------------------------------------------------------------------------


def grid_cells(grid: dict) -> list[dict]:
    axes = {k: v for k, v in grid.items() if isinstance(v, list)}
    fixed = {k: v for k, v in grid.items() if not isinstance(v, list)}
    if not axes:
        return []
    keys = sorted(axes)
    return [{**fixed, **dict(zip(keys, combo))} for combo in itertools.product(*(axes[k] for k in keys))]


def sweep(grid: dict, run_cell, out_dir=None, jobs: int = 1) -> list[dict]:
    """Run ``run_cell(cell) -> dict`` for every grid cell.

    List-valued grid entries are swept (cartesian product); scalars are fixed.
    With ``out_dir`` each result is written to ``cell_<i>.json`` as soon as it
    finishes, and existing cell files are reused, which makes sweeps resumable.
    A failing cell is recorded with an ``error`` entry and does not stop the sweep.
    """
    cells = grid_cells(grid)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results: list[dict | None] = [None] * len(cells)
    todo = []
    for i, cell in enumerate(cells):
        path = out / f"cell_{i:04d}.json" if out is not None else None
        if path is not None and path.exists():
            saved = json.loads(path.read_text())
            if saved.get("cell") == cell:
                results[i] = saved
                continue
        todo.append(i)

    def finish(i, res):
        res = {"cell": cells[i], **res}
        results[i] = res
        if out is not None:
            (out / f"cell_{i:04d}.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")

    if jobs > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(_safe_run, run_cell, cells[i]) for i in todo}
            for i in todo:
                finish(i, futures[i].result())
    else:
        for i in todo:
            finish(i, _safe_run(run_cell, cells[i]))
    return results


def _safe_run(run_cell, cell):
    try:
        return run_cell(cell)
    except Exception as exc:  # recorded per cell, never fatal
        return {"error": f"{type(exc).__name__}: {exc}"}


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
