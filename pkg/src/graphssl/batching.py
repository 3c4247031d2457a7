"""Mini-blocks, meta-batches, batch diagnostics and the neighbour-batch sampler.

A meta-batch is the union of a few randomly chosen mini-blocks, where the
mini-blocks come from one balanced min-cut partition of the affinity graph.
Each mini-block is locally dense in graph edges; grouping several random ones
restores label diversity while keeping most of the within-block edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from .partition import Partition, adjacency, partition_balanced

__all__ = [
    "BatchError",
    "MiniBlock",
    "MetaBatch",
    "MetaBatchGraph",
    "block_count",
    "make_mini_blocks",
    "blocks_from_partition",
    "assemble_meta_batches",
    "connectivity_score",
    "batch_entropy",
    "build_meta_batch_graph",
    "sample_neighbor_batch",
    "shuffled_batches",
    "partition_batches",
]


class BatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MiniBlock:
    nodes: np.ndarray
    target_size: float


@dataclass(frozen=True, eq=False)
class MetaBatch:
    block_ids: tuple[int, ...]
    nodes: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_count(n: int, batch_size: int, blocks_per_batch: int) -> int:
    """Number of mini-blocks, ``max(1, round(n * M / B))``."""
    return max(1, _round_half_up(n * blocks_per_batch / batch_size))


def blocks_from_partition(p: Partition, target_size: float) -> list[MiniBlock]:
    return [MiniBlock(np.sort(nodes), target_size) for nodes in p.parts()]


def make_mini_blocks(g, batch_size: int, blocks_per_batch: int, seed: int = 0,
                     epsilon: float = 0.05, weighted: bool = False) -> list[MiniBlock]:
    """Partition ``g`` into about ``n * M / B`` balanced blocks of size ``B / M``."""
    n = g.shape[0] if sp.issparse(g) else g.n
    if blocks_per_batch < 1:
        raise BatchError("blocks_per_batch must be >= 1")
    if batch_size < 1:
        raise BatchError("batch size must be positive")
    parts = block_count(n, batch_size, blocks_per_batch)
    if parts > n:
        raise BatchError(f"{parts} mini-blocks requested for {n} nodes")
    p = partition_balanced(g, parts, epsilon=epsilon, seed=seed, weighted=weighted)
    return blocks_from_partition(p, batch_size / blocks_per_batch)


def assemble_meta_batches(blocks: list[MiniBlock], blocks_per_batch: int, seed) -> list[MetaBatch]:
    """Group blocks into meta-batches of ``blocks_per_batch`` random blocks.

    Blocks are drawn without replacement, so every block is used exactly once;
    a remainder forms a final, smaller meta-batch.
    """
    if not blocks:
        raise BatchError("no mini-blocks to assemble")
    if blocks_per_batch < 1:
        raise BatchError("blocks_per_batch must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(blocks))
    batches = []
    for a in range(0, len(blocks), blocks_per_batch):
        ids = tuple(int(b) for b in order[a:a + blocks_per_batch])
        nodes = np.sort(np.concatenate([blocks[b].nodes for b in ids]))
        batches.append(MetaBatch(ids, nodes))
    return batches


def connectivity_score(batch, g) -> float:
    """Within-batch neighbour fraction: sum |C_i| / sum |N_i| over batch members.

    ``N_i`` are the graph neighbours of ``i`` and ``C_i`` those inside the batch.
    Isolated nodes add nothing to either sum; a batch made only of isolated
    nodes scores 0.
    """
    a = g if sp.issparse(g) else adjacency(g)
    nodes = np.asarray(batch, dtype=np.int64)
    if nodes.size == 0:
        raise BatchError("empty batch")
    if nodes.min() < 0 or nodes.max() >= a.shape[0]:
        raise BatchError("batch node outside the graph")
    indptr = a.indptr
    total = int((indptr[nodes + 1] - indptr[nodes]).sum())
    if total == 0:
        return 0.0
    inside = a[nodes][:, nodes].nnz
    return inside / total


def batch_entropy(batch, labels) -> float:
    """Shannon entropy (nats) of the class histogram of ``batch``."""
    nodes = np.asarray(batch, dtype=np.int64)
    if nodes.size == 0:
        raise BatchError("empty batch")
    ids = np.asarray(labels)[nodes]
    if (ids < 0).any():
        raise BatchError("entropy requires labels for every batch node")
    counts = np.bincount(ids)
    p = counts[counts > 0] / nodes.size
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True, eq=False)
class MetaBatchGraph:
    """Batch-level graph: ``counts[i, j]`` = node pairs linking batch i and j."""

    counts: np.ndarray

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.counts[i])

    def is_isolated(self, i: int) -> bool:
        return not self.counts[i].any()

    @property
    def probabilities(self) -> np.ndarray:
        """Row-normalised counts; isolated rows are all zero."""
        row = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, row, out=np.zeros(self.counts.shape), where=row > 0)

    def exact_probabilities(self, i: int) -> dict[int, Fraction]:
        total = int(self.counts[i].sum())
        return {int(j): Fraction(int(self.counts[i, j]), total) for j in self.neighbors(i)}


def build_meta_batch_graph(batches, g) -> MetaBatchGraph:
    """Count, for every pair of batches, the distinct graph edges between them."""
    a = g if sp.issparse(g) else adjacency(g)
    n = a.shape[0]
    node_sets = [b.nodes if isinstance(b, MetaBatch) else np.asarray(b) for b in batches]
    owner = np.full(n, -1, dtype=np.int64)
    for bid, nodes in enumerate(node_sets):
        if (owner[nodes] != -1).any():
            raise BatchError("batches overlap")
        owner[nodes] = bid
    if (owner < 0).any():
        raise BatchError(f"node {int(np.flatnonzero(owner < 0)[0])} is in no batch")
    coo = a.tocoo()
    bi, bj = owner[coo.row], owner[coo.col]
    cross = bi != bj
    # symmetric adjacency: each unordered pair {s,t} appears once as (s,t) with s in batch i
    nb = len(node_sets)
    counts = np.zeros((nb, nb), dtype=np.int64)
    np.add.at(counts, (bi[cross], bj[cross]), 1)
    return MetaBatchGraph(counts)


def sample_neighbor_batch(mg: MetaBatchGraph, i: int, rng) -> int | None:
    """Draw neighbour batch j with probability counts[i, j] / sum_j counts[i, j]."""
    if not 0 <= i < mg.size:
        raise BatchError(f"batch id {i} out of range")
    row = mg.counts[i]
    total = int(row.sum())
    if total == 0:
        return None
    r = int(rng.integers(total))
    return int(np.searchsorted(np.cumsum(row), r, side="right"))


def shuffled_batches(n: int, batch_size: int, seed) -> list[np.ndarray]:
    """Uniform random permutation of ``range(n)`` cut into chunks of ``batch_size``."""
    if not 1 <= batch_size <= n:
        raise BatchError("batch size must be in [1, n]")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[a:a + batch_size]) for a in range(0, n, batch_size)]


def partition_batches(g, batch_size: int, seed: int = 0, epsilon: float = 0.05) -> list[np.ndarray]:
    """Plain graph-partition batches: one balanced part of size ~B per batch."""
    n = g.shape[0] if sp.issparse(g) else g.n
    parts = max(1, _round_half_up(n / batch_size))
    p = partition_balanced(g, parts, epsilon=epsilon, seed=seed)
    return [np.sort(nodes) for nodes in p.parts()]
