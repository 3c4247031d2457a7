"""Balanced k-way graph partitioning by edge-cut minimization.

Multilevel recursive bisection in the METIS family:

* coarsen by heavy-edge matching until the graph is small,
* bisect the coarsest graph by greedy graph growing from several seeds,
* project back level by level, refining each level with Fiduccia-Mattheyses
  passes under a balance constraint.

After recursive bisection a k-way pass enforces the hard size cap
``ceil((1 + eps) * n / P)`` and greedily moves boundary nodes with positive
gain. Every refinement pass is monotone: it never increases the edge-cut.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "PartitionError",
    "Partition",
    "adjacency",
    "partition_balanced",
    "edge_cut",
    "balance_ratio",
    "random_balanced_partition",
    "fm_refine_pass",
    "kway_refine_pass",
    "save_partition",
    "load_partition",
]

COARSEN_TO = 60
INIT_TRIALS = 8
FM_PASSES = 6


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    part_count: int

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() >= self.part_count):
            raise PartitionError("part id out of range")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def part_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.part_count)

    def parts(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.cumsum(self.part_sizes)[:-1]
        return np.split(order, bounds)


def adjacency(g, weighted: bool = False) -> sp.csr_matrix:
    """Symmetric CSR adjacency of any supported graph, without diagonal.

    Entries are 1 per edge unless ``weighted`` (then the affinity weights).
    """
    if sp.issparse(g):
        a = sp.csr_matrix(g, dtype=np.float64, copy=True)
        if not weighted:
            a.data[:] = 1.0
    else:
        if weighted and hasattr(g, "weights"):
            data = np.asarray(g.weights, dtype=np.float64)
        else:
            data = np.ones(len(g.indices))
        a = sp.csr_matrix((data, g.indices, g.indptr), shape=(g.n, g.n))
        if getattr(g, "directed", False):
            a = sp.csr_matrix(a.maximum(a.T))
    a.setdiag(0)
    a.eliminate_zeros()
    a.sort_indices()
    return a


def edge_cut(g, p: Partition, weighted_graph=None) -> tuple[int, float]:
    """(count, total weight) of unordered edges joining different parts."""
    a = adjacency(g, weighted=True) if weighted_graph is None else weighted_graph
    if p.n != a.shape[0]:
        raise PartitionError(f"partition covers {p.n} nodes, graph has {a.shape[0]}")
    coo = a.tocoo()
    cross = p.assignment[coo.row] != p.assignment[coo.col]
    # each unordered edge is stored twice
    return int(cross.sum()) // 2, float(coo.data[cross].sum()) / 2.0


def balance_ratio(p: Partition) -> float:
    if p.n == 0:
        raise PartitionError("empty partition")
    return float(p.part_sizes.max() / (p.n / p.part_count))


def size_cap(n: int, parts: int, epsilon: float) -> int:
    return max(1, math.ceil((1.0 + epsilon) * n / parts - 1e-9))


def random_balanced_partition(n: int, parts: int, seed: int) -> Partition:
    rng = np.random.default_rng(seed)
    a = np.empty(n, dtype=np.int64)
    a[rng.permutation(n)] = np.arange(n) % parts
    return Partition(a, parts)


# --- internal multilevel machinery ----------------------------------------------------


def _cut_of(a: sp.csr_matrix, side: np.ndarray) -> float:
    coo = a.tocoo()
    return float(coo.data[side[coo.row] != side[coo.col]].sum()) / 2.0


def _coarsen(a: sp.csr_matrix, vw: np.ndarray, rng, max_vw: float):
    n = a.shape[0]
    match = np.full(n, -1, dtype=np.int64)
    indptr, indices, data = a.indptr, a.indices, a.data
    for v in rng.permutation(n):
        if match[v] != -1:
            continue
        lo, hi = indptr[v], indptr[v + 1]
        nb = indices[lo:hi]
        ok = (match[nb] == -1) & (vw[nb] + vw[v] <= max_vw)
        if ok.any():
            w = np.where(ok, data[lo:hi], -np.inf)
            u = nb[int(np.argmax(w))]
            match[v], match[u] = u, v
        else:
            match[v] = v
    cmap = np.full(n, -1, dtype=np.int64)
    c = 0
    for v in range(n):
        if cmap[v] == -1:
            cmap[v] = c
            cmap[match[v]] = c
            c += 1
    proj = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, c))
    ac = sp.csr_matrix(proj.T @ a @ proj)
    ac.setdiag(0)
    ac.eliminate_zeros()
    ac.sort_indices()
    return ac, np.bincount(cmap, weights=vw, minlength=c), cmap


def _gains(a: sp.csr_matrix, side: np.ndarray) -> np.ndarray:
    """External minus internal edge weight for each node of a bisection."""
    s = side.astype(np.float64)
    to_one = a @ s
    total = np.asarray(a.sum(axis=1)).ravel()
    to_zero = total - to_one
    return np.where(side == 0, to_one - to_zero, to_zero - to_one)


def fm_refine_pass(a: sp.csr_matrix, vw: np.ndarray, side: np.ndarray, max_w, rng,
                   patience: int = 50) -> float:
    """One Fiduccia-Mattheyses pass on a bisection, in place.

    Moves unlocked nodes one at a time in order of best gain while the
    destination stays within ``max_w``; then rolls back to the best prefix.
    Returns the cut reduction (>= 0).
    """
    n = a.shape[0]
    indptr, indices, data = a.indptr.tolist(), a.indices.tolist(), a.data.tolist()
    g0 = _gains(a, side)
    ext = (g0 + np.asarray(a.sum(axis=1)).ravel()) / 2.0
    gain = g0.tolist()
    sd = side.tolist()
    vwl = vw.tolist()
    weight = [float(vw[side == 0].sum()), float(vw[side == 1].sum())]
    cap = [float(max_w[0]), float(max_w[1])]
    tie = rng.random(n).tolist()
    version = [0] * n
    locked = [False] * n
    heap = [(-gain[v], tie[v], 0, v) for v in np.flatnonzero(ext > 0).tolist()]
    heapq.heapify(heap)
    moves: list[int] = []
    delta = best = 0.0
    best_len = 0
    while heap:
        _, _, ver, v = heapq.heappop(heap)
        if locked[v] or ver != version[v]:
            continue
        src = sd[v]
        dst = 1 - src
        if weight[dst] + vwl[v] > cap[dst]:
            continue
        locked[v] = True
        sd[v] = dst
        weight[src] -= vwl[v]
        weight[dst] += vwl[v]
        delta -= gain[v]
        moves.append(v)
        for p in range(indptr[v], indptr[v + 1]):
            u = indices[p]
            if locked[u]:
                continue
            w = data[p]
            gain[u] += 2 * w if sd[u] == src else -2 * w
            version[u] += 1
            heapq.heappush(heap, (-gain[u], tie[u], version[u], u))
        if delta < best - 1e-12:
            best, best_len = delta, len(moves)
        elif len(moves) - best_len > patience:
            break
    for v in moves[best_len:][::-1]:
        sd[v] = 1 - sd[v]
    side[:] = sd
    return -best


def _fix_bisection_balance(a, vw, side, max_w):
    for s in (0, 1):
        other = 1 - s
        while vw[side == s].sum() > max_w[s]:
            room = max_w[other] - vw[side == other].sum()
            cand = np.flatnonzero((side == s) & (vw <= room))
            if cand.size == 0:
                cand = np.flatnonzero(side == s)
                cand = cand[vw[cand] == vw[cand].min()]
            g = _gains(a, side)[cand]
            side[cand[int(np.argmax(g))]] = other


def _grow_bisection(a, vw, target0, max_w, rng, seed_node):
    n = a.shape[0]
    side = np.ones(n, dtype=np.int64)
    indptr, indices, data = a.indptr, a.indices, a.data
    inside = 0.0
    conn = np.zeros(n)  # edge weight into the growing region
    total = np.asarray(a.sum(axis=1)).ravel()
    frontier: set[int] = {int(seed_node)}
    while inside < target0:
        if not frontier:
            rest = np.flatnonzero(side == 1)
            if rest.size == 0:
                break
            frontier = {int(rest[rng.integers(rest.size)])}
        cand = np.fromiter(frontier, dtype=np.int64)
        # gain of pulling a node into region 0: edges into region minus edges left outside
        g = 2 * conn[cand] - total[cand]
        fits = inside + vw[cand] <= max_w[0]
        if not fits.any():
            break
        g = np.where(fits, g, -np.inf)
        best = g.max()
        v = int(cand[g == best].min())
        frontier.discard(v)
        side[v] = 0
        inside += vw[v]
        for p in range(indptr[v], indptr[v + 1]):
            u = indices[p]
            conn[u] += data[p]
            if side[u] == 1:
                frontier.add(int(u))
    return side


def _bisect(a: sp.csr_matrix, vw: np.ndarray, frac: float, eps: float, rng) -> np.ndarray:
    total = vw.sum()
    t = np.array([frac * total, (1 - frac) * total])
    levels = []
    cur_a, cur_vw = a, vw
    max_vw = max(1.0, 1.5 * total / COARSEN_TO)
    while cur_a.shape[0] > COARSEN_TO:
        ca, cvw, cmap = _coarsen(cur_a, cur_vw, rng, max_vw)
        if ca.shape[0] > 0.95 * cur_a.shape[0]:
            break
        levels.append((cur_a, cur_vw, cmap))
        cur_a, cur_vw = ca, cvw

    def caps(vweights):
        slack = 0.0 if vweights is vw else vweights.max()
        return np.ceil(t * (1 + eps) - 1e-9) + slack

    # initial partition on the coarsest graph: best of several grown regions
    nc = cur_a.shape[0]
    max_w = caps(cur_vw)
    seeds = np.arange(nc) if nc <= 16 else rng.choice(nc, size=min(nc, INIT_TRIALS), replace=False)
    best_side, best_key = None, None
    for s in seeds:
        side = _grow_bisection(cur_a, cur_vw, t[0], max_w, rng, s)
        _fix_bisection_balance(cur_a, cur_vw, side, max_w)
        for _ in range(FM_PASSES):
            if fm_refine_pass(cur_a, cur_vw, side, max_w, rng) <= 0:
                break
        w0 = cur_vw[side == 0].sum()
        key = (_cut_of(cur_a, side), abs(w0 - t[0]))
        if best_key is None or key < best_key:
            best_side, best_key = side.copy(), key
    side = best_side
    for fine_a, fine_vw, cmap in reversed(levels):
        side = side[cmap]
        max_w = caps(fine_vw)
        _fix_bisection_balance(fine_a, fine_vw, side, max_w)
        for _ in range(FM_PASSES):
            if fm_refine_pass(fine_a, fine_vw, side, max_w, rng) <= 0:
                break
    return side


def _recursive(a: sp.csr_matrix, vw: np.ndarray, parts: int, eps: float, rng) -> np.ndarray:
    n = a.shape[0]
    if parts == 1:
        return np.zeros(n, dtype=np.int64)
    if n <= parts:
        return np.arange(n, dtype=np.int64) % parts
    p0 = parts // 2
    side = _bisect(a, vw, p0 / parts, eps, rng)
    out = np.empty(n, dtype=np.int64)
    for s, ps, offset in ((0, p0, 0), (1, parts - p0, p0)):
        nodes = np.flatnonzero(side == s)
        sub = a[nodes][:, nodes]
        out[nodes] = offset + _recursive(sp.csr_matrix(sub), vw[nodes], ps, eps, rng)
    return out


def _kway_lists(a: sp.csr_matrix):
    return a.indptr.tolist(), a.indices.tolist(), a.data.tolist()


def _connections(v, part, indptr, indices, data):
    conn: dict[int, float] = {}
    for p in range(indptr[v], indptr[v + 1]):
        q = part[indices[p]]
        conn[q] = conn.get(q, 0.0) + data[p]
    return conn


def _enforce_caps(a: sp.csr_matrix, part: list[int], parts: int, cap: int) -> None:
    indptr, indices, data = _kway_lists(a)
    sizes = np.bincount(part, minlength=parts).tolist()
    members: list[set[int]] = [set() for _ in range(parts)]
    for v, q in enumerate(part):
        members[q].add(v)
    while True:
        over = [q for q in range(parts) if sizes[q] > cap]
        if not over:
            return
        src = over[0]
        open_parts = [q for q in range(parts) if sizes[q] < cap]
        best = None
        for v in sorted(members[src]):
            conn = _connections(v, part, indptr, indices, data)
            own = conn.get(src, 0.0)
            for q in open_parts:
                g = conn.get(q, 0.0) - own
                if best is None or g > best[0]:
                    best = (g, v, q)
        _, v, q = best
        part[v] = q
        members[src].discard(v)
        members[q].add(v)
        sizes[src] -= 1
        sizes[q] += 1


def kway_refine_pass(a: sp.csr_matrix, part, parts: int, cap: int, rng) -> float:
    """Greedy k-way pass: move boundary nodes to the adjacent part with the
    largest strictly positive gain if that part has room. In place on ``part``
    (a list or int array). Returns the cut reduction (>= 0)."""
    indptr, indices, data = _kway_lists(a)
    as_list = part if isinstance(part, list) else part.tolist()
    sizes = np.bincount(as_list, minlength=parts).tolist()
    gained = 0.0
    for v in rng.permutation(len(as_list)).tolist():
        src = as_list[v]
        conn = _connections(v, as_list, indptr, indices, data)
        if len(conn) <= 1 and src in conn:
            continue
        own = conn.get(src, 0.0)
        best_g, best_q = 1e-12, -1
        for q in sorted(conn):
            if q == src or sizes[q] + 1 > cap:
                continue
            g = conn[q] - own
            if g > best_g:
                best_g, best_q = g, q
        if best_q >= 0:
            as_list[v] = best_q
            sizes[src] -= 1
            sizes[best_q] += 1
            gained += best_g
    if not isinstance(part, list):
        part[:] = as_list
    return gained


def partition_balanced(g, parts: int, epsilon: float = 0.05, seed: int = 0,
                       weighted: bool = False, max_kway_passes: int = 8) -> Partition:
    """Partition the nodes of ``g`` into ``parts`` balanced parts with small edge-cut.

    Every part ends with at most ``ceil((1 + epsilon) * n / parts)`` nodes. The
    cut counts edges unless ``weighted`` is set, in which case affinity weights
    are summed. Deterministic for a given ``seed``.
    """
    a = adjacency(g, weighted=weighted)
    n = a.shape[0]
    if parts < 1:
        raise PartitionError("parts must be positive")
    if parts > n:
        raise PartitionError(f"cannot split {n} nodes into {parts} parts")
    if epsilon < 0:
        raise PartitionError("epsilon must be nonnegative")
    cap = size_cap(n, parts, epsilon)
    if cap * parts < n:
        raise PartitionError(f"balance tolerance {epsilon} is infeasible for {parts} parts")
    if parts == 1:
        return Partition(np.zeros(n, dtype=np.int64), 1)
    rng = np.random.default_rng(seed)
    depth = max(1, math.ceil(math.log2(parts)))
    eps_b = (1.0 + epsilon) ** (1.0 / depth) - 1.0
    vw = np.ones(n)
    assign = _recursive(a, vw, parts, eps_b, rng).tolist()
    _enforce_caps(a, assign, parts, cap)
    for _ in range(max_kway_passes):
        if kway_refine_pass(a, assign, parts, cap, rng) <= 0:
            break
    return Partition(np.asarray(assign, dtype=np.int64), parts)


# --- partition files ---------------------------------------------------------------------


def save_partition(p: Partition, path) -> None:
    Path(path).write_text("".join(f"{int(q)}\n" for q in p.assignment))


def load_partition(path, parts: int | None = None) -> Partition:
    ids = [int(line) for line in Path(path).read_text().split()]
    a = np.asarray(ids, dtype=np.int64)
    if parts is None:
        parts = int(a.max()) + 1 if a.size else 1
    return Partition(a, parts)
