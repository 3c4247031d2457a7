"""k-NN graph construction, symmetrization, sigma heuristic and RBF affinities."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GraphError",
    "NeighborGraph",
    "AffinityGraph",
    "knn_graph",
    "symmetrize",
    "sigma_candidates",
    "rbf_affinities",
    "build_affinity_graph",
    "save_graph",
    "load_graph",
    "export_edge_list",
]

GRAPH_MAGIC = b"GRPH"
GRAPH_VERSION = 1
_CHUNK = 256
_MAX_CHUNK_ELEMS = 1 << 24


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """CSR adjacency with euclidean distances.

    A freshly built k-NN graph is directed and lists each node's neighbours in
    rank order (nearest first). After :func:`symmetrize` the graph is undirected
    and each neighbour list is sorted by node id.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    k: int
    directed: bool = True

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        a, b = self.indptr[i], self.indptr[i + 1]
        return [(int(j), float(d)) for j, d in zip(self.indices[a:b], self.distances[a:b])]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def structure(self) -> sp.csr_matrix:
        """0/1 adjacency matrix (distances of 0 survive as explicit 1s)."""
        return sp.csr_matrix((np.ones(self.nnz), self.indices, self.indptr), shape=(self.n, self.n))


@dataclass(frozen=True, eq=False)
class AffinityGraph:
    """Symmetric sparse weights in (0, 1], no diagonal."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    sigma: float = float("nan")

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))

    def structure(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.nnz), self.indices, self.indptr), shape=(self.n, self.n))

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        a, b = self.indptr[i], self.indptr[i + 1]
        return [(int(j), float(w)) for j, w in zip(self.indices[a:b], self.weights[a:b])]


def _pair_distances(xq: np.ndarray, xc: np.ndarray) -> np.ndarray:
    # shared by every search path so distances agree bit for bit
    diff = xq[:, None, :] - xc[None, :, :]
    return np.sqrt(np.einsum("qcd,qcd->qc", diff, diff))


def _rank(dist_row: np.ndarray, cand: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # stable sort on distance after ordering by id => ties go to the lower id
    order = np.argsort(cand, kind="stable")
    cand, dist_row = cand[order], dist_row[order]
    top = np.argsort(dist_row, kind="stable")[:k]
    return cand[top], dist_row[top]


def knn_graph(features, k: int, method: str = "brute") -> NeighborGraph:
    """Directed k-nearest-neighbour graph by euclidean distance.

    ``method='brute'`` is the exhaustive reference search. ``method='balltree'``
    narrows candidates with a ball tree and then re-ranks them with the exact
    same distance routine, so both paths return identical graphs.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise GraphError("k must be positive")
    if k >= n:
        raise GraphError(f"k={k} must be smaller than the node count {n}")
    if not np.isfinite(x).all():
        raise GraphError("features contain non-finite values")
    nbr = np.empty((n, k), dtype=np.int64)
    dst = np.empty((n, k))
    if method == "brute":
        allidx = np.arange(n)
        step = max(1, min(_CHUNK, _MAX_CHUNK_ELEMS // max(1, n * x.shape[1])))
        for a in range(0, n, step):
            b = min(n, a + step)
            d = _pair_distances(x[a:b], x)
            d[np.arange(b - a), np.arange(a, b)] = np.inf
            # stable argsort over ids already in ascending order breaks ties by id
            top = np.argsort(d, axis=1, kind="stable")[:, :k]
            nbr[a:b] = allidx[top]
            dst[a:b] = np.take_along_axis(d, top, axis=1)
    elif method == "balltree":
        from sklearn.neighbors import BallTree

        tree = BallTree(x)
        kd, _ = tree.query(x, k=min(n, k + 1))
        for i in range(n):
            # radius covering the k-th non-self neighbour plus any ties at that distance
            r = kd[i, -1]
            cand = tree.query_radius(x[i:i + 1], r=r * (1 + 1e-9) + 1e-12)[0]
            cand = cand[cand != i]
            d = _pair_distances(x[i:i + 1], x[cand])[0]
            nbr[i], dst[i] = _rank(d, cand, k)
    else:
        raise GraphError(f"unknown knn method {method!r}")
    indptr = np.arange(0, n * k + 1, k, dtype=np.int64)
    return NeighborGraph(n, indptr, nbr.ravel(), dst.ravel(), k, directed=True)


def symmetrize(g: NeighborGraph) -> NeighborGraph:
    """Union of directed edges; each unordered pair keeps a single distance."""
    n = g.n
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(g.indptr))
    cols = g.indices.astype(np.int64)
    keep = rows != cols
    rows, cols, dist = rows[keep], cols[keep], g.distances[keep]
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    key = lo * n + hi
    order = np.lexsort((dist, key))
    key, dist = key[order], dist[order]
    first = np.r_[True, key[1:] != key[:-1]]
    key, dist = key[first], dist[first]  # smallest distance per unordered pair
    lo, hi = key // n, key % n
    r = np.concatenate([lo, hi])
    c = np.concatenate([hi, lo])
    d = np.concatenate([dist, dist])
    order = np.lexsort((c, r))
    r, c, d = r[order], c[order], d[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
    return NeighborGraph(n, indptr, c, d, g.k, directed=False)


def sigma_candidates(g: NeighborGraph, max_i: int = 5) -> list[float]:
    """Kernel widths ``d_i / 3`` for i = 1..max_i.

    ``d_i`` is the mean over nodes of the distance to the node's i-th nearest
    neighbour. Works on both the directed and the symmetrized graph, since
    symmetrization never removes a node's own k nearest neighbours.
    """
    if max_i < 1 or max_i > g.k:
        raise GraphError(f"max_i must be in [1, k={g.k}]")
    deg = g.degrees()
    assert (deg >= max_i).all(), "node with fewer than max_i neighbours"
    rows = np.empty((g.n, max_i))
    for i in range(g.n):
        a, b = g.indptr[i], g.indptr[i + 1]
        rows[i] = np.sort(g.distances[a:b])[:max_i]
    d = rows.mean(axis=0) / 3.0
    # column-wise sorted rows give nondecreasing means; guard float noise
    return [float(v) for v in np.maximum.accumulate(d)]


def rbf_affinities(g: NeighborGraph, sigma: float, exponent_mode: str = "paper_unsquared") -> AffinityGraph:
    """RBF weights on the edges of ``g``.

    ``paper_unsquared`` computes exp(-dist / (2 sigma^2)); ``squared`` is the
    usual Gaussian kernel exp(-dist^2 / (2 sigma^2)). Weights are clipped below
    at the smallest positive double so every stored edge stays strictly positive.
    """
    if not sigma > 0:
        raise GraphError("sigma must be positive")
    if g.directed:
        g = symmetrize(g)
    if exponent_mode == "paper_unsquared":
        w = np.exp(-g.distances / (2.0 * sigma**2))
    elif exponent_mode == "squared":
        w = np.exp(-(g.distances**2) / (2.0 * sigma**2))
    else:
        raise GraphError(f"unknown exponent mode {exponent_mode!r}")
    w = np.clip(w, np.finfo(np.float64).tiny, 1.0)
    return AffinityGraph(g.n, g.indptr.copy(), g.indices.copy(), w, float(sigma))


def build_affinity_graph(features, k: int = 10, sigma_index: int = 3, sigma: float | None = None,
                         exponent_mode: str = "paper_unsquared", method: str = "brute") -> AffinityGraph:
    """k-NN graph -> symmetrize -> RBF, with sigma = d_{sigma_index} / 3 unless given."""
    directed = knn_graph(features, k, method=method)
    sym = symmetrize(directed)
    if sigma is None:
        sigma = sigma_candidates(directed, max(sigma_index, 1))[sigma_index - 1]
    return rbf_affinities(sym, sigma, exponent_mode)


# --- serialization -----------------------------------------------------------------


def save_graph(g: AffinityGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<IQQ", GRAPH_VERSION, g.n, g.nnz))
        fh.write(g.indptr.astype("<u8").tobytes())
        rec = np.empty(g.nnz, dtype=[("j", "<u4"), ("w", "<f4")])
        rec["j"] = g.indices
        rec["w"] = g.weights
        fh.write(rec.tobytes())


def load_graph(path) -> AffinityGraph:
    buf = Path(path).read_bytes()
    if buf[:4] != GRAPH_MAGIC:
        raise GraphError("bad magic: not a GRPH graph file")
    version, n, m = struct.unpack_from("<IQQ", buf, 4)
    if version != GRAPH_VERSION:
        raise GraphError(f"unsupported graph version {version}")
    off = 4 + struct.calcsize("<IQQ")
    if len(buf) != off + 8 * (n + 1) + 8 * m:
        raise GraphError("graph file size does not match header")
    indptr = np.frombuffer(buf, dtype="<u8", count=n + 1, offset=off).astype(np.int64)
    off += 8 * (n + 1)
    rec = np.frombuffer(buf, dtype=[("j", "<u4"), ("w", "<f4")], count=m, offset=off)
    if indptr[0] != 0 or indptr[-1] != m or (np.diff(indptr) < 0).any():
        raise GraphError("corrupt CSR offsets")
    return AffinityGraph(int(n), indptr, rec["j"].astype(np.int64), rec["w"].astype(np.float64))


def export_edge_list(g, path) -> None:
    """Plain text ``i j w`` lines, one per stored (directed) entry."""
    vals = g.weights if isinstance(g, AffinityGraph) else g.distances
    with open(path, "w") as fh:
        for i in range(g.n):
            for p in range(g.indptr[i], g.indptr[i + 1]):
                fh.write(f"{i} {int(g.indices[p])} {float(vals[p]):.9g}\n")
