"""Feed-forward classifier, graph-regularized KL objective and its exact gradient.

The objective over a primary batch ``S`` and an optional neighbour batch ``T``
(``U = S | T``) is::

    loss = sup + gamma * graph + kappa * ent + lam * l2

    sup   = mean over labeled i in S of        KL(t_i || p_i)
    graph = mean over ordered edges (i, j) in U of w_ij * KL(p_i || p_j)
    ent   = mean over i in U of                KL(p_i || r_i)   (r = uniform or prior)
    l2    = sum of squared weight entries (biases excluded)

Each edge appears in both orientations, so both KL directions are counted.
Gradients flow into both endpoints of every edge, including neighbour-batch
nodes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import xlogy

__all__ = [
    "ModelError",
    "NonFiniteError",
    "ModelParams",
    "Hyperparams",
    "OptimizerState",
    "init_params",
    "forward",
    "log_softmax",
    "kl_divergence",
    "objective",
    "gradient",
    "loss_and_gradient",
    "adagrad_step",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))
CHECKPOINT_MAGIC = b"GMDL"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class NonFiniteError(ModelError):
    """Activations overflowed; raised so callers can treat it as divergence."""


@dataclass(eq=False)
class ModelParams:
    """Layer weights (in x out) and biases. Hidden layers use ReLU, the last
    layer feeds a softmax over the classes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases])

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_params(input_dim: int, hidden, classes: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    dims = [input_dim, *hidden, classes]
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return ModelParams(ws, bs)


@dataclass
class Hyperparams:
    gamma: float = 0.0
    kappa: float = 0.0
    lam: float = 0.0
    reg_target: str = "uniform"
    prior: np.ndarray | None = field(default=None, repr=False)
    dropout_p: float = 0.0
    learning_rate: float = 0.01
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.gamma, self.kappa, self.lam) < 0:
            raise ModelError("gamma, kappa and lam must be nonnegative")
        if self.reg_target not in ("uniform", "fixed_prior"):
            raise ModelError(f"unknown regularization target {self.reg_target!r}")
        if self.reg_target == "fixed_prior" and self.prior is None:
            raise ModelError("fixed_prior target needs per-sample prior distributions")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ModelError("dropout_p must lie in [0, 1)")
        if self.learning_rate <= 0 or self.adagrad_epsilon <= 0:
            raise ModelError("learning_rate and adagrad_epsilon must be positive")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(params: ModelParams, x: np.ndarray, dropout_p: float = 0.0, rng=None):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.dims[0]:
        raise ModelError(f"input dim {x.shape[1]} != model input dim {params.dims[0]}")
    if dropout_p > 0 and rng is None:
        raise ModelError("dropout needs an rng")
    acts, pres, masks = [x], [], []
    h = x
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ w + b
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite activations in layer {layer}")
        if layer == last:
            return log_softmax(z), (acts, pres, masks)
        pres.append(z)
        h = np.maximum(z, 0.0)
        if dropout_p > 0:
            # inverted dropout keeps the expected activation unchanged
            m = (rng.random(h.shape) >= dropout_p) / (1.0 - dropout_p)
            h = h * m
            masks.append(m)
        else:
            masks.append(None)
        acts.append(h)
    raise ModelError("model has no layers")


def forward(params: ModelParams, x, dropout_p: float = 0.0, rng=None) -> np.ndarray:
    """Posterior rows p(x) on the probability simplex."""
    lp, _ = _forward(params, x, dropout_p, rng)
    return np.exp(lp)


def predict(params: ModelParams, x, chunk: int = 4096) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.concatenate([forward(params, x[a:a + chunk]) for a in range(0, len(x), chunk)])


def kl_divergence(p, q, floor: float = PROB_FLOOR) -> float | np.ndarray:
    """KL(p || q) in nats along the last axis; q is floored before the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    return (xlogy(p, p) - p * np.log(q)).sum(axis=-1)


def _local_nodes(batch, neighbor_batch, n):
    batch = np.asarray(batch, dtype=np.int64)
    if neighbor_batch is None or len(neighbor_batch) == 0:
        nodes = batch
    else:
        extra = np.asarray(neighbor_batch, dtype=np.int64)
        extra = extra[~np.isin(extra, batch)]
        nodes = np.concatenate([batch, extra])
    if nodes.size == 0:
        raise ModelError("empty batch")
    if nodes.min() < 0 or nodes.max() >= n:
        raise ModelError("batch node missing from dataset/graph")
    return batch.size, nodes


def loss_and_gradient(params: ModelParams, batch, neighbor_batch, ds, g, h: Hyperparams,
                      rng=None, need_grad: bool = True):
    """Loss, its four raw terms and (optionally) the parameter gradient.

    ``g`` is an :class:`~graphssl.graph.AffinityGraph` or a CSR weight matrix
    over the same nodes as ``ds``.
    """
    wmat = g if sp.issparse(g) else g.matrix
    if wmat.shape[0] != ds.n:
        raise ModelError("graph and dataset sizes differ")
    n_primary, nodes = _local_nodes(batch, neighbor_batch, ds.n)
    n_local = nodes.size
    lp, (acts, pres, masks) = _forward(params, ds.features[nodes], h.dropout_p, rng)
    p = np.exp(lp)
    m = lp > LOG_FLOOR
    lq = np.where(m, lp, LOG_FLOOR)
    g_lp = np.zeros_like(lp)

    # supervised KL(t || p) over labeled primary-batch nodes
    lab = np.flatnonzero(ds.labeled_mask[nodes[:n_primary]])
    sup = 0.0
    if lab.size:
        t = ds.labels[nodes[lab]]
        sup = float((xlogy(t, t) - t * lq[lab]).sum() / lab.size)
        g_lp[lab] -= t * m[lab] / lab.size

    # graph KL(p_i || p_j) over ordered edges inside the local node set
    sub = sp.csr_matrix(wmat[nodes][:, nodes])
    npairs = sub.nnz
    graph = 0.0
    if npairs:
        ws = np.asarray(sub.sum(axis=1)).ravel()
        s_lq = sub @ lq
        graph = float((ws @ (p * lp).sum(axis=1) - (p * s_lq).sum()) / npairs)
        if need_grad and h.gamma > 0:
            c = h.gamma / npairs
            g_lp += c * p * (ws[:, None] * (lp + 1.0) - s_lq)
            g_lp -= c * m * (sub.T @ p)

    # entropy / prior regularizer KL(p_i || r_i)
    if h.reg_target == "uniform":
        lr = np.full_like(lp, -np.log(lp.shape[1]))
    else:
        lr = np.log(np.maximum(np.asarray(h.prior)[nodes], PROB_FLOOR))
    ent = float((p * (lp - lr)).sum() / n_local)
    if need_grad and h.kappa > 0:
        g_lp += (h.kappa / n_local) * p * (lp - lr + 1.0)

    l2 = float(sum((w * w).sum() for w in params.weights))
    loss = sup + h.gamma * graph + h.kappa * ent + h.lam * l2
    terms = (sup, graph, ent, l2)
    if not need_grad:
        return loss, terms, None

    # back through log-softmax and the network
    dz = g_lp - p * g_lp.sum(axis=1, keepdims=True)
    grads = params.zeros_like()
    for layer in range(len(params.weights) - 1, -1, -1):
        grads.weights[layer] = acts[layer].T @ dz + 2.0 * h.lam * params.weights[layer]
        grads.biases[layer] = dz.sum(axis=0)
        if layer == 0:
            break
        dh = dz @ params.weights[layer].T
        if masks[layer - 1] is not None:
            dh = dh * masks[layer - 1]
        dz = dh * (pres[layer - 1] > 0)
    return loss, terms, grads


def objective(params, batch, neighbor_batch, ds, g, h, rng=None):
    """(loss, (supervised, graph, entropy, l2)) without computing gradients."""
    loss, terms, _ = loss_and_gradient(params, batch, neighbor_batch, ds, g, h, rng, need_grad=False)
    return loss, terms


def gradient(params, batch, neighbor_batch, ds, g, h, rng=None) -> ModelParams:
    return loss_and_gradient(params, batch, neighbor_batch, ds, g, h, rng)[2]


@dataclass(eq=False)
class OptimizerState:
    accum: ModelParams
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(params.zeros_like(), 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.accum.copy(), self.step)


def adagrad_step(state: OptimizerState, params: ModelParams, grads: ModelParams, h: Hyperparams) -> None:
    """In place: accum += g^2; param -= lr * g / (sqrt(accum) + eps)."""
    for acc, par, g in zip(state.accum.arrays(), params.arrays(), grads.arrays()):
        if acc.shape != g.shape or par.shape != g.shape:
            raise ModelError("gradient shape does not match parameters")
        acc += g * g
        par -= h.learning_rate * g / (np.sqrt(acc) + h.adagrad_epsilon)
    state.step += 1


# --- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, state: OptimizerState | None = None) -> None:
    dims = params.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if state is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            fh.write(struct.pack("<Q", state.step))
            for arr in state.accum.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, OptimizerState | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ModelError("bad magic: not a GMDL checkpoint")
    version, ndims = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    off = 12
    dims = list(struct.unpack_from(f"<{ndims}I", buf, off))
    off += 4 * ndims
    shapes = [(a, b) for a, b in zip(dims[:-1], dims[1:])] + [(b,) for b in dims[1:]]

    def read_all(off):
        out = []
        for shape in shapes:
            count = int(np.prod(shape))
            out.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy())
            off += 8 * count
        return out, off

    arrays, off = read_all(off)
    nl = len(dims) - 1
    params = ModelParams(arrays[:nl], arrays[nl:])
    state = None
    if buf[off] == 1:
        (step,) = struct.unpack_from("<Q", buf, off + 1)
        acc, off = read_all(off + 9)
        state = OptimizerState(ModelParams(acc[:nl], acc[nl:]), int(step))
    return params, state
