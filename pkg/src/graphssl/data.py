"""Datasets for graph-regularized semi-supervised training.

Labels are stored as full distributions over ``class_count`` classes so that
soft (probabilistic) targets are first class; hard labels load as one-hot rows.
Unlabeled rows carry an all-zero label vector and ``labeled_mask == False``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "NormStats",
    "SynthSpec",
    "load_dataset",
    "save_dataset",
    "normalize",
    "apply_norm",
    "window_features",
    "drop_labels",
    "synth_generate",
    "split_dataset",
]

DATASET_MAGIC = b"GRSL"
DATASET_VERSION = 1
LABEL_SUM_TOL = 1e-9


class DataError(ValueError):
    """Raised for malformed input files or invalid dataset operations."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    class_count: int
    sequence_ids: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {x.shape}")
        n = x.shape[0]
        y = np.array(self.labels, dtype=np.float64)
        if y.shape != (n, self.class_count):
            raise DataError(f"labels shape {y.shape} != ({n}, {self.class_count})")
        mask = np.array(self.labeled_mask, dtype=bool)
        if mask.shape != (n,):
            raise DataError("labeled_mask length does not match sample count")
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        bad = ~np.isfinite(x).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite feature in row {int(np.flatnonzero(bad)[0])}")
        lab = y[mask]
        if lab.size:
            if (lab < 0).any() or np.abs(lab.sum(axis=1) - 1.0).max() > LABEL_SUM_TOL:
                row = np.flatnonzero(mask)[
                    np.argmax((lab < 0).any(axis=1) | (np.abs(lab.sum(axis=1) - 1.0) > LABEL_SUM_TOL))
                ]
                raise DataError(f"label of row {int(row)} is not a distribution")
        seq = None
        if self.sequence_ids is not None:
            seq = np.array(self.sequence_ids, dtype=np.int64)
            if seq.shape != (n,):
                raise DataError("sequence_ids length does not match sample count")
            seq.setflags(write=False)
        for arr in (x, y, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "labeled_mask", mask)
        object.__setattr__(self, "sequence_ids", seq)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def n_unlabeled(self) -> int:
        return self.n - self.n_labeled

    def class_ids(self) -> np.ndarray:
        """Argmax class per sample, -1 for unlabeled rows."""
        ids = np.argmax(self.labels, axis=1)
        return np.where(self.labeled_mask, ids, -1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        seq = None if self.sequence_ids is None else self.sequence_ids[idx]
        return Dataset(self.features[idx], self.labels[idx], self.labeled_mask[idx],
                       self.class_count, seq)

    @classmethod
    def from_class_ids(cls, features, class_ids, class_count=None, sequence_ids=None) -> "Dataset":
        """Build a dataset from integer class ids; negative ids mean unlabeled."""
        ids = np.asarray(class_ids, dtype=np.int64)
        if class_count is None:
            class_count = int(ids.max()) + 1 if (ids >= 0).any() else 1
        if (ids >= class_count).any():
            raise DataError(f"unknown class id {int(ids.max())} (class_count={class_count})")
        mask = ids >= 0
        labels = np.zeros((len(ids), class_count))
        labels[np.flatnonzero(mask), ids[mask]] = 1.0
        return cls(features, labels, mask, class_count, sequence_ids)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean and std; std is floored so constant columns map to 0."""

    mean: np.ndarray
    std: np.ndarray
    floor: float = 1e-8


def normalize(ds: Dataset, floor: float = 1e-8) -> tuple[Dataset, NormStats]:
    if ds.n < 2:
        raise DataError("normalize needs at least 2 samples")
    x = ds.features
    # a constant column can have a mean a few ulps off its value; pin it exactly
    mean = np.where(np.ptp(x, axis=0) == 0, x[0], x.mean(axis=0))
    std = np.maximum(ds.features.std(axis=0), floor)
    stats = NormStats(mean, std, floor)
    return apply_norm(ds, stats), stats


def apply_norm(ds: Dataset, stats: NormStats) -> Dataset:
    return replace(ds, features=(ds.features - stats.mean) / stats.std)


def window_features(ds: Dataset, radius: int) -> Dataset:
    """Stack each frame with its ``radius`` neighbours on both sides.

    Frames are grouped by ``sequence_ids`` (one sequence when absent) and must be
    stored contiguously in time order. Edges are padded by replicating the first
    and last frame of each sequence. Labels stay with the centre frame.
    """
    if radius < 0:
        raise DataError("radius must be nonnegative")
    if radius == 0:
        return ds
    seq = ds.sequence_ids if ds.sequence_ids is not None else np.zeros(ds.n, dtype=np.int64)
    out = np.empty((ds.n, ds.dim * (2 * radius + 1)))
    starts = np.flatnonzero(np.r_[True, seq[1:] != seq[:-1]])
    stops = np.r_[starts[1:], ds.n]
    if len(np.unique(seq)) != len(starts):
        raise DataError("sequence frames must be contiguous")
    too_short = [int(seq[a]) for a, b in zip(starts, stops) if radius >= b - a]
    if too_short:
        raise DataError(f"radius {radius} >= length of sequence(s) {too_short}")
    for a, b in zip(starts, stops):
        frames = ds.features[a:b]
        padded = np.concatenate([np.repeat(frames[:1], radius, axis=0), frames,
                                 np.repeat(frames[-1:], radius, axis=0)])
        length = b - a
        for off in range(2 * radius + 1):
            out[a:b, off * ds.dim:(off + 1) * ds.dim] = padded[off:off + length]
    return replace(ds, features=out)


def drop_labels(ds: Dataset, ratio: float, seed: int, max_retries: int = 100) -> Dataset:
    """Keep exactly ``round(ratio * n)`` labels, chosen uniformly at random.

    When enough labels are kept to cover every class, draws are repeated (up to
    ``max_retries``) until each class retains at least one labeled sample.
    """
    if not 0.0 < ratio <= 1.0:
        raise DataError("ratio must lie in (0, 1]")
    if not ds.labeled_mask.all():
        raise DataError("drop_labels expects a fully labeled dataset")
    keep = int(round(ratio * ds.n))
    if ratio * ds.n < 1 or keep < 1:
        raise DataError(f"ratio {ratio} leaves no labeled samples out of {ds.n}")
    if keep == ds.n:
        return ds
    rng = np.random.default_rng(seed)
    ids = ds.class_ids()
    present = np.unique(ids)
    need_all = keep >= ds.class_count
    for _ in range(max_retries):
        chosen = rng.choice(ds.n, size=keep, replace=False)
        if not need_all or np.isin(present, ids[chosen]).all():
            break
    mask = np.zeros(ds.n, dtype=bool)
    mask[chosen] = True
    labels = np.where(mask[:, None], ds.labels, 0.0)
    return replace(ds, labels=labels, labeled_mask=mask)


def split_dataset(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random split into (rest, held) where held has ``round(fraction * n)`` rows."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    cut = int(round(fraction * ds.n))
    return ds.subset(np.sort(perm[cut:])), ds.subset(np.sort(perm[:cut]))


# --- synthetic manifolds -------------------------------------------------------

MANIFOLDS = ("gaussian-mixture", "concentric-rings", "noisy-chains")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset.

    ``manifold`` is one of ``gaussian-mixture``, ``concentric-rings`` (alias
    ``rings``) or ``noisy-chains`` (interleaved spiral arms). ``dim`` > 2 embeds
    the 2-d manifold into a randomly rotated higher dimensional space, with
    ``noise``-scaled gaussian jitter along the extra dimensions.
    """

    classes: int
    per_class: int
    manifold: str = "concentric-rings"
    noise: float = 0.1
    seed: int = 0
    dim: int = 2
    separation: float = 4.0
    extra: dict = field(default_factory=dict)


def _manifold_name(name: str) -> str:
    aliases = {"rings": "concentric-rings", "chains": "noisy-chains",
               "gmm": "gaussian-mixture", "gaussian": "gaussian-mixture"}
    name = aliases.get(name, name)
    if name not in MANIFOLDS:
        raise DataError(f"unknown manifold {name!r}; choose from {MANIFOLDS}")
    return name


def synth_generate(spec: SynthSpec) -> Dataset:
    if spec.classes < 1 or spec.per_class < 1:
        raise DataError("class count and samples per class must be positive")
    if spec.dim < 2:
        raise DataError("dim must be at least 2")
    if spec.noise < 0:
        raise DataError("noise must be nonnegative")
    kind = _manifold_name(spec.manifold)
    rng = np.random.default_rng(spec.seed)
    m, per = spec.classes, spec.per_class
    pts = []
    for c in range(m):
        if kind == "gaussian-mixture":
            ang = 2 * math.pi * c / m
            radius = spec.separation * max(1.0, m / (2 * math.pi))
            center = radius * np.array([math.cos(ang), math.sin(ang)])
            p = center + spec.noise * rng.standard_normal((per, 2))
        elif kind == "concentric-rings":
            theta = rng.uniform(0, 2 * math.pi, per)
            r = 1.0 + c + spec.noise * rng.standard_normal(per)
            p = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        else:
            # class c is one arm of an m-armed spiral
            t = np.sqrt(rng.uniform(0.0, 1.0, per))
            theta = 3 * math.pi * t + 2 * math.pi * c / m
            r = 0.25 + 2.0 * t
            p = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
            p = p + spec.noise * rng.standard_normal((per, 2))
        pts.append(p)
    x = np.concatenate(pts)
    ids = np.repeat(np.arange(m), per)
    if spec.dim > 2:
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
        off = spec.noise * rng.standard_normal((len(x), spec.dim - 2))
        x = np.concatenate([x, off], axis=1) @ q.T
    order = rng.permutation(len(x))
    return Dataset.from_class_ids(x[order], ids[order], m)


# --- file formats ----------------------------------------------------------------


def load_dataset(path, format: str | None = None, class_count: int | None = None) -> Dataset:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "csv":
        return _load_csv(path, class_count)
    if format == "binary":
        return _load_binary(path)
    raise DataError(f"unknown dataset format {format!r}")


def save_dataset(ds: Dataset, path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "csv":
        _save_csv(ds, path)
    elif format == "binary":
        _save_binary(ds, path)
    else:
        raise DataError(f"unknown dataset format {format!r}")


def _load_csv(path: Path, class_count: int | None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("no samples")
    header = [h.strip() for h in rows[0]]
    if not header or header[-1] != "label":
        raise DataError("CSV header must end with a 'label' column")
    d = len(header) - 1
    feats, ids = [], []
    for lineno, row in enumerate(rows[1:]):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d + 1:
            raise DataError(f"row {lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[:d]]
        except ValueError as exc:
            raise DataError(f"row {lineno}: malformed feature ({exc})") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"row {lineno}: non-finite feature")
        lab = row[d].strip()
        if lab == "":
            ids.append(-1)
        else:
            try:
                cid = int(lab)
            except ValueError:
                raise DataError(f"row {lineno}: malformed label {lab!r}") from None
            if cid < 0 or (class_count is not None and cid >= class_count):
                raise DataError(f"row {lineno}: unknown class id {cid}")
            ids.append(cid)
        feats.append(vals)
    if not feats:
        raise DataError("no samples")
    x = np.asarray(feats, dtype=np.float64).reshape(len(feats), d)
    return Dataset.from_class_ids(x, ids, class_count)


def _save_csv(ds: Dataset, path: Path) -> None:
    ids = ds.class_ids()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
        for row, cid in zip(ds.features, ids):
            w.writerow([repr(float(v)) for v in row] + ["" if cid < 0 else int(cid)])


def _save_binary(ds: Dataset, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQII", DATASET_VERSION, ds.n, ds.dim, ds.class_count))
        fh.write(ds.features.astype("<f4").tobytes())
        labels = ds.labels.astype("<f4")
        for i in range(ds.n):
            if ds.labeled_mask[i]:
                fh.write(b"\x01")
                fh.write(labels[i].tobytes())
            else:
                fh.write(b"\x00")


def _load_binary(path: Path) -> Dataset:
    buf = path.read_bytes()
    if len(buf) == 0:
        raise DataError("no samples")
    if buf[:4] != DATASET_MAGIC:
        raise DataError("bad magic: not a GRSL dataset file")
    head = struct.calcsize("<IQII")
    if len(buf) < 4 + head:
        raise DataError("truncated header")
    version, n, d, m = struct.unpack_from("<IQII", buf, 4)
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    if n == 0:
        raise DataError("no samples")
    off = 4 + head
    nfeat = n * d * 4
    if len(buf) < off + nfeat:
        raise DataError("truncated feature block")
    x = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += nfeat
    labels = np.zeros((n, m))
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        if off >= len(buf):
            raise DataError(f"row {i}: truncated label record")
        flag = buf[off]
        off += 1
        if flag == 1:
            if off + 4 * m > len(buf):
                raise DataError(f"row {i}: truncated label record")
            labels[i] = np.frombuffer(buf, dtype="<f4", count=m, offset=off)
            off += 4 * m
            mask[i] = True
        elif flag != 0:
            raise DataError(f"row {i}: bad label flag {flag}")
    # float32 storage rounds label vectors; renormalize to keep them on the simplex
    sums = labels[mask].sum(axis=1, keepdims=True)
    if mask.any():
        if (sums <= 0).any():
            raise DataError("labeled row with zero label mass")
        labels[mask] = labels[mask] / sums
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise DataError(f"row {int(np.flatnonzero(bad)[0])}: non-finite feature")
    return Dataset(x, labels, mask, m)
