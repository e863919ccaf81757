"""Synthetic labeled datasets, Dirichlet non-IID partitioning across workers,
and label-distribution bookkeeping.

Class clusters are isotropic Gaussians whose means sit on a scaled standard
simplex, so a linear probe can always recover them when the scale is generous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import streams
from .errors import InfeasiblePlanError, ShapeError, ValidationError
from .tensor import Tensor

IID = math.inf  # sentinel concentration for the p = 0 case


@dataclass(frozen=True)
class Shard:
    """One worker's local slice of the dataset."""

    samples: Tensor
    labels: np.ndarray
    owner: int

    def __post_init__(self) -> None:
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ShapeError("one label per sample required")
        if self.labels.shape[0] < 1:
            raise ValidationError("shard is empty")

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


def generate_dataset(
    seed, classes: int, per_class: int, dim: int, scale: float = 4.0
) -> tuple[Tensor, np.ndarray]:
    """Class-balanced Gaussian clusters: classes*per_class rows, shuffled."""
    if classes < 2:
        raise ValidationError("need at least two classes")
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    if dim < classes:
        raise ValidationError(
            f"dim must be >= classes to place simplex means ({dim} < {classes})"
        )
    if scale <= 0:
        raise ValidationError("cluster scale must be positive")
    rng = np.random.default_rng((seed, streams.DATASET))
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = scale
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    samples = rng.standard_normal((classes * per_class, dim)) + means[labels]
    order = rng.permutation(classes * per_class)
    return Tensor(samples[order]), labels[order]


def label_distribution(labels, classes: int) -> np.ndarray:
    """Empirical class frequencies of a label vector; sums to one."""
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        raise ValidationError("cannot take the label distribution of nothing")
    if arr.min() < 0 or arr.max() >= classes:
        raise ValidationError("labels out of range")
    counts = np.bincount(arr, minlength=classes).astype(np.float64)
    return counts / counts.sum()


def iid_reference(distributions) -> np.ndarray:
    """Arithmetic mean of per-worker label distributions (the IID target)."""
    mat = np.asarray(list(distributions), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValidationError("need at least one distribution")
    width = mat.shape[1]
    if any(row.shape[0] != width for row in mat):  # pragma: no cover - asarray guards
        raise ShapeError("distributions disagree on class count")
    return mat.mean(axis=0)


def _apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Split `total` units over workers proportionally (largest remainder)."""
    if total == 0:
        return np.zeros(len(weights), dtype=np.int64)
    w = np.maximum(weights, 0.0)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = w / w.sum() * total
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        remainders = quota - base
        # deterministic tie-break: larger remainder first, then lower index
        order = np.lexsort((np.arange(len(w)), -remainders))
        base[order[:short]] += 1
    return base


def partition_dirichlet(
    samples: Tensor, labels, workers: int, delta: float, seed
) -> list[Shard]:
    """Partition the dataset into disjoint per-worker shards whose label mixes
    follow Dir(delta * q), q being the global empirical distribution.

    delta = math.inf is the IID sentinel (every worker mirrors q). Every worker
    ends up with at least one sample; an empty draw is repaired by moving one
    sample from the largest shard.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    total = y.shape[0]
    if workers < 1:
        raise ValidationError("need at least one worker")
    if workers > total:
        raise InfeasiblePlanError(
            f"cannot give {workers} workers at least one of {total} samples"
        )
    if not (delta > 0):  # also rejects NaN
        raise ValidationError("delta must be positive (math.inf for IID)")
    classes = int(y.max()) + 1
    q = label_distribution(y, classes)
    rng = np.random.default_rng((seed, streams.PARTITION))

    present = q > 0
    if math.isinf(delta):
        mix = np.tile(q, (workers, 1))
    else:
        mix = np.zeros((workers, classes))
        mix[:, present] = rng.dirichlet(delta * q[present], size=workers)

    # Per class, hand its samples to workers proportionally to their mix row.
    assignments: list[list[np.ndarray]] = [[] for _ in range(workers)]
    for cls in range(classes):
        idx = np.flatnonzero(y == cls)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        counts = _apportion(mix[:, cls], idx.size)
        start = 0
        for w, cnt in enumerate(counts):
            if cnt:
                assignments[w].append(idx[start : start + cnt])
            start += cnt

    owned = [
        np.sort(np.concatenate(rows)) if rows else np.empty(0, dtype=np.int64)
        for rows in assignments
    ]
    # Repair: nobody may come up empty (batch sizes are at least one sample).
    for w in range(workers):
        while owned[w].size == 0:
            donor = max(range(workers), key=lambda k: (owned[k].size, -k))
            if owned[donor].size <= 1:
                raise InfeasiblePlanError("cannot repair empty shard")
            owned[w] = owned[donor][-1:]
            owned[donor] = owned[donor][:-1]

    x = samples.array
    return [
        Shard(samples=Tensor(x[idx]), labels=y[idx], owner=w)
        for w, idx in enumerate(owned)
    ]


def train_test_split(
    samples: Tensor, labels, test_fraction: float, seed
) -> tuple[tuple[Tensor, np.ndarray], tuple[Tensor, np.ndarray]]:
    """Random held-out split; the test side gets at least one row."""
    if not 0 < test_fraction < 1:
        raise ValidationError("test_fraction must be in (0, 1)")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = y.shape[0]
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise ValidationError("test split would consume the whole dataset")
    rng = np.random.default_rng((seed, streams.EVAL_SPLIT))
    order = rng.permutation(n)
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    x = samples.array
    return (
        (Tensor(x[train_idx]), y[train_idx]),
        (Tensor(x[test_idx]), y[test_idx]),
    )


# --- flat-binary shard export: <owner>.bin holds little-endian float64 rows
# followed by int32 labels; manifest.json records shapes for reloading.

def save_shards(shards: list[Shard], directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for shard in shards:
        name = f"shard_{shard.owner:04d}.bin"
        x = shard.samples.array
        with open(out / name, "wb") as fh:
            fh.write(x.astype("<f8").tobytes())
            fh.write(shard.labels.astype("<i4").tobytes())
        entries.append(
            {"owner": shard.owner, "file": name, "rows": int(x.shape[0]), "dim": int(x.shape[1])}
        )
    manifest = {"format": "sflsim-shards-v1", "shards": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def load_shards(directory) -> list[Shard]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "sflsim-shards-v1":
        raise ValidationError("unrecognized shard manifest format")
    shards = []
    for entry in manifest["shards"]:
        rows, dim = entry["rows"], entry["dim"]
        raw = (root / entry["file"]).read_bytes()
        want = rows * dim * 8 + rows * 4
        if len(raw) != want:
            raise ValidationError(f"shard file {entry['file']} has wrong length")
        x = np.frombuffer(raw[: rows * dim * 8], dtype="<f8").reshape(rows, dim)
        y = np.frombuffer(raw[rows * dim * 8 :], dtype="<i4").astype(np.int64)
        shards.append(Shard(samples=Tensor(x.copy()), labels=y, owner=entry["owner"]))
    return sorted(shards, key=lambda s: s.owner)
