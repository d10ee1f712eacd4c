"""Synthetic data, non-i.i.d. partitioners, per-client splits and CSV loading."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, RngStream

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"features {self.features.shape} do not line up with {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def synth_clusters(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    rng: RngStream,
    separation: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian blobs, one per class, with balanced labels.

    Class centres are random directions on the unit sphere scaled by
    ``separation``; samples add ``spread``-scaled standard normal noise.
    """
    if min(num_classes, dim, per_class) < 1:
        raise DataError("num_classes, dim and per_class must all be >= 1")
    if spread <= 0:
        raise DataError("spread must be positive")
    gen = rng.generator()
    centres = gen.standard_normal((num_classes, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres *= separation
    labels = np.repeat(np.arange(num_classes), per_class)
    features = centres[labels] + spread * gen.standard_normal((labels.size, dim))
    return Dataset(features, labels, num_classes)


def label_shard_partition(ds: Dataset, K: int, labels_per_client: int, rng: RngStream) -> list[np.ndarray]:
    """Give each client ``labels_per_client`` random labels and deal out samples.

    Every label's samples are shuffled and dealt round-robin to the clients
    that hold the label. Returns one sorted index array per client.
    """
    if K < 1:
        raise DataError("need at least one client")
    if not 1 <= labels_per_client <= ds.num_classes:
        raise DataError(f"labels_per_client must be in [1, {ds.num_classes}], got {labels_per_client}")
    gen = rng.generator()
    holdings = [gen.choice(ds.num_classes, size=labels_per_client, replace=False) for _ in range(K)]
    holders = {c: [k for k in range(K) if c in holdings[k]] for c in range(ds.num_classes)}
    shards = [[] for _ in range(K)]
    for c in range(ds.num_classes):
        if not holders[c]:
            continue
        idx = np.flatnonzero(ds.labels == c)
        gen.shuffle(idx)
        for j, sample in enumerate(idx):
            shards[holders[c][j % len(holders[c])]].append(sample)
    for k, s in enumerate(shards):
        if not s:
            raise DataError(
                f"client {k} received no samples; generate more data per class or use fewer clients"
            )
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def dirichlet_partition(
    ds: Dataset, K: int, alpha: float, rng: RngStream, max_retries: int = 100
) -> list[np.ndarray]:
    """Per-client class proportions drawn from a symmetric Dirichlet(alpha).

    Each sample of class ``c`` is sent to a client drawn with probability
    proportional to that client's share of ``c``. Draws that leave a client
    empty are retried up to ``max_retries`` times.
    """
    if alpha <= 0:
        raise DataError("alpha must be positive")
    if K < 1:
        raise DataError("need at least one client")
    for attempt in range(max_retries):
        gen = rng.child("attempt", attempt).generator()
        props = gen.dirichlet(np.full(ds.num_classes, float(alpha)), size=K)
        owner = np.empty(len(ds), dtype=np.int64)
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c)
            if idx.size == 0:
                continue
            p = props[:, c]
            total = p.sum()
            p = np.full(K, 1.0 / K) if total <= 0 else p / total
            owner[idx] = gen.choice(K, size=idx.size, p=p)
        shards = [np.flatnonzero(owner == k) for k in range(K)]
        if all(s.size for s in shards):
            return shards
    raise DataError(f"Dirichlet partition left a client empty after {max_retries} attempts")


def stratified_take(labels: np.ndarray, count: int, gen: np.random.Generator) -> np.ndarray:
    """Positions of ``count`` items spread across labels by largest remainder."""
    n = labels.size
    classes, inverse = np.unique(labels, return_inverse=True)
    sizes = np.bincount(inverse, minlength=classes.size)
    quota = sizes * (count / n)
    take = np.floor(quota).astype(np.int64)
    remainder = quota - take
    short = count - int(take.sum())
    if short > 0:
        order = np.lexsort((np.arange(classes.size), -remainder))
        take[order[:short]] += 1
    picked = []
    for j in range(classes.size):
        pos = np.flatnonzero(inverse == j)
        gen.shuffle(pos)
        picked.append(pos[: take[j]])
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)


def split_and_subsample(
    shard: Dataset,
    train_fraction: float,
    subsample_fraction: float,
    rng: RngStream,
) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; only the train side is subsampled."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    if not 0.0 < subsample_fraction <= 1.0:
        raise DataError("subsample_fraction must lie in (0, 1]")
    if len(shard) == 0:
        raise DataError("cannot split an empty shard")
    gen = rng.generator()
    n_train = int(np.floor(train_fraction * len(shard) + 0.5))
    train_pos = stratified_take(shard.labels, n_train, gen)
    test_mask = np.ones(len(shard), dtype=bool)
    test_mask[train_pos] = False
    train, test = shard.subset(train_pos), shard.subset(np.flatnonzero(test_mask))
    if subsample_fraction < 1.0:
        keep = int(np.floor(subsample_fraction * len(train) + 0.5))
        train = train.subset(stratified_take(train.labels, keep, gen))
    if len(train) == 0:
        raise DataError("train split is empty after subsampling; use more data or larger fractions")
    if len(test) == 0:
        raise DataError("test split is empty; lower train_fraction or use more data")
    return train, test


def load_csv(path: str | os.PathLike) -> Dataset:
    """Load ``d`` feature columns followed by an integer label column.

    Labels that are not contiguous from zero are remapped in sorted order and
    a warning is logged.
    """
    feats, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataError(f"{path}: row {lineno} needs at least one feature and a label")
            try:
                x = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno} has a non-numeric feature ({exc})") from None
            cell = row[-1].strip()
            try:
                lab = int(cell)
            except ValueError:
                raise DataError(f"{path}: row {lineno} label {cell!r} is not an integer") from None
            if feats and len(x) != len(feats[0]):
                raise DataError(f"{path}: row {lineno} has {len(x)} features, expected {len(feats[0])}")
            feats.append(x)
            labels.append(lab)
    if not labels:
        raise DataError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    uniq = np.unique(labels)
    if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
        log.warning("%s: labels %s are not contiguous from 0; remapping", path, uniq.tolist())
        labels = np.searchsorted(uniq, labels)
    return Dataset(np.asarray(feats), labels, int(labels.max()) + 1)


def write_csv(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
