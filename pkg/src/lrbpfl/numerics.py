"""Dense float64 helpers, losses and a path-addressed random stream.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 stored in
row-major (C) order. The wrappers here only add shape checking with readable
errors; the arithmetic itself is numpy's.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return a * b


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of :func:`softplus` for ``y > 0``."""
    y = np.asarray(y, dtype=DTYPE)
    if np.any(y <= 0):
        raise ValueError("softplus_inv is only defined for positive values")
    # log(exp(y) - 1) written to stay accurate for large and small y
    return y + np.log(-np.expm1(-y))


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``logits`` and is
    ``(softmax(logits) - onehot(labels)) / batch``.
    """
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def _label_key(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        label = int(label)
    if isinstance(label, (int, np.integer)) and 0 <= int(label) < 2**32:
        return int(label)
    digest = hashlib.blake2b(repr(label).encode(), digest_size=4).digest()
    # Tag hashed labels with the high bit so they never collide with small ints.
    return int.from_bytes(digest, "little") | (1 << 32)


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream addressed by ``(seed, path)``.

    Two streams with the same seed and path always produce the same draws;
    draws do not depend on what other streams were consumed before, so work
    for different clients or rounds can run in any order.
    """

    seed: int
    path: tuple = ()

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & (2**64 - 1),
            spawn_key=tuple(_label_key(p) for p in self.path),
        )
        return np.random.Generator(np.random.Philox(ss))


def gaussian_draw(rng: RngStream, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("gaussian_draw needs n >= 1")
    return rng.generator().standard_normal(int(n))
