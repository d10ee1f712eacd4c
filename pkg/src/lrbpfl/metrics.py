"""Accuracy, ECE/MCE and reliability-diagram data.

Bins are equal-width, half-open ``(lo, hi]`` intervals over ``(0, 1]``; a
confidence of exactly 0 goes to the first bin.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_BINS = 10


def evaluate_client(probabilities, labels, atol: float = 1e-6):
    """Top-1 accuracy, confidences and correctness for one client.

    Ties in the argmax go to the lowest class index.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[0] != y.size:
        raise ValueError(f"probabilities {p.shape} do not match {y.size} labels")
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise ValueError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    pred = p.argmax(axis=1)
    conf = p[np.arange(y.size), pred]
    correct = (pred == y).astype(np.float64)
    return float(correct.mean()) if y.size else 0.0, conf, correct


def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)


def _binned(confidences, correctness, n_bins: int):
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    corr = np.asarray(correctness, dtype=np.float64).reshape(-1)
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if conf.size == 0:
        raise ValueError("no samples to bin")
    if conf.size != corr.size:
        raise ValueError(f"{conf.size} confidences but {corr.size} correctness flags")
    idx = _bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / counts, 0.0)
        acc = np.where(counts > 0, acc_sum / counts, 0.0)
    return counts, mean_conf, acc


def ece(confidences, correctness, n_bins: int = DEFAULT_BINS) -> float:
    counts, mean_conf, acc = _binned(confidences, correctness, n_bins)
    return float(np.sum(counts / counts.sum() * np.abs(acc - mean_conf)))


def mce(confidences, correctness, n_bins: int = DEFAULT_BINS) -> float:
    counts, mean_conf, acc = _binned(confidences, correctness, n_bins)
    gaps = np.abs(acc - mean_conf)[counts > 0]
    return float(gaps.max())


@dataclass
class ReliabilityBin:
    count: int
    mean_conf: float
    acc: float


def reliability_bins(confidences, correctness, n_bins: int = DEFAULT_BINS) -> list[ReliabilityBin]:
    counts, mean_conf, acc = _binned(confidences, correctness, n_bins)
    return [ReliabilityBin(int(c), float(m), float(a)) for c, m, a in zip(counts, mean_conf, acc)]


@dataclass
class ClientCalibration:
    id: int
    accuracy: float
    ece: float
    mce: float
    bins: list[ReliabilityBin] = field(default_factory=list)


def client_calibration(client_id, probabilities, labels, n_bins: int = DEFAULT_BINS) -> ClientCalibration:
    accuracy, conf, correct = evaluate_client(probabilities, labels)
    return ClientCalibration(
        int(client_id),
        accuracy,
        ece(conf, correct, n_bins),
        mce(conf, correct, n_bins),
        reliability_bins(conf, correct, n_bins),
    )


@dataclass
class CalibrationReport:
    clients: list[ClientCalibration]
    a_ece: float
    w_ece: float
    worst_client: int
    mean_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        clients = [
            ClientCalibration(c["id"], c["accuracy"], c["ece"], c["mce"], [ReliabilityBin(**b) for b in c["bins"]])
            for c in d["clients"]
        ]
        return cls(clients, d["a_ece"], d["w_ece"], d["worst_client"], d["mean_accuracy"])

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        return cls.from_dict(json.loads(text))

    def summary(self) -> dict:
        return {"mean_accuracy": self.mean_accuracy, "a_ece": self.a_ece, "w_ece": self.w_ece}


def fleet_report(clients: list[ClientCalibration]) -> CalibrationReport:
    """Aggregate per-client calibration into A-ECE (mean) and W-ECE (worst)."""
    if not clients:
        raise ValueError("fleet report needs at least one client")
    eces = np.array([c.ece for c in clients])
    worst = int(np.argmax(eces))
    return CalibrationReport(
        clients=list(clients),
        a_ece=float(eces.mean()),
        w_ece=float(eces[worst]),
        worst_client=clients[worst].id,
        mean_accuracy=float(np.mean([c.accuracy for c in clients])),
    )


def reliability_csv(client: ClientCalibration) -> str:
    n_bins = len(client.bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count", "mean_conf", "acc"])
    for i, b in enumerate(client.bins):
        w.writerow([repr(i / n_bins), repr((i + 1) / n_bins), b.count, repr(b.mean_conf), repr(b.acc)])
    return buf.getvalue()
