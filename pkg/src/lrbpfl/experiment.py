"""End-to-end experiment: data, partitions, training, evaluation and outputs."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .data import (
    Dataset,
    dirichlet_partition,
    label_shard_partition,
    load_csv,
    split_and_subsample,
    synth_clusters,
    stratified_take,
)
from .network import SharedModel, mlp_specs
from .numerics import RngStream
from .runtime import (
    RunResult,
    ServerState,
    adapt_new_client,
    evaluate,
    layer_ranks,
    make_clients,
    new_client_probabilities,
    run_training,
)


@dataclass
class Federation:
    """Everything derived from the config before training starts."""

    specs: list
    splits: list
    new_client_splits: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    mode: str
    run: RunResult
    report: metrics.CalibrationReport
    new_clients: dict = field(default_factory=dict)

    def rank_rows(self, threshold: float) -> list[tuple[int, int, int]]:
        rows = []
        for c in self.run.clients:
            for layer, rank in zip(masked_layer_indices(c), layer_ranks(c, threshold)):
                rows.append((c.id, layer, rank))
        return rows


def masked_layer_indices(client) -> list[int]:
    return [i for i, lm in enumerate(client.mask.layers) if lm is not None]


def load_dataset(cfg: ExperimentConfig, rng: RngStream) -> Dataset:
    d = cfg.dataset
    if d.kind == "csv":
        return load_csv(d.path)
    return synth_clusters(d.num_classes, d.dim, d.per_class, d.spread, rng, separation=d.separation)


def _partition(ds: Dataset, kind: str, K: int, labels_per_client: int, alpha: float, rng: RngStream):
    if kind == "labels_per_client":
        return label_shard_partition(ds, K, labels_per_client, rng)
    return dirichlet_partition(ds, K, alpha, rng)


def _splits(ds: Dataset, shards, train_fraction, subsample_fraction, rng: RngStream):
    return [
        split_and_subsample(ds.subset(s), train_fraction, subsample_fraction, rng.child("split", k))
        for k, s in enumerate(shards)
    ]


def build_federation(cfg: ExperimentConfig) -> Federation:
    root = RngStream(cfg.seed)
    ds = load_dataset(cfg, root.child("data"))
    p = cfg.partition
    nc = cfg.new_clients
    pool = ds
    new_pool = None
    if nc.count:
        gen = root.child("holdout").generator()
        held = stratified_take(ds.labels, int(np.floor(nc.pool_fraction * len(ds) + 0.5)), gen)
        rest = np.setdiff1d(np.arange(len(ds)), held)
        pool, new_pool = ds.subset(rest), ds.subset(held)
    shards = _partition(pool, p.kind, p.clients, p.labels_per_client, p.alpha, root.child("partition"))
    splits = _splits(pool, shards, p.train_fraction, p.subsample_fraction, root.child("partition"))
    new_splits = {}
    for alpha in nc.alphas if nc.count else []:
        r = root.child("new_clients", repr(float(alpha)))
        new_shards = dirichlet_partition(new_pool, nc.count, alpha, r)
        new_splits[float(alpha)] = _splits(new_pool, new_shards, p.train_fraction, p.subsample_fraction, r)
    dims = [ds.dim, *cfg.model.hidden, ds.num_classes]
    return Federation(mlp_specs(dims, cfg.model.masked), splits, new_splits)


def run_experiment(cfg: ExperimentConfig, mode: str | None = None, on_round=None) -> ExperimentResult:
    """Train one mode on the configured federation and evaluate every client.

    Partitions and the initial shared model depend only on the seed, so every
    mode sees identical data and starting weights.
    """
    mode = mode or cfg.mode
    fed = build_federation(cfg)
    root = RngStream(cfg.seed)
    sched = cfg.schedule
    model = SharedModel.init(fed.specs, root.child("init"))
    clients = make_clients(fed.splits, fed.specs, sched, mode)
    run = run_training(
        ServerState(0, model), clients, fed.specs, sched, mode, root.child("train"), cfg.eval_every, on_round
    )
    report = evaluate(run.server.model, fed.specs, run.clients, sched, mode, root.child("final"), cfg.bins)
    new_reports = {}
    for alpha, splits in fed.new_client_splits.items():
        r = root.child("adapt", repr(alpha))
        per_client = []
        for k, (train, test) in enumerate(splits):
            c = adapt_new_client(run.server.model, fed.specs, train, test, sched, r.child("client", k), k, mode)
            p = new_client_probabilities(run.server.model, fed.specs, c, sched, mode, r.child("eval", k))
            per_client.append(metrics.client_calibration(k, p, test.labels, cfg.bins))
        new_reports[alpha] = metrics.fleet_report(per_client)
    return ExperimentResult(mode, run, report, new_reports)


def atomic_write(path: str, text: str) -> None:
    """Write via a temporary file in the same directory and rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(result: ExperimentResult, cfg: ExperimentConfig, out_dir: str) -> list[str]:
    """Round log, calibration report, reliability CSVs, rank table and new-client reports."""
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        atomic_write(path, text)
        written.append(path)

    put("config.json", cfg.to_json() + "\n")
    put("rounds.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.run.log))
    put("report.json", result.report.to_json() + "\n")
    for c in result.report.clients:
        put(os.path.join("reliability", f"client_{c.id}.csv"), metrics.reliability_csv(c))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "layer_index", "final_rank"])
    if result.mode != "fedavg":
        w.writerows(result.rank_rows(cfg.schedule.threshold))
    put("ranks.csv", buf.getvalue())
    if result.new_clients:
        doc = {repr(a): rep.to_dict() for a, rep in result.new_clients.items()}
        put("new_clients.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return written
