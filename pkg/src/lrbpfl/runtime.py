"""Round-synchronous federated training.

Modes:

``lr_bpfl``
    Coordinate descent per client: reinitialize the mask posteriors, take
    ``local_steps`` steps on the mask (W frozen), then ``shared_steps`` steps
    on W (mask frozen), then threshold-prune the gates.
``lr_bpfl_joint``
    Same free energy but W and the mask are stepped together.
``lr_bpfl_no_ars``
    Coordinate descent with gates fixed at one and no pruning.
``fedavg``
    Plain local SGD on the mean cross-entropy, no mask.

Only the shared model crosses the client/server boundary; see
:func:`encode_update`.
"""

from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics
from .data import Dataset
from .network import (
    ClientMask,
    SharedModel,
    loss_and_grads,
    predict_proba,
    predict_sample,
    sample_mask,
)
from .numerics import RngStream, softmax_cross_entropy
from .variational import effective_rank, threshold_prune

log = logging.getLogger(__name__)

MODES = ("lr_bpfl", "lr_bpfl_joint", "lr_bpfl_no_ars", "fedavg")


class NumericalError(RuntimeError):
    def __init__(self, message: str, round_index=None, client_id=None):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id


@dataclass
class TrainingSchedule:
    rounds: int = 1000
    fraction: float = 0.2
    local_steps: int = 20
    shared_steps: int = 1
    lr_shared: float = 0.001
    lr_mask: float = 0.002
    lr_gamma: float = 0.001
    lr_fedavg: float = 0.1
    batch_size: int = 32
    threshold: float = 0.95
    r_max: int = 8
    samples: int = 4
    prior_var: float = 0.1
    l2_weight: float = 0.1
    gamma_init: float = 3.5
    posterior_init_std: float = 0.05
    clip_norm: float = 0.0

    def validate(self) -> None:
        """Raise ``ValueError("<field>: ...")`` on the first violated invariant."""
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction: must lie in (0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold: must lie in (0, 1)")
        for name in ("rounds", "local_steps", "batch_size", "r_max", "samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.shared_steps < 0:
            raise ValueError("shared_steps: must be >= 0")
        for name in ("lr_shared", "lr_mask", "lr_gamma", "lr_fedavg", "prior_var", "posterior_init_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be > 0")
        if self.l2_weight < 0:
            raise ValueError("l2_weight: must be >= 0")
        if self.clip_norm < 0:
            raise ValueError("clip_norm: must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSchedule":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown schedule field")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientState:
    id: int
    train: Dataset
    test: Dataset
    mask: ClientMask
    weight: float = 0.0


@dataclass
class ServerState:
    round: int
    model: SharedModel


@dataclass
class RunResult:
    server: ServerState
    clients: list
    log: list = field(default_factory=list)


def uses_mask(mode: str) -> bool:
    return mode != "fedavg"


def check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode: {mode!r} is not one of {', '.join(MODES)}")


def make_clients(splits, specs, sched: TrainingSchedule, mode: str) -> list[ClientState]:
    """Client states with fresh masks and weights ``l_k = |D_k| / |D|`` (train sizes)."""
    total = sum(len(train) for train, _ in splits)
    return [
        ClientState(
            k,
            train,
            test,
            fresh_mask(specs, sched, mode),
            len(train) / total,
        )
        for k, (train, test) in enumerate(splits)
    ]


def fresh_mask(specs, sched: TrainingSchedule, mode: str) -> ClientMask:
    return ClientMask.fresh(
        specs,
        sched.r_max,
        sched.prior_var,
        ars=mode != "lr_bpfl_no_ars",
        gamma_init=sched.gamma_init,
        init_std=sched.posterior_init_std,
    )


def sample_clients(K: int, fraction: float, rng: RngStream) -> list[int]:
    if K < 1 or not 0.0 < fraction <= 1.0 or fraction * K < 1.0:
        raise ValueError(f"fraction: sampling {fraction} of {K} clients selects nobody")
    m = min(K, int(np.floor(fraction * K + 0.5)))
    return sorted(int(i) for i in rng.generator().choice(K, size=m, replace=False))


def aggregate(models: list[SharedModel], weights) -> SharedModel:
    """Weighted mean of models with weights renormalized to sum to one."""
    if not models:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("aggregation weights must be non-negative, one per model, not all zero")
    w = w / w.sum()
    ref = models[0]
    for m in models[1:]:
        if [a.shape for a in m.weights + m.biases] != [a.shape for a in ref.weights + ref.biases]:
            raise ValueError("cannot aggregate models of different shapes")
    avg = lambda arrs: sum(wi * a for wi, a in zip(w, arrs))  # noqa: E731
    return SharedModel(
        [avg([m.weights[i] for m in models]) for i in range(len(ref.weights))],
        [avg([m.biases[i] for m in models]) for i in range(len(ref.biases))],
    )


def encode_update(model: SharedModel, n_samples: int) -> bytes:
    """Serialize what a client uploads: shared weights, biases and its sample count."""
    arrays = {f"W{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    buf = io.BytesIO()
    np.savez(buf, n_samples=np.int64(n_samples), **arrays)
    return buf.getvalue()


def decode_update(payload: bytes) -> tuple[SharedModel, int]:
    with np.load(io.BytesIO(payload)) as z:
        n_layers = sum(1 for k in z.files if k.startswith("W"))
        model = SharedModel([z[f"W{i}"] for i in range(n_layers)], [z[f"b{i}"] for i in range(n_layers)])
        return model, int(z["n_samples"])


def update_keys(payload: bytes) -> list[str]:
    with np.load(io.BytesIO(payload)) as z:
        return sorted(z.files)


def _batch(ds: Dataset, size: int, rng: RngStream):
    if len(ds) <= size:
        return ds.features, ds.labels
    idx = rng.generator().choice(len(ds), size=size, replace=False)
    return ds.features[idx], ds.labels[idx]


def _clip_factor(arrays, max_norm: float) -> float:
    """Scale that brings the joint L2 norm of ``arrays`` down to ``max_norm`` (0 disables)."""
    if max_norm <= 0:
        return 1.0
    norm = np.sqrt(sum(float(np.sum(a * a)) for a in arrays if a is not None))
    return 1.0 if norm <= max_norm else max_norm / norm


def _step_mask(mask: ClientMask, grads, sched: TrainingSchedule) -> None:
    groups = (grads.q_mean, grads.q_raw, grads.r_mean, grads.r_raw, grads.gamma)
    f = _clip_factor([g for group in groups for g in group], sched.clip_norm)
    for idx, lm in enumerate(mask.layers):
        if lm is None:
            continue
        lm.q.mean -= f * sched.lr_mask * grads.q_mean[idx]
        lm.q.raw_scale -= f * sched.lr_mask * grads.q_raw[idx]
        lm.r.mean -= f * sched.lr_mask * grads.r_mean[idx]
        lm.r.raw_scale -= f * sched.lr_mask * grads.r_raw[idx]
        if not lm.gating.fixed:
            lm.gating.gamma -= f * sched.lr_gamma * grads.gamma[idx]


def _step_shared(model: SharedModel, grads, lr: float, clip_norm: float = 0.0) -> None:
    f = _clip_factor(grads.W + grads.b, clip_norm)
    for i in range(len(model.weights)):
        model.weights[i] -= f * lr * grads.W[i]
        model.biases[i] -= f * lr * grads.b[i]


def _free_energy_step(model, specs, mask, ds, sched, rng, data_size):
    X, y = _batch(ds, sched.batch_size, rng.child("batch"))
    sample = sample_mask(mask, sched.samples, rng.child("noise"))
    loss, parts, grads = loss_and_grads(model, specs, mask, sample, X, y, sched.l2_weight, data_size)
    if not np.isfinite(loss):
        raise NumericalError(f"free energy became {loss}")
    return loss, parts, grads


def adapt_mask(model, specs, mask: ClientMask, ds: Dataset, sched: TrainingSchedule, rng: RngStream, steps=None):
    """Take mask-only gradient steps with the shared model frozen; mutates ``mask``."""
    steps = sched.local_steps if steps is None else steps
    parts = None
    for s in range(steps):
        _, parts, grads = _free_energy_step(model, specs, mask, ds, sched, rng.child("mask", s), len(ds))
        _step_mask(mask, grads, sched)
    return parts


def client_local_round(
    client: ClientState,
    global_model: SharedModel,
    specs,
    sched: TrainingSchedule,
    mode: str,
    rng: RngStream,
) -> tuple[SharedModel, ClientState, float]:
    """One client's work in a round.

    Returns the locally updated shared model, the client's new state (its mask
    stays on the client) and the client's last training cross-entropy.
    """
    model = global_model.copy()
    ds = client.train
    if mode == "fedavg":
        ce = float("nan")
        for s in range(sched.local_steps):
            X, y = _batch(ds, sched.batch_size, rng.child("fedavg", s))
            ce, gW, gb = plain_loss_and_grads(model, specs, X, y)
            for i in range(len(model.weights)):
                model.weights[i] -= sched.lr_fedavg * gW[i]
                model.biases[i] -= sched.lr_fedavg * gb[i]
        if not np.isfinite(ce):
            raise NumericalError(f"cross-entropy became {ce}")
        return model, client, ce

    mask = client.mask.copy()
    mask.reinitialize(sched.posterior_init_std)
    n = len(ds)
    parts = None
    if mode == "lr_bpfl_joint":
        for s in range(sched.local_steps):
            _, parts, grads = _free_energy_step(model, specs, mask, ds, sched, rng.child("joint", s), n)
            _step_mask(mask, grads, sched)
            _step_shared(model, grads, sched.lr_shared, sched.clip_norm)
    else:
        parts = adapt_mask(model, specs, mask, ds, sched, rng)
        for s in range(sched.shared_steps):
            _, parts, grads = _free_energy_step(model, specs, mask, ds, sched, rng.child("shared", s), n)
            _step_shared(model, grads, sched.lr_shared, sched.clip_norm)
    if mode != "lr_bpfl_no_ars":
        for lm in mask.layers:
            if lm is not None:
                lm.gating = threshold_prune(lm.gating, sched.threshold)
    if not model.is_finite():
        raise NumericalError("shared model has non-finite entries")
    ce = parts["nll"] / n if parts is not None else float("nan")
    new_state = ClientState(client.id, client.train, client.test, mask, client.weight)
    return model, new_state, ce


def plain_loss_and_grads(model: SharedModel, specs, X, y):
    """Mean cross-entropy of the unmasked network and its W / bias gradients."""
    h = np.asarray(X, dtype=np.float64)
    inputs, pres = [], []
    for i, s in enumerate(specs):
        inputs.append(h)
        z = h @ model.weights[i].T + model.biases[i]
        pres.append(z)
        h = np.maximum(z, 0.0) if s.activation == "relu" else z
    loss, d = softmax_cross_entropy(h, y)
    gW, gb = [None] * len(specs), [None] * len(specs)
    for i in reversed(range(len(specs))):
        if specs[i].activation == "relu":
            d = d * (pres[i] > 0)
        gW[i] = d.T @ inputs[i]
        gb[i] = d.sum(axis=0)
        d = d @ model.weights[i]
    return loss, gW, gb


def layer_ranks(client: ClientState, threshold: float) -> list[int]:
    return [effective_rank(lm.gating, threshold) for lm in client.mask.layers if lm is not None]


def client_probabilities(
    model: SharedModel,
    specs,
    client: ClientState,
    sched: TrainingSchedule,
    mode: str,
    rng: RngStream,
    data: Dataset | None = None,
) -> np.ndarray:
    """Predictive probabilities on ``data`` (default: the client's test split).

    Mask modes first adapt a fresh copy of the client's posterior to the given
    shared model on the client's training split, then average ``C`` mask draws;
    the client's stored state is left untouched.
    """
    data = client.test if data is None else data
    if not uses_mask(mode):
        return predict_proba(model, specs, data.features)
    mask = client.mask.copy()
    mask.reinitialize(sched.posterior_init_std)
    adapt_mask(model, specs, mask, client.train, sched, rng.child("adapt"))
    sample = sample_mask(mask, sched.samples, rng.child("predict"))
    return predict_sample(model, specs, sample, data.features)


def evaluate(
    model: SharedModel, specs, clients, sched: TrainingSchedule, mode: str, rng: RngStream, n_bins=metrics.DEFAULT_BINS
) -> metrics.CalibrationReport:
    per_client = []
    for c in clients:
        p = client_probabilities(model, specs, c, sched, mode, rng.child("client", c.id))
        per_client.append(metrics.client_calibration(c.id, p, c.test.labels, n_bins))
    return metrics.fleet_report(per_client)


def run_training(
    server: ServerState,
    clients: list[ClientState],
    specs,
    sched: TrainingSchedule,
    mode: str,
    rng: RngStream,
    eval_every: int = 0,
    on_round=None,
) -> RunResult:
    """Run ``sched.rounds`` synchronous rounds.

    Each round logs ``{round, mode, mean_train_loss, sampled_client_ids,
    ranks}`` and, every ``eval_every`` rounds (and after the last), the fleet
    accuracy / A-ECE / W-ECE under ``eval``. ``on_round`` receives each record
    as it is produced.
    """
    check_mode(mode)
    sched.validate()
    clients = list(clients)
    K = len(clients)
    server = ServerState(server.round, server.model.copy())
    records = []
    first, end = server.round, server.round + sched.rounds
    for t in range(first, end):
        round_rng = rng.child("round", t)
        chosen = sample_clients(K, sched.fraction, round_rng.child("sample"))
        payloads, losses = [], []
        for k in chosen:
            try:
                local, clients[k], ce = client_local_round(
                    clients[k], server.model, specs, sched, mode, round_rng.child("client", k)
                )
            except NumericalError as exc:
                raise NumericalError(f"round {t}, client {k}: {exc}", t, k) from exc
            payloads.append(encode_update(local, len(clients[k].train)))
            losses.append(ce)
        updates = [decode_update(p)[0] for p in payloads]
        server = ServerState(t + 1, aggregate(updates, [clients[k].weight for k in chosen]))
        if not server.model.is_finite():
            raise NumericalError(f"round {t}: aggregated model is not finite", t)
        rec = {
            "round": t,
            "mode": mode,
            "mean_train_loss": float(np.mean(losses)),
            "sampled_client_ids": chosen,
            "ranks": {str(c.id): layer_ranks(c, sched.threshold) for c in clients} if uses_mask(mode) else {},
        }
        if eval_every and ((t + 1 - first) % eval_every == 0 or t == end - 1):
            rep = evaluate(server.model, specs, clients, sched, mode, rng.child("eval", t))
            rec["eval"] = rep.summary()
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    return RunResult(server, clients, records)


def adapt_new_client(
    model: SharedModel,
    specs,
    train: Dataset,
    test: Dataset,
    sched: TrainingSchedule,
    rng: RngStream,
    client_id: int = -1,
    mode: str = "lr_bpfl",
    steps: int | None = None,
) -> ClientState:
    """Fit a fresh mask for a client that never took part in training (W frozen)."""
    if len(train) == 0:
        raise ValueError("new client has no training data")
    mask = fresh_mask(specs, sched, mode)
    adapt_mask(model, specs, mask, train, sched, rng, steps)
    if mode != "lr_bpfl_no_ars":
        for lm in mask.layers:
            if lm is not None:
                lm.gating = threshold_prune(lm.gating, sched.threshold)
    return ClientState(client_id, train, test, mask, 0.0)


def new_client_probabilities(model, specs, client: ClientState, sched, mode, rng, data=None):
    """Predict with an already adapted new client's mask (no further adaptation)."""
    data = client.test if data is None else data
    if not uses_mask(mode):
        return predict_proba(model, specs, data.features)
    sample = sample_mask(client.mask, sched.samples, rng.child("predict"))
    return predict_sample(model, specs, sample, data.features)
