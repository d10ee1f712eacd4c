"""Feed-forward network with per-client low-rank Bayesian weight masks.

Each masked layer computes ``G = W * (Q diag(lam) R^T)`` where ``W`` is the
shared deterministic weight matrix (``out_dim x in_dim``), ``Q`` is
``out_dim x r_max``, ``R`` is ``in_dim x r_max`` and ``lam`` are the rank
gates. ``C`` mask draws are evaluated together by stacking the per-replica
composed weights and running the minibatch through all of them in one batched
matmul. Gradients are written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, RngStream, ShapeError, log_softmax, sigmoid, softmax
from .variational import (
    GAMMA_INIT,
    POSTERIOR_INIT_STD,
    PRIOR_VAR,
    DiagGaussian,
    GatingState,
    gate_derivative,
    gate_values,
    init_posterior,
    kl_diag_gaussians,
    kl_grads,
    prior_for_rank,
)

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    masked: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_specs(dims, masked=None) -> list[LayerSpec]:
    """ReLU MLP through ``dims`` ending in an identity (logit) layer.

    ``masked`` is either None (mask every layer) or an iterable of booleans,
    one per layer.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    n_layers = len(dims) - 1
    masked = [True] * n_layers if masked is None else [bool(m) for m in masked]
    if len(masked) != n_layers:
        raise ValueError(f"{n_layers} layers but {len(masked)} mask flags")
    return [
        LayerSpec(dims[i], dims[i + 1], "identity" if i == n_layers - 1 else "relu", masked[i])
        for i in range(n_layers)
    ]


def check_specs(specs) -> None:
    if not specs:
        raise ValueError("model has no layers")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeError(f"layer chain broken: {a.out_dim} feeds into {b.in_dim}")
    if specs[-1].activation != "identity":
        raise ValueError("final layer must use the identity activation")


@dataclass
class SharedModel:
    """Deterministic weights shared across the federation."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, specs, rng: RngStream) -> "SharedModel":
        check_specs(specs)
        gen = rng.generator()
        weights = [gen.normal(0.0, np.sqrt(2.0 / s.in_dim), (s.out_dim, s.in_dim)) for s in specs]
        biases = [np.zeros(s.out_dim) for s in specs]
        return cls(weights, biases)

    def copy(self) -> "SharedModel":
        return SharedModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.weights + self.biases)


@dataclass
class LayerMask:
    q: DiagGaussian  # out_dim x r_max
    r: DiagGaussian  # in_dim x r_max
    gating: GatingState


@dataclass
class ClientMask:
    """Variational mask state of one client; ``None`` for unmasked layers."""

    layers: list
    prior_var: float = PRIOR_VAR

    @classmethod
    def fresh(
        cls,
        specs,
        r_max: int,
        prior_var: float = PRIOR_VAR,
        ars: bool = True,
        gamma_init: float = GAMMA_INIT,
        init_std: float = POSTERIOR_INIT_STD,
    ) -> "ClientMask":
        layers = []
        for s in specs:
            if not s.masked:
                layers.append(None)
                continue
            g = GatingState.fresh(r_max, gamma_init, fixed=not ars)
            q = init_posterior(prior_for_rank(r_max, prior_var, (s.out_dim, r_max)), init_std)
            r = init_posterior(prior_for_rank(r_max, prior_var, (s.in_dim, r_max)), init_std)
            layers.append(LayerMask(q, r, g))
        return cls(layers, prior_var)

    def copy(self) -> "ClientMask":
        return ClientMask(
            [
                None if lm is None else LayerMask(lm.q.copy(), lm.r.copy(), lm.gating.copy())
                for lm in self.layers
            ],
            self.prior_var,
        )

    def priors(self, idx: int) -> tuple[DiagGaussian, DiagGaussian]:
        """Priors over the *active* columns of layer ``idx``."""
        lm = self.layers[idx]
        active = lm.gating.active
        rank = int(active.sum())
        n, m = lm.q.shape[0], lm.r.shape[0]
        return (
            prior_for_rank(rank, self.prior_var, (n, rank)),
            prior_for_rank(rank, self.prior_var, (m, rank)),
        )

    def reinitialize(self, init_std: float = POSTERIOR_INIT_STD) -> None:
        """Reset Q and R posteriors to their current-rank priors; gates persist."""
        for idx, lm in enumerate(self.layers):
            if lm is None:
                continue
            active = lm.gating.active
            pq, pr = self.priors(idx)
            q0, r0 = init_posterior(pq, init_std), init_posterior(pr, init_std)
            lm.q.mean[:, active] = q0.mean
            lm.q.raw_scale[:, active] = q0.raw_scale
            lm.r.mean[:, active] = r0.mean
            lm.r.raw_scale[:, active] = r0.raw_scale

    def ranks(self) -> list[int]:
        return [int(lm.gating.active.sum()) for lm in self.layers if lm is not None]


@dataclass
class MaskSample:
    """``C`` stacked draws of every masked layer's factors.

    Per layer: ``q`` is ``(C, out_dim, r_max)``, ``r`` is ``(C, in_dim, r_max)``,
    ``eps_q``/``eps_r`` the standard-normal noise used, ``lam`` the gates.
    Pruned columns are zero in both ``q`` and ``r``.
    """

    q: list
    r: list
    eps_q: list
    eps_r: list
    lam: list

    @property
    def replicas(self) -> int:
        for q in self.q:
            if q is not None:
                return q.shape[0]
        return 1

    def replica(self, c: int) -> "MaskSample":
        pick = lambda xs: [None if x is None else x[c : c + 1] for x in xs]  # noqa: E731
        return MaskSample(pick(self.q), pick(self.r), pick(self.eps_q), pick(self.eps_r), list(self.lam))


def sample_mask(mask: ClientMask, C: int, rng: RngStream) -> MaskSample:
    if C < 1:
        raise ValueError("number of mask samples C must be >= 1")
    out = MaskSample([], [], [], [], [])
    for idx, lm in enumerate(mask.layers):
        if lm is None:
            for lst in (out.q, out.r, out.eps_q, out.eps_r, out.lam):
                lst.append(None)
            continue
        gen = rng.child("layer", idx).generator()
        eps_q = gen.standard_normal((C,) + lm.q.shape)
        eps_r = gen.standard_normal((C,) + lm.r.shape)
        q = lm.q.mean + lm.q.std * eps_q
        r = lm.r.mean + lm.r.std * eps_r
        pruned = lm.gating.pruned
        q[..., pruned] = 0.0
        r[..., pruned] = 0.0
        out.q.append(q)
        out.r.append(r)
        out.eps_q.append(eps_q)
        out.eps_r.append(eps_r)
        out.lam.append(gate_values(lm.gating))
    return out


def mean_sample(mask: ClientMask) -> MaskSample:
    """Single replica at the posterior means (zero-variance limit)."""
    out = MaskSample([], [], [], [], [])
    for lm in mask.layers:
        if lm is None:
            for lst in (out.q, out.r, out.eps_q, out.eps_r, out.lam):
                lst.append(None)
            continue
        q, r = lm.q.mean[None].copy(), lm.r.mean[None].copy()
        q[..., lm.gating.pruned] = 0.0
        r[..., lm.gating.pruned] = 0.0
        out.q.append(q)
        out.r.append(r)
        out.eps_q.append(np.zeros_like(q))
        out.eps_r.append(np.zeros_like(r))
        out.lam.append(gate_values(lm.gating))
    return out


def compose_weight(W, q, r, lam) -> np.ndarray:
    """``W * (q diag(lam) r^T)``; ``q``/``r`` may carry a leading replica axis."""
    W = np.asarray(W, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    r = np.asarray(r, dtype=DTYPE)
    lam = np.asarray(lam, dtype=DTYPE).reshape(-1)
    if q.shape[-2] != W.shape[0] or r.shape[-2] != W.shape[1]:
        raise ShapeError(f"mask factors {q.shape[-2:]} / {r.shape[-2:]} do not fit weight {W.shape}")
    if q.shape[-1] != lam.size or r.shape[-1] != lam.size:
        raise ShapeError(f"factor rank {q.shape[-1]} vs {lam.size} gates")
    M = np.matmul(q * lam, np.swapaxes(r, -1, -2))
    return W * M


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def _forward(model: SharedModel, specs, sample: MaskSample | None, X: np.ndarray):
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] != specs[0].in_dim:
        raise ShapeError(f"input batch of shape {X.shape} does not match in_dim {specs[0].in_dim}")
    cache = _Cache()
    h = X[None]
    for idx, s in enumerate(specs):
        W, b = model.weights[idx], model.biases[idx]
        if s.masked and sample is not None and sample.q[idx] is not None:
            q, r, lam = sample.q[idx], sample.r[idx], sample.lam[idx]
            M = np.matmul(q * lam, np.swapaxes(r, -1, -2))
            G = W * M
        else:
            M, G = None, W[None]
        z = np.matmul(h, np.swapaxes(G, -1, -2)) + b
        cache.inputs.append(h)
        cache.pre.append(z)
        cache.weights.append(G)
        cache.masks.append(M)
        h = np.maximum(z, 0.0) if s.activation == "relu" else z
    return h, cache


def forward(model: SharedModel, specs, sample: MaskSample | None, X) -> np.ndarray:
    """Logits of shape ``(C, batch, classes)``; ``C = 1`` when ``sample`` is None."""
    logits, _ = _forward(model, specs, sample, X)
    return logits


@dataclass
class Gradients:
    W: list
    b: list
    q_mean: list
    q_raw: list
    r_mean: list
    r_raw: list
    gamma: list

    def flat_items(self):
        for name in ("W", "b", "q_mean", "q_raw", "r_mean", "r_raw", "gamma"):
            for idx, g in enumerate(getattr(self, name)):
                if g is not None:
                    yield (name, idx), g


def _nll(logits: np.ndarray, y: np.ndarray, scale: float):
    """``scale`` times the mean cross-entropy over replicas and batch, plus its logit gradient."""
    C, B, _ = logits.shape
    logp = log_softmax(logits)
    rows = np.arange(B)
    ce = -logp[:, rows, y]
    loss = scale * ce.mean()
    d = np.exp(logp)
    d[:, rows, y] -= 1.0
    d *= scale / (C * B)
    return float(loss), d


def _check_labels(y, n, classes):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{n} inputs but {y.shape[0]} labels")
    if y.size == 0:
        raise ValueError("empty data")
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    return y


def loss_and_grads(
    model: SharedModel,
    specs,
    mask: ClientMask,
    sample: MaskSample,
    X,
    y,
    l2_weight: float,
    data_size: int | None = None,
    need_grads: bool = True,
):
    """Monte Carlo free energy for a fixed ``sample`` and, optionally, its gradients.

    The likelihood term is ``data_size`` times the mean cross-entropy over the
    ``C`` replicas and the minibatch, i.e. an unbiased estimate of the summed
    negative log-likelihood of the local dataset. KL terms cover active columns
    only and the gate penalty is ``l2_weight * ||lam||^2``.
    """
    X = np.asarray(X, dtype=DTYPE)
    y = _check_labels(y, X.shape[0], specs[-1].out_dim)
    scale = float(X.shape[0] if data_size is None else data_size)
    logits, cache = _forward(model, specs, sample, X)
    nll, d = _nll(logits, y, scale)

    kl = 0.0
    l2 = 0.0
    for idx, lm in enumerate(mask.layers):
        if lm is None or not specs[idx].masked:
            continue
        active = lm.gating.active
        pq, pr = mask.priors(idx)
        kl += kl_diag_gaussians(lm.q.columns(active), pq)
        kl += kl_diag_gaussians(lm.r.columns(active), pr)
        lam = gate_values(lm.gating)
        l2 += l2_weight * float(lam @ lam)
    loss = nll + kl + l2
    parts = {"nll": nll, "kl": kl, "l2": l2}
    if not need_grads:
        return loss, parts, None

    L = len(specs)
    grads = Gradients(*([None] * L for _ in range(7)))
    for idx in reversed(range(L)):
        s = specs[idx]
        if s.activation == "relu":
            d = d * (cache.pre[idx] > 0)
        h = cache.inputs[idx]
        G = cache.weights[idx]
        dG = np.matmul(np.swapaxes(d, -1, -2), h)  # (C, n, m)
        grads.b[idx] = d.sum(axis=(0, 1))
        if idx > 0:
            d_next = np.matmul(d, G)
        M = cache.masks[idx]
        if M is None:
            grads.W[idx] = dG.sum(axis=0)
        else:
            W = model.weights[idx]
            lm = mask.layers[idx]
            q, r, lam = sample.q[idx], sample.r[idx], sample.lam[idx]
            grads.W[idx] = (dG * M).sum(axis=0)
            dM = dG * W
            dMr = np.matmul(dM, r)  # (C, n, r)
            dq = dMr * lam
            dr = np.matmul(np.swapaxes(dM, -1, -2), q) * lam
            dlam = (dMr * q).sum(axis=(0, 1))
            pruned = lm.gating.pruned
            dq[..., pruned] = 0.0
            dr[..., pruned] = 0.0
            sig_q = sigmoid(lm.q.raw_scale)
            sig_r = sigmoid(lm.r.raw_scale)
            gq_mean = dq.sum(axis=0)
            gq_raw = (dq * sample.eps_q[idx]).sum(axis=0) * sig_q
            gr_mean = dr.sum(axis=0)
            gr_raw = (dr * sample.eps_r[idx]).sum(axis=0) * sig_r
            active = lm.gating.active
            pq, pr = mask.priors(idx)
            km, kr = kl_grads(lm.q.columns(active), pq)
            gq_mean[:, active] += km
            gq_raw[:, active] += kr
            km, kr = kl_grads(lm.r.columns(active), pr)
            gr_mean[:, active] += km
            gr_raw[:, active] += kr
            lam_now = gate_values(lm.gating)
            grads.gamma[idx] = (dlam + 2.0 * l2_weight * lam_now) * gate_derivative(lm.gating)
            grads.q_mean[idx], grads.q_raw[idx] = gq_mean, gq_raw
            grads.r_mean[idx], grads.r_raw[idx] = gr_mean, gr_raw
        if idx > 0:
            d = d_next
    return loss, parts, grads


def free_energy(model, specs, mask: ClientMask, X, y, C: int, l2_weight: float, rng: RngStream, data_size=None):
    """Regularized free energy with ``C`` fresh mask draws from ``rng``."""
    sample = sample_mask(mask, C, rng)
    loss, parts, _ = loss_and_grads(model, specs, mask, sample, X, y, l2_weight, data_size, need_grads=False)
    return loss, parts


def backward(model, specs, mask: ClientMask, X, y, C: int, l2_weight: float, rng: RngStream, data_size=None):
    """Free energy, its parts and exact gradients for the draws taken from ``rng``."""
    sample = sample_mask(mask, C, rng)
    return loss_and_grads(model, specs, mask, sample, X, y, l2_weight, data_size)


def predict_proba(model: SharedModel, specs, X) -> np.ndarray:
    """Softmax of the plain shared network (no mask)."""
    return softmax(forward(model, specs, None, X)[0])


def predict_sample(model: SharedModel, specs, sample: MaskSample, X) -> np.ndarray:
    """Average of per-replica softmax outputs for a fixed stacked sample."""
    return softmax(forward(model, specs, sample, X)).mean(axis=0)


def predict_ensemble(model: SharedModel, specs, mask: ClientMask, X, C: int, rng: RngStream) -> np.ndarray:
    return predict_sample(model, specs, sample_mask(mask, C, rng), X)


def predict_ensemble_loop(model: SharedModel, specs, sample: MaskSample, X) -> np.ndarray:
    """Replica-by-replica evaluation of the same draws; reference for the stacked pass."""
    total = None
    for c in range(sample.replicas):
        p = softmax(forward(model, specs, sample.replica(c), X))[0]
        total = p if total is None else total + p
    return total / sample.replicas


def mask_param_count(specs, r_max: int) -> int:
    return sum(2 * (s.in_dim + s.out_dim) * r_max + r_max for s in specs if s.masked and r_max > 0)
