"""Factorized Gaussians for the mask factors and the rank gates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, RngStream, sigmoid, softplus, softplus_inv

GAMMA_INIT = 3.5
PRIOR_VAR = 0.1
POSTERIOR_INIT_STD = 0.05


@dataclass
class DiagGaussian:
    """Independent Gaussians with ``std = softplus(raw_scale)``.

    ``mean`` and ``raw_scale`` may have any (matching) shape; the mask factors
    use ``(dim, r_max)`` matrices so that columns line up with rank indices.
    """

    mean: np.ndarray
    raw_scale: np.ndarray

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=DTYPE)
        self.raw_scale = np.array(self.raw_scale, dtype=DTYPE)
        if self.mean.shape != self.raw_scale.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != raw_scale shape {self.raw_scale.shape}"
            )

    @property
    def std(self) -> np.ndarray:
        return softplus(self.raw_scale)

    @property
    def shape(self) -> tuple:
        return self.mean.shape

    def columns(self, keep: np.ndarray) -> "DiagGaussian":
        return DiagGaussian(self.mean[..., keep], self.raw_scale[..., keep])

    def copy(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.copy(), self.raw_scale.copy())


@dataclass
class GatingState:
    """Gate logits plus persistent pruning flags for one masked layer.

    ``fixed`` turns the gates into constants equal to one (used when adaptive
    rank selection is disabled).
    """

    gamma: np.ndarray
    pruned: np.ndarray
    fixed: bool = False

    def __post_init__(self):
        self.gamma = np.array(self.gamma, dtype=DTYPE).reshape(-1)
        self.pruned = np.array(self.pruned, dtype=bool).reshape(-1)
        if self.gamma.shape != self.pruned.shape:
            raise ValueError("gamma and pruned must have the same length")
        if self.gamma.size < 1:
            raise ValueError("r_max must be at least 1")
        if self.pruned[0]:
            raise ValueError("the first rank component can never be pruned")

    @classmethod
    def fresh(cls, r_max: int, gamma_init: float = GAMMA_INIT, fixed: bool = False):
        return cls(np.full(r_max, gamma_init), np.zeros(r_max, dtype=bool), fixed)

    @property
    def r_max(self) -> int:
        return int(self.gamma.size)

    @property
    def active(self) -> np.ndarray:
        return ~self.pruned

    def copy(self) -> "GatingState":
        return GatingState(self.gamma.copy(), self.pruned.copy(), self.fixed)


def gate_values(g: GatingState) -> np.ndarray:
    lam = np.ones_like(g.gamma) if g.fixed else sigmoid(g.gamma)
    lam[g.pruned] = 0.0
    return lam


def gate_derivative(g: GatingState) -> np.ndarray:
    """d(lambda)/d(gamma); zero for pruned or fixed gates."""
    if g.fixed:
        return np.zeros_like(g.gamma)
    s = sigmoid(g.gamma)
    d = s * (1.0 - s)
    d[g.pruned] = 0.0
    return d


def effective_rank(g: GatingState, threshold: float) -> int:
    lam = gate_values(g)
    keep = lam >= threshold
    keep[0] = True
    return int(keep.sum())


def threshold_prune(g: GatingState, threshold: float) -> GatingState:
    """Return a copy with every gate below ``threshold`` pruned for good.

    Index 0 is exempt so that at least one rank component always survives.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"pruning threshold must lie in (0, 1), got {threshold}")
    out = g.copy()
    if g.fixed:
        return out
    below = sigmoid(g.gamma) < threshold
    below[0] = False
    out.pruned |= below
    return out


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> float:
    if q.shape != p.shape:
        raise ValueError(f"KL between mismatched shapes {q.shape} and {p.shape}")
    sq, sp = q.std, p.std
    terms = np.log(sp / sq) + (sq**2 + (q.mean - p.mean) ** 2) / (2.0 * sp**2) - 0.5
    return float(terms.sum())


def kl_grads(q: DiagGaussian, p: DiagGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`kl_diag_gaussians` w.r.t. ``q.mean`` and ``q.raw_scale``."""
    sq, sp = q.std, p.std
    d_mean = (q.mean - p.mean) / sp**2
    d_std = -1.0 / sq + sq / sp**2
    return d_mean, d_std * sigmoid(q.raw_scale)


def reparam_sample(q: DiagGaussian, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``mean + std * eps``; returns ``(value, eps)``."""
    eps = rng.generator().standard_normal(q.shape)
    return q.mean + q.std * eps, eps


def reparam_backward(
    q: DiagGaussian, eps: np.ndarray, d_value: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Map a gradient w.r.t. a sampled value back to ``(mean, raw_scale)``."""
    return d_value, d_value * eps * sigmoid(q.raw_scale)


def prior_for_rank(r: int, prior_var: float = PRIOR_VAR, shape=(1,)) -> DiagGaussian:
    """Prior whose mask product ``q r^T`` summed over ``r`` ranks has mean one."""
    if r < 1:
        raise ValueError("prior rank must be >= 1")
    if prior_var <= 0:
        raise ValueError("prior variance must be positive")
    raw = float(softplus_inv(np.sqrt(prior_var)))
    return DiagGaussian(np.full(shape, 1.0 / np.sqrt(r)), np.full(shape, raw))


def init_posterior(prior: DiagGaussian, std: float = POSTERIOR_INIT_STD) -> DiagGaussian:
    return DiagGaussian(prior.mean.copy(), np.full(prior.shape, float(softplus_inv(std))))
