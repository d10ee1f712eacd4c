"""Independent oracles for the hand-written math.

* ``grad``: analytic gradients vs central finite differences with the
  reparameterization noise held fixed.
* ``kl``: closed-form Gaussian KL vs a Monte Carlo estimate.
* ``ensemble``: stacked ensemble prediction vs a replica-by-replica loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import (
    ClientMask,
    SharedModel,
    loss_and_grads,
    mlp_specs,
    predict_ensemble_loop,
    predict_sample,
    sample_mask,
)
from .numerics import RngStream
from .variational import DiagGaussian, kl_diag_gaussians

GRAD_TOL = 1e-5
FD_STEP = 1e-5
# Gradients smaller than this are compared in absolute terms.
GRAD_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def random_problem(seed: int, max_dim: int = 8, r_max: int = 2, n: int = 6):
    """A small randomized masked network with perturbed, partly pruned posteriors."""
    g = np.random.default_rng(seed)
    dims = [int(d) for d in g.integers(2, max_dim + 1, size=int(g.integers(2, 4)))]
    dims[-1] = max(dims[-1], 2)
    specs = mlp_specs(dims)
    model = SharedModel.init(specs, RngStream(seed, ("weights",)))
    for b in model.biases:
        b += g.normal(0, 0.3, b.shape)
    mask = ClientMask.fresh(specs, r_max)
    for lm in mask.layers:
        lm.q.mean += g.normal(0, 0.3, lm.q.shape)
        lm.r.mean += g.normal(0, 0.3, lm.r.shape)
        lm.q.raw_scale += g.normal(0, 1.0, lm.q.shape)
        lm.r.raw_scale += g.normal(0, 1.0, lm.r.shape)
        lm.gating.gamma[:] = g.normal(1.0, 1.5, r_max)
        if r_max > 1 and g.random() < 0.3:
            lm.gating.pruned[-1] = True
    X = g.normal(size=(n, dims[0]))
    y = g.integers(0, dims[-1], n)
    return specs, model, mask, X, y


def _param_views(model: SharedModel, mask: ClientMask):
    for i in range(len(model.weights)):
        yield ("W", i), model.weights[i]
        yield ("b", i), model.biases[i]
    for i, lm in enumerate(mask.layers):
        if lm is None:
            continue
        yield ("q_mean", i), lm.q.mean
        yield ("q_raw", i), lm.q.raw_scale
        yield ("r_mean", i), lm.r.mean
        yield ("r_raw", i), lm.r.raw_scale
        yield ("gamma", i), lm.gating.gamma


def gradient_check(seed: int, C: int = 2, r_max: int = 2, l2_weight: float = 0.1, data_size: int = 20):
    """Largest relative error over every trainable scalar of one random problem."""
    specs, model, mask, X, y = random_problem(seed, r_max=r_max)
    noise = RngStream(seed, ("noise",))

    def loss():
        s = sample_mask(mask, C, noise)
        return loss_and_grads(model, specs, mask, s, X, y, l2_weight, data_size, need_grads=False)[0]

    sample = sample_mask(mask, C, noise)
    _, _, grads = loss_and_grads(model, specs, mask, sample, X, y, l2_weight, data_size)
    analytic = dict(grads.flat_items())
    worst, where = 0.0, None
    for key, arr in _param_views(model, mask):
        a = analytic[key]
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + FD_STEP
            up = loss()
            arr[i] = old - FD_STEP
            dn = loss()
            arr[i] = old
            num = (up - dn) / (2 * FD_STEP)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), GRAD_FLOOR)
            if err > worst:
                worst, where = err, (key, i, a[i], num)
    return worst, where


def check_gradients(n_nets: int = 20, seed: int = 0) -> CheckResult:
    worst, where = 0.0, None
    for k in range(n_nets):
        err, loc = gradient_check(seed * 1000 + k)
        if err > worst:
            worst, where = err, loc
    detail = f"max relative error {worst:.3e} over {n_nets} nets (tol {GRAD_TOL:g})"
    if where is not None and worst > GRAD_TOL:
        (name, layer), idx, a, num = where
        detail += f"; worst at {name}[layer {layer}]{list(idx)}: analytic {a:.6e} vs numeric {num:.6e}"
    return CheckResult("grad", worst <= GRAD_TOL, worst, detail)


def kl_monte_carlo(q: DiagGaussian, p: DiagGaussian, n: int, rng: RngStream) -> tuple[float, float]:
    """Estimate of ``E_q[log q(x) - log p(x)]`` and its standard error."""
    gen = rng.generator()
    mq, sq, mp, sp = q.mean.ravel(), q.std.ravel(), p.mean.ravel(), p.std.ravel()
    total = np.zeros(n)
    for j in range(mq.size):
        x = mq[j] + sq[j] * gen.standard_normal(n)
        total += (
            -0.5 * ((x - mq[j]) / sq[j]) ** 2
            - math.log(sq[j])
            + 0.5 * ((x - mp[j]) / sp[j]) ** 2
            + math.log(sp[j])
        )
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n))


def check_kl(n_pairs: int = 50, n_samples: int = 10**6, seed: int = 0) -> CheckResult:
    g = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for k in range(n_pairs):
        d = int(g.integers(1, 4))
        q = DiagGaussian(g.normal(0, 1, d), g.normal(0, 0.7, d))
        p = DiagGaussian(g.normal(0, 1, d), g.normal(0, 0.7, d))
        est, se = kl_monte_carlo(q, p, n_samples, RngStream(seed, ("kl", k)))
        z = abs(kl_diag_gaussians(q, p) - est) / se
        worst = max(worst, z)
        if z > 3.0:
            failures.append(k)
    unit = kl_diag_gaussians(DiagGaussian([1.0], [math.log(math.e - 1)]), DiagGaussian([0.0], [math.log(math.e - 1)]))
    unit_ok = abs(unit - 0.5) <= 1e-12
    detail = f"max |closed - MC| = {worst:.2f} standard errors over {n_pairs} pairs; KL(N(1,1)||N(0,1)) = {unit!r}"
    if failures:
        detail += f"; pairs beyond 3 SE: {failures}"
    return CheckResult("kl", not failures and unit_ok, worst, detail)


def check_ensemble(n_trials: int = 10, C: int = 4, seed: int = 0) -> CheckResult:
    worst = 0.0
    for k in range(n_trials):
        specs, model, mask, X, _ = random_problem(seed * 1000 + k, r_max=3, n=7)
        sample = sample_mask(mask, C, RngStream(seed, ("ensemble", k)))
        tiled = predict_sample(model, specs, sample, X)
        looped = predict_ensemble_loop(model, specs, sample, X)
        worst = max(worst, float(np.abs(tiled - looped).max()))
    return CheckResult("ensemble", worst == 0.0, worst, f"max |stacked - looped| = {worst!r} over {n_trials} nets")


CHECKS = {"grad": check_gradients, "kl": check_kl, "ensemble": check_ensemble}
