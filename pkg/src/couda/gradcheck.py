"""Finite-difference checks of every loss term and the composed objective on small random instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .losses import Hyperparams, adversarial_loss_t, focal_loss_t, js_divergence_t, total_objective
from .model import Architecture, CoudaModel
from .training import forward_batch

TOLERANCE = 1e-4
STEP = 1e-5
N_INSTANCES = 100
COMPONENTS = ("L_c", "L_adv", "L_dis", "Z_path", "objective")

# small enough to run 100 instances per component well under a minute
TINY = Architecture(d_x=2, hidden=(4,), d_f=3, disc_hidden=3, n_classes=3)


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _lc_instance(rng):
    n, k = rng.integers(2, 6), rng.integers(2, 5)
    logits = _leaf(rng, n, k)
    z = rng.integers(0, k, size=n)
    gamma = rng.uniform(0, 3)
    return lambda _: focal_loss_t(dc.softmax_rowwise(logits), z, gamma), [logits]


def _adv_instance(rng):
    ns, nt, peers = rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 3)
    ls = [_leaf(rng, ns, 1) for _ in range(peers)]
    lt = [_leaf(rng, nt, 1) for _ in range(peers)]
    lam_s, lam_t = rng.uniform(0.05, 1, ns), rng.uniform(0.05, 1, nt)

    def f(_):
        return adversarial_loss_t([dc.sigmoid(a) for a in ls], [dc.sigmoid(b) for b in lt], lam_s, lam_t)
    return f, ls + lt


def _dis_instance(rng):
    n, k = rng.integers(2, 6), rng.integers(2, 5)
    a, b = _leaf(rng, n, k), _leaf(rng, n, k)
    return lambda _: dc.mean(js_divergence_t(dc.softmax_rowwise(a), dc.softmax_rowwise(b))), [a, b]


def _z_instance(rng):
    model = CoudaModel(TINY, seed=int(rng.integers(2**31)))
    model.params["Z.w"].data = rng.normal(scale=0.5, size=model.params["Z.w"].shape)
    model.params["Z.b"].data = model.params["Z.b"].data + rng.normal(scale=0.5, size=model.params["Z.b"].shape)
    n = int(rng.integers(2, 6))
    f = _leaf(rng, n, TINY.d_f)
    logits = _leaf(rng, n, TINY.n_classes)
    z = rng.integers(0, TINY.n_classes, size=n)

    def fn(_):
        return focal_loss_t(model.adapt_batch(dc.softmax_rowwise(logits), f), z, 2.0)
    return fn, [f, logits, model.params["Z.w"], model.params["Z.b"]]


def relu_margin(model: CoudaModel, x: np.ndarray) -> float:
    """Smallest |pre-activation| over every ReLU the batch passes through."""
    p = {k: v.data for k, v in model.params.items()}
    margin = np.inf
    for tau in model.peers:
        h = x
        i = 0
        while f"P{tau}.W{i}" in p:
            pre = h @ p[f"P{tau}.W{i}"] + p[f"P{tau}.b{i}"]
            margin = min(margin, np.abs(pre).min())
            h = np.maximum(pre, 0.0)
            i += 1
        margin = min(margin, np.abs(h @ p["D.W0"] + p["D.b0"]).min())
    return float(margin)


KINK_MARGIN = 1e-4


def _objective_instance(rng):
    # central differences are undefined across a ReLU kink: redraw until every unit is clear of it
    while True:
        model = CoudaModel(TINY, seed=int(rng.integers(2**31)))
        model.params["Z.w"].data = rng.normal(scale=0.5, size=model.params["Z.w"].shape)
        xs, xt = rng.normal(size=(4, TINY.d_x)), rng.normal(size=(4, TINY.d_x))
        if relu_margin(model, np.concatenate([xs, xt])) > KINK_MARGIN:
            break
    z = rng.integers(0, TINY.n_classes, size=4)
    hp = Hyperparams(alpha=float(rng.uniform(0.1, 1)), eta=float(rng.uniform(0.05, 1)), gamma=float(rng.uniform(0, 3)))
    # lambda is a stop-gradient input; drawing it keeps the adversarial gradients above the check's resolution
    lam_s, lam_t = rng.uniform(0.05, 1, 4), rng.uniform(0.05, 1, 4)

    def fn(_):
        fw = forward_batch(model, xs, xt)
        return total_objective(fw, z, hp, lam_source=lam_s, lam_target=lam_t).total
    return fn, [model.params[k] for k in sorted(model.params)]


BUILDERS: dict[str, Callable] = {
    "L_c": _lc_instance,
    "L_adv": _adv_instance,
    "L_dis": _dis_instance,
    "Z_path": _z_instance,
    "objective": _objective_instance,
}


def check_component(name: str, seed: int = 0, n: int = N_INSTANCES, h: float = STEP) -> CheckResult:
    rng = np.random.default_rng([seed, COMPONENTS.index(name)])
    worst = 0.0
    for _ in range(n):
        fn, leaves = BUILDERS[name](rng)
        worst = max(worst, dc.grad_check(fn, leaves, h=h))
    return CheckResult(name, worst, n)


def run_suite(seed: int = 0, n: int = N_INSTANCES) -> list[CheckResult]:
    return [check_component(c, seed, n) for c in COMPONENTS]
