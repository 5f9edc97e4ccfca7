"""Transferability weights, weighted adversarial loss, focal loss, JS diversity, and the joint objective.

The batched tensor versions (``*_t``) are what training differentiates; the
plain-array wrappers evaluate the same code on single examples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import LOG_EPS, Tensor


class LossError(ValueError):
    pass


@dataclass
class Hyperparams:
    alpha: float = 1.0
    eta: float = 0.003
    gamma: float = 2.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    beta_noise_init: float = 2.0
    class_weights: list[float] | None = None
    alpha_warmup: bool = True
    dis_scope: str = "all"

    def __post_init__(self):
        checks = [
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (int(self.batch_size) == self.batch_size and self.batch_size >= 1, "batch_size must be a positive int"),
            (int(self.epochs) == self.epochs and self.epochs >= 0, "epochs must be a nonnegative int"),
            (np.isfinite(self.beta_noise_init), "beta_noise_init must be finite"),
        ]
        for ok, msg in checks:
            if not ok:
                raise LossError(msg)
        if self.dis_scope not in ("all", "source", "target"):
            raise LossError("dis_scope must be 'all', 'source' or 'target'")
        if self.class_weights is not None and any(w < 0 for w in self.class_weights):
            raise LossError("class_weights must be nonnegative")


def _prob_vector(v, name: str, tol: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or np.any(v < 0) or abs(v.sum() - 1.0) > tol:
        raise LossError(f"{name} is not a probability vector")
    return v


# ---------------------------------------------------------------- transferability


def transfer_weights(y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
    """Per-row ``1 - cos(y1, y2)``; returned as a plain array (no gradient)."""
    y1 = y1.data if isinstance(y1, Tensor) else np.asarray(y1, dtype=np.float64)
    y2 = y2.data if isinstance(y2, Tensor) else np.asarray(y2, dtype=np.float64)
    try:
        cos = dc.cosine_similarity_rowwise(Tensor(y1), Tensor(y2)).data
    except dc.DiffError as e:
        raise LossError(str(e)) from e
    return np.clip(1.0 - cos, 0.0, 1.0)


def transfer_weight(y1, y2) -> float:
    y1 = _prob_vector(y1, "y1")
    y2 = _prob_vector(y2, "y2")
    return float(transfer_weights(y1[None, :], y2[None, :])[0])


# ---------------------------------------------------------------- adversarial


def adversarial_loss_t(d_source: Sequence[Tensor], d_target: Sequence[Tensor],
                       lam_source: np.ndarray, lam_target: np.ndarray) -> Tensor:
    """Sum over peers of the transferability-weighted least-squares domain loss.

    ``d_source[tau]`` / ``d_target[tau]`` are (n, 1) or (n,) discriminator
    outputs for peer tau; target samples are pushed towards 1, source towards 0.
    """
    if len(d_source) != len(d_target):
        raise LossError("need the same number of peers for both domains")
    lam_s = np.asarray(lam_source, dtype=np.float64).reshape(-1, 1)
    lam_t = np.asarray(lam_target, dtype=np.float64).reshape(-1, 1)
    total = None
    for ds, dt in zip(d_source, d_target):
        ds = dc.reshape(ds, (-1, 1))
        dt = dc.reshape(dt, (-1, 1))
        if ds.shape[0] != lam_s.shape[0] or dt.shape[0] != lam_t.shape[0]:
            raise LossError(
                f"length mismatch: d_source {ds.shape[0]} vs lambda {lam_s.shape[0]}, "
                f"d_target {dt.shape[0]} vs lambda {lam_t.shape[0]}")
        term = dc.add(dc.mean(dc.mul(dc.square(dc.sub(dt, 1.0)), lam_t)),
                      dc.mean(dc.mul(dc.square(ds), lam_s)))
        total = term if total is None else dc.add(total, term)
    return total


def adversarial_loss(d_hat_source, d_hat_target, lam_source, lam_target) -> float:
    """Array front-end: ``d_hat_*`` are (peers, n) nested sequences."""
    ds = [Tensor(np.asarray(d, dtype=np.float64)) for d in d_hat_source]
    dt = [Tensor(np.asarray(d, dtype=np.float64)) for d in d_hat_target]
    return adversarial_loss_t(ds, dt, lam_source, lam_target).item()


# ---------------------------------------------------------------- focal


def focal_loss_t(z_hat: Tensor, labels, gamma: float, class_weights=None) -> Tensor:
    """Mean focal loss of (n, K) noise-adapted predictions against observed labels."""
    labels = np.asarray(labels, dtype=np.int64)
    K = z_hat.shape[1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise LossError(f"label out of range [0, {K})")
    p_t = dc.pick(z_hat, labels)
    nll = dc.mul(dc.log(dc.clamp_min(p_t, LOG_EPS)), -1.0)
    per = nll if gamma == 0 else dc.mul(dc.power(dc.clamp_min(dc.sub(1.0, p_t), 0.0), gamma), nll)
    if class_weights is not None:
        per = dc.mul(per, np.asarray(class_weights, dtype=np.float64)[labels])
    return dc.mean(per)


def focal_loss(z_hat, z: int, gamma: float) -> float:
    z_hat = _prob_vector(z_hat, "z_hat")
    if not 0 <= int(z) < z_hat.size:
        raise LossError(f"label {z} out of range [0, {z_hat.size})")
    return focal_loss_t(Tensor(z_hat[None, :]), [int(z)], gamma).item()


# ---------------------------------------------------------------- Jensen-Shannon


def _xlogy_t(p: Tensor, q: Tensor) -> Tensor:
    # p * log(q) with 0 * log(0) = 0; q >= p/2 > 0 wherever p > 0
    return dc.mul(p, dc.log(dc.clamp_min(q, LOG_EPS)))


def js_divergence_t(y1: Tensor, y2: Tensor) -> Tensor:
    """Per-row JS divergence (natural log) of two (n, K) probability tensors; shape (n,)."""
    if y1.shape != y2.shape:
        raise LossError(f"shape mismatch {y1.shape} vs {y2.shape}")
    m = dc.mul(dc.add(y1, y2), 0.5)
    kl1 = dc.sub(_xlogy_t(y1, y1), _xlogy_t(y1, m))
    kl2 = dc.sub(_xlogy_t(y2, y2), _xlogy_t(y2, m))
    return dc.mul(dc.sum(dc.add(kl1, kl2), axis=1), 0.5)


def js_divergence(y1, y2) -> float:
    y1 = _prob_vector(y1, "y1")
    y2 = _prob_vector(y2, "y2")
    if y1.shape != y2.shape:
        raise LossError("length mismatch")
    return float(js_divergence_t(Tensor(y1[None, :]), Tensor(y2[None, :])).data[0])


# ---------------------------------------------------------------- joint objective


@dataclass
class BatchForward:
    """Per-peer outputs on a stacked batch: the first ``n_source`` rows are source."""

    n_source: int
    f: list[Tensor]
    y_hat: list[Tensor]
    d_hat: list[Tensor]
    z_hat: list[Tensor] = field(default_factory=list)  # source rows only, per peer


@dataclass
class ObjectiveTerms:
    total: Tensor
    l_c: Tensor
    l_adv: Tensor
    l_dis: Tensor
    lam_source: np.ndarray
    lam_target: np.ndarray


def batch_weights(fw: BatchForward) -> tuple[np.ndarray, np.ndarray]:
    """Frozen per-sample transferability weights for (source, target) rows."""
    if len(fw.y_hat) == 1:
        lam = np.ones(fw.y_hat[0].shape[0])
    else:
        lam = transfer_weights(fw.y_hat[0].data, fw.y_hat[1].data)
    return lam[:fw.n_source], lam[fw.n_source:]


def total_objective(fw: BatchForward, labels, hp: Hyperparams, *,
                    enable_adv: bool = True, enable_dis: bool = True,
                    lam_source=None, lam_target=None, alpha: float | None = None) -> ObjectiveTerms:
    """``L_c - alpha * L_adv - eta * L_dis`` for one stacked batch.

    L_c averages focal loss over source rows and over peers; L_dis averages
    JS over every row. Weights are computed from the current predictions
    unless given, and never carry gradient.
    """
    ns = fw.n_source
    n = fw.y_hat[0].shape[0]
    if lam_source is None or lam_target is None:
        lam_source, lam_target = batch_weights(fw)
    alpha = hp.alpha if alpha is None else alpha
    peers = len(fw.y_hat)

    preds = fw.z_hat if fw.z_hat else [dc.slice_rows(y, 0, ns) for y in fw.y_hat]
    l_c = dc.mul(dc.add(*[focal_loss_t(z, labels, hp.gamma, hp.class_weights) for z in preds])
                 if peers == 2 else focal_loss_t(preds[0], labels, hp.gamma, hp.class_weights),
                 1.0 / peers)

    zero = Tensor(0.0)
    if enable_adv:
        l_adv = adversarial_loss_t([dc.slice_rows(d, 0, ns) for d in fw.d_hat],
                                   [dc.slice_rows(d, ns, n) for d in fw.d_hat],
                                   lam_source, lam_target)
    else:
        l_adv = zero
    if enable_dis:
        y1 = fw.y_hat[0]
        y2 = fw.y_hat[1] if peers == 2 else fw.y_hat[0]
        lo, hi = {"all": (0, n), "source": (0, ns), "target": (ns, n)}[hp.dis_scope]
        if (lo, hi) != (0, n):
            y1, y2 = dc.slice_rows(y1, lo, hi), dc.slice_rows(y2, lo, hi)
        l_dis = dc.mean(js_divergence_t(y1, y2))
    else:
        l_dis = zero

    total = l_c
    if enable_adv and alpha != 0:
        total = dc.sub(total, dc.mul(l_adv, alpha))
    if enable_dis and hp.eta != 0:
        total = dc.sub(total, dc.mul(l_dis, hp.eta))
    return ObjectiveTerms(total, l_c, l_adv, l_dis, np.asarray(lam_source), np.asarray(lam_target))
