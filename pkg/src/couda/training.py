"""Alternating minimax training: the discriminator minimizes L_adv, the peers and Z minimize the joint objective."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Dataset, DomainBatch, make_batches
from .diffcore import Tensor
from .losses import BatchForward, Hyperparams, ObjectiveTerms, adversarial_loss_t, batch_weights, total_objective
from .metrics import evaluate
from .model import Architecture, CoudaModel

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class Ablation:
    enable_adv: bool = True
    enable_dis: bool = True
    enable_ncl: bool = True
    single_network: bool = False


# ordered as the ablation table: single + Lc, ours + Lc, + Ladv, + Ldis w/o NCL, full
VARIANTS: dict[str, Ablation] = {
    "single_lc": Ablation(enable_adv=False, enable_dis=False, single_network=True),
    "ours_lc": Ablation(enable_adv=False, enable_dis=False),
    "ours_lc_adv": Ablation(enable_dis=False),
    "ours_lc_adv_dis_wo_ncl": Ablation(enable_ncl=False),
    "full": Ablation(),
}


@dataclass
class TrainConfig:
    seed: int = 0
    hp: Hyperparams = field(default_factory=Hyperparams)
    arch: Architecture = field(default_factory=Architecture)
    ablation: Ablation = field(default_factory=Ablation)
    eval_every_epoch: bool = True


class Adam:
    def __init__(self, names: list[str], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.names = list(names)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in self.names:
            p = params[k]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            # parameters are replaced, never mutated: the previous tape stays valid
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainState:
    def __init__(self, config: TrainConfig, model: CoudaModel | None = None):
        self.config = config
        self.hp = config.hp
        self.ablation = config.ablation
        arch = config.arch
        if arch.single_network != config.ablation.single_network or arch.beta_noise_init != config.hp.beta_noise_init:
            arch = Architecture(**{**asdict(arch), "single_network": config.ablation.single_network,
                                   "hidden": tuple(arch.hidden), "beta_noise_init": config.hp.beta_noise_init})
        self.model = model or CoudaModel(arch, seed=config.seed)
        self.net_names = self.model.group("networks")
        self.disc_names = self.model.group("discriminator")
        self.opt_net = Adam(self.net_names, config.hp.lr)
        self.opt_disc = Adam(self.disc_names, config.hp.lr)
        self.step = 0
        self.total_steps = 0

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params

    def current_alpha(self) -> float:
        if not self.hp.alpha_warmup or self.total_steps == 0:
            return self.hp.alpha
        warm = max(1, int(0.1 * self.total_steps))
        return self.hp.alpha * min(1.0, (self.step + 1) / warm)


def forward_batch(model: CoudaModel, xs: np.ndarray, xt: np.ndarray, *,
                  enable_ncl: bool = True, detach_features: bool = False) -> BatchForward:
    """Both peers on the stacked [source; target] batch."""
    ns = xs.shape[0]
    x = Tensor(np.concatenate([xs, xt], axis=0))
    fw = BatchForward(n_source=ns, f=[], y_hat=[], d_hat=[])
    for tau in model.peers:
        out = model.peer_forward(tau, x, detach_features=detach_features)
        fw.f.append(out.f)
        fw.y_hat.append(out.y_hat)
        fw.d_hat.append(out.d_hat)
        if enable_ncl and not detach_features:
            fw.z_hat.append(model.adapt_batch(dc.slice_rows(out.y_hat, 0, ns), dc.slice_rows(out.f, 0, ns)))
    return fw


def _finite(name: str, value: float, state: TrainState) -> float:
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite {name} at step {state.step}: {value}")
    return value


def discriminator_step(state: TrainState, batch: DomainBatch) -> float:
    """One update of D only; returns L_adv before the update."""
    if not state.ablation.enable_adv:
        return 0.0
    model = state.model
    fw = forward_batch(model, batch.xs, batch.xt, enable_ncl=False, detach_features=True)
    lam_s, lam_t = batch_weights(fw)
    ns = fw.n_source
    n = ns + batch.xt.shape[0]
    l_adv = adversarial_loss_t([dc.slice_rows(d, 0, ns) for d in fw.d_hat],
                               [dc.slice_rows(d, ns, n) for d in fw.d_hat], lam_s, lam_t)
    value = _finite("L_adv (discriminator)", l_adv.item(), state)
    dc.zero_grads(model.params.values())
    dc.backward(l_adv)
    state.opt_disc.step(model.params)
    dc.zero_grads(model.params.values())
    return value


def adaptation_step(state: TrainState, batch: DomainBatch) -> ObjectiveTerms:
    """One update of the peers and Z; returns the objective terms before the update."""
    model, ab = state.model, state.ablation
    fw = forward_batch(model, batch.xs, batch.xt, enable_ncl=ab.enable_ncl)
    terms = total_objective(fw, batch.zs, state.hp, enable_adv=ab.enable_adv,
                            enable_dis=ab.enable_dis, alpha=state.current_alpha())
    _finite("objective", terms.total.item(), state)
    dc.zero_grads(model.params.values())
    dc.backward(terms.total)
    state.opt_net.step(model.params)
    dc.zero_grads(model.params.values())
    return terms


HISTORY_FIELDS = ("epoch", "l_c", "l_adv", "l_dis", "objective", "l_adv_disc",
                  "lambda_source", "lambda_target", "target_accuracy", "target_macro_f1", "noise_diag")


def fit(source: Dataset, target_train: Dataset, target_test: Dataset | None,
        config: TrainConfig, state: TrainState | None = None) -> tuple[CoudaModel, list[dict]]:
    """Train for ``config.hp.epochs`` epochs; one discriminator step then one adaptation step per batch."""
    state = state or TrainState(config)
    hp = config.hp
    n_batches = -(-max(len(source), len(target_train)) // hp.batch_size)
    state.total_steps = n_batches * hp.epochs
    history: list[dict] = []
    for epoch in range(hp.epochs):
        sums = dict.fromkeys(HISTORY_FIELDS[1:8], 0.0)
        count = 0
        try:
            for batch in make_batches(source, target_train, hp.batch_size, config.seed, epoch):
                l_disc = discriminator_step(state, batch)
                terms = adaptation_step(state, batch)
                state.step += 1
                count += 1
                sums["l_c"] += terms.l_c.item()
                sums["l_adv"] += terms.l_adv.item()
                sums["l_dis"] += terms.l_dis.item()
                sums["objective"] += terms.total.item()
                sums["l_adv_disc"] += l_disc
                sums["lambda_source"] += float(terms.lam_source.mean())
                sums["lambda_target"] += float(terms.lam_target.mean())
        except NonFiniteLoss as e:
            e.history = history
            raise
        rec = {"epoch": epoch + 1}
        rec.update({k: v / count for k, v in sums.items()})
        if target_test is not None and target_test.y_clean is not None and config.eval_every_epoch:
            rep = evaluate(state.model, target_test)
            rec.update(target_accuracy=rep.accuracy, target_macro_f1=rep.macro_f1, noise_diag=rep.noise_diag)
        else:
            rec.update(target_accuracy=float("nan"), target_macro_f1=float("nan"), noise_diag=float("nan"))
        history.append(rec)
        log.info("epoch %d  L_c=%.4f L_adv=%.4f L_dis=%.4f  target F1=%.4f",
                 rec["epoch"], rec["l_c"], rec["l_adv"], rec["l_dis"], rec["target_macro_f1"])
    return state.model, history
