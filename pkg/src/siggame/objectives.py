"""Game objectives, the REINFORCE surrogate, baseline regression, and β annealing.

Objective kinds:

``conv``        E[log R(x|m)], optimized with an entropy regularizer.
``conv_alpha``  E[log R(x|m) - α|m|], with the entropy regularizer.
``elbo_alpha``  E[log R(x|m)] - β KL(S(M|x) || P_α).
``ours``        E[log R(x|m)] - β KL(S(M|x) || P_prior), P_prior the receiver's LM.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .game import enumerate_messages, pad_messages, score_messages
from .priors import AnalyticPrior

KINDS = ("conv", "conv_alpha", "elbo_alpha", "ours")


@dataclass(frozen=True)
class BetaSchedule:
    """``fixed`` keeps ``beta``; ``rewo`` starts at ``beta0`` and grows while the
    reconstruction-error EMA stays below ``kappa``."""

    kind: str = "fixed"
    beta: float = 1.0
    kappa: float = 0.3
    beta0: float = 1e-3
    rate: float = 0.01
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.kind not in ("fixed", "rewo"):
            raise ValueError(f"unknown beta schedule {self.kind!r}")
        if self.kind == "fixed" and self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.kind == "rewo":
            if self.kappa <= 0:
                raise ValueError("kappa must be positive")
            if not 0 < self.beta0 <= 1:
                raise ValueError("beta0 must lie in (0, 1]")
            if self.rate <= 0:
                raise ValueError("rate must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")

    @classmethod
    def rewo(cls, kappa: float = 0.3, beta0: float = 1e-3, rate: float = 0.01, ema_decay: float = 0.99):
        return cls("rewo", kappa=kappa, beta0=beta0, rate=rate, ema_decay=ema_decay)


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    entreg: float | None = None
    alpha: float | None = None
    beta: BetaSchedule = field(default_factory=BetaSchedule)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        needs_entreg = self.kind in ("conv", "conv_alpha")
        needs_alpha = self.kind in ("conv_alpha", "elbo_alpha")
        if needs_entreg != (self.entreg is not None):
            raise ValueError(f"{self.kind}: entreg must be {'set' if needs_entreg else 'unset'}")
        if needs_alpha != (self.alpha is not None):
            raise ValueError(f"{self.kind}: alpha must be {'set' if needs_alpha else 'unset'}")
        if self.entreg is not None and self.entreg < 0:
            raise ValueError("entreg must be non-negative")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def conv(cls, entreg: float = 1.0):
        return cls("conv", entreg=entreg)

    @classmethod
    def conv_alpha(cls, alpha: float, entreg: float = 1.0):
        return cls("conv_alpha", entreg=entreg, alpha=alpha)

    @classmethod
    def elbo_alpha(cls, alpha: float, beta: BetaSchedule | None = None):
        return cls("elbo_alpha", alpha=alpha, beta=beta or BetaSchedule())

    @classmethod
    def ours(cls, beta: BetaSchedule | None = None):
        return cls("ours", beta=beta or BetaSchedule.rewo())

    @property
    def uses_beta(self) -> bool:
        return self.kind in ("elbo_alpha", "ours")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectiveSpec":
        data = dict(data)
        data["beta"] = BetaSchedule(**data.get("beta", {}))
        return cls(**data)


@dataclass(frozen=True)
class TrainState:
    beta: float
    recon_ema: float | None = None
    ema_decay: float = 0.99
    step: int = 0


def initial_train_state(spec: ObjectiveSpec) -> TrainState:
    sched = spec.beta
    beta = sched.beta0 if sched.kind == "rewo" else sched.beta
    return TrainState(beta=beta, recon_ema=None, ema_decay=sched.ema_decay, step=0)


def rewo_update(state: TrainState, recon_error: float, schedule: BetaSchedule) -> TrainState:
    """Fold one batch reconstruction error into the EMA and maybe raise β.

    The EMA starts at the first observed error.  Under ``rewo``, β is
    multiplied by ``1 + rate`` (capped at 1) whenever the EMA is below
    ``kappa``; it never decreases.
    """
    if recon_error < 0:
        raise ValueError("reconstruction error must be non-negative")
    if state.recon_ema is None:
        ema = float(recon_error)
    else:
        ema = state.ema_decay * state.recon_ema + (1.0 - state.ema_decay) * float(recon_error)
    beta = state.beta
    if schedule.kind == "rewo" and ema < schedule.kappa:
        beta = min(1.0, beta * (1.0 + schedule.rate))
    return replace(state, beta=beta, recon_ema=ema, step=state.step + 1)


def rewo_steps_to_one(schedule: BetaSchedule) -> int:
    return math.ceil(math.log(1.0 / schedule.beta0) / math.log(1.0 + schedule.rate))


@dataclass
class SurrogateResult:
    loss: Tensor  # negated batch-mean surrogate, to be minimized
    returns: np.ndarray  # C_t, shape (B, T), zero past the message end
    objective: float  # batch-mean Monte-Carlo estimate of the objective value


def _reverse_cumsum(x: np.ndarray) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(x, axis=1), axis=1), axis=1)


def surrogate_loss(
    spec: ObjectiveSpec,
    beta: float,
    log_r: Tensor,
    log_s: Tensor,
    entropies: Tensor,
    mask: np.ndarray,
    prior_logp=None,
    baseline: Tensor | None = None,
) -> SurrogateResult:
    """Stochastic-computation-graph surrogate for one batch of rollouts.

    Per message, the surrogate is

        log R + β Σ_t log P_t + Σ_t StopGrad(C_t - B_t) log S_t  [+ entropy regularizer]

    with ``C_t = log R + β Σ_{u≥t} (log P_u - log S_u)`` for the ELBO kinds,
    ``C_t = log R - α (|m| - t + 1)`` for ``conv_alpha`` and ``C_t = log R``
    for ``conv``.  The ``β Σ log P_t`` term is differentiable only when
    ``prior_logp`` is a Tensor (the learnable prior).
    """
    mask = np.asarray(mask, dtype=np.float64)
    lr = log_r.data
    ls = log_s.data
    lengths = mask.sum(axis=1)

    if spec.uses_beta:
        if prior_logp is None:
            raise ValueError(f"objective {spec.kind} needs prior log-probabilities")
        if spec.kind == "ours" and not isinstance(prior_logp, Tensor):
            raise ValueError("objective 'ours' needs the learnable prior as a Tensor")
        pd = prior_logp.data if isinstance(prior_logp, Tensor) else np.asarray(prior_logp)
        step_reward = beta * (pd - ls) * mask
    elif spec.kind == "conv_alpha":
        step_reward = -spec.alpha * mask
    else:
        step_reward = np.zeros_like(mask)

    returns = (lr[:, None] + _reverse_cumsum(step_reward)) * mask
    advantage = returns - baseline.data if baseline is not None else returns
    advantage = advantage * mask

    per_message = ad.add(log_r, ad.reduce_sum(ad.mul(log_s, advantage), axis=1))
    if spec.kind == "ours":
        per_message = ad.add(per_message, ad.mul(ad.reduce_sum(prior_logp, axis=1), beta))
    if spec.entreg is not None and spec.entreg > 0:
        ent = ad.reduce_sum(ad.mul(entropies, mask), axis=1)
        per_message = ad.add(per_message, ad.mul(ent, spec.entreg / lengths))
    loss = ad.neg(ad.reduce_mean(per_message))
    objective = float(returns[:, 0].mean())
    return SurrogateResult(loss=loss, returns=returns, objective=objective)


def baseline_loss(returns: np.ndarray, baseline: Tensor, mask: np.ndarray) -> Tensor:
    """Batch mean of ``Σ_t (C_t - B_t)^2``; ``returns`` are constants."""
    diff = ad.sub(baseline, np.asarray(returns) * mask)
    diff = ad.mul(diff, np.asarray(mask, dtype=np.float64))
    return ad.reduce_mean(ad.reduce_sum(ad.mul(diff, diff), axis=1))


@dataclass
class ExactTerms:
    """Expectations over the whole message space, each weighted by ``P_obj``.

    ``entropy`` uses the chain rule (sum of per-step policy entropies) and
    ``neg_log_s`` the direct ``-Σ S log S``; they agree in value.  Per-pair
    arrays are laid out with objects outermost.
    """

    weights: Tensor  # P(x) S(m|x)
    log_s: Tensor
    log_r: Tensor
    log_prior_pairs: Tensor
    lengths: np.ndarray
    recon: Tensor
    length: Tensor
    entropy: Tensor
    neg_log_s: Tensor
    log_prior: Tensor

    def expect(self, values) -> Tensor:
        return ad.reduce_sum(ad.mul(self.weights, values))


def exact_terms(sender, receiver, objects, object_probs, masks=None) -> ExactTerms:
    config = sender.config
    messages = enumerate_messages(config)
    objects = np.asarray(objects, dtype=np.int64)
    n_obj, n_msg = len(objects), len(messages)
    rep_objects = np.repeat(objects, n_msg, axis=0)
    tile = np.tile(np.arange(n_msg), n_obj)

    scored = score_messages(sender, rep_objects, messages * n_obj, config.max_len)
    log_s = scored.total_log_prob()
    w = np.repeat(np.asarray(object_probs, dtype=np.float64), n_msg)
    weights = ad.mul(ad.exp(log_s), w)

    padded, lengths = pad_messages(messages)
    if masks is None:
        masks = receiver.no_dropout(n_msg)
    prior_steps, final = receiver.read(padded, lengths, masks)
    log_r = receiver.object_log_prob(ad.index_select(final, tile), rep_objects)
    log_prior = ad.index_select(ad.reduce_sum(prior_steps, axis=1), tile)
    rep_lengths = lengths[tile].astype(np.float64)

    def expect(values):
        return ad.reduce_sum(ad.mul(weights, values))

    return ExactTerms(
        weights=weights,
        log_s=log_s,
        log_r=log_r,
        log_prior_pairs=log_prior,
        lengths=rep_lengths,
        recon=expect(log_r),
        length=expect(rep_lengths),
        entropy=expect(ad.reduce_sum(scored.entropies, axis=1)),
        neg_log_s=ad.neg(expect(log_s)),
        log_prior=expect(log_prior),
    )


def exact_objective(spec: ObjectiveSpec, sender, receiver, objects, object_probs, beta: float = 1.0, masks=None) -> Tensor:
    """The objective of ``spec`` evaluated exactly by enumerating the message space.

    For the conventional kinds this is the objective proper, without the
    entropy regularizer (which only shapes the gradient).
    """
    terms = exact_terms(sender, receiver, objects, object_probs, masks)
    if spec.kind == "conv":
        return terms.recon
    if spec.kind == "conv_alpha":
        return ad.sub(terms.recon, ad.mul(terms.length, spec.alpha))
    if spec.kind == "elbo_alpha":
        log_p = AnalyticPrior("exponential", sender.config, spec.alpha).log_prob_length(terms.lengths)
        kl = ad.sub(ad.neg(terms.neg_log_s), terms.expect(log_p))
    else:
        kl = ad.sub(ad.neg(terms.neg_log_s), terms.log_prior)
    return ad.sub(terms.recon, ad.mul(kl, beta))
