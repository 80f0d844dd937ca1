"""Analytic message priors: uniform, exponential-in-length, and monkey typing.

With ``k = |A| - 1`` non-eos symbols there are ``k ** (l - 1)`` messages of
length ``l``, so the exponential prior ``P(m) ∝ exp(-α |m|)`` normalizes with

    Z = Σ_l k^(l-1) e^(-α l) = (1 - (k e^-α)^L) / (e^α - k),

which has a removable singularity at ``e^α = k`` where ``Z = L e^-α``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .game import EOS, GameConfig, validate_message

KINDS = ("uniform", "exponential", "monkey")


def normalizer(config: GameConfig, alpha: float) -> float:
    """``Z_α = Σ_{m ∈ M} exp(-α |m|)`` in closed form."""
    k = config.alphabet_size - 1
    L = config.max_len
    ratio = k * np.exp(-alpha)
    if np.isclose(ratio, 1.0, rtol=0.0, atol=1e-12):
        return L * np.exp(-alpha)
    # expm1/log1p keep precision when the ratio is close to 1.
    numerator = -np.expm1(L * np.log(ratio))
    denominator = np.exp(alpha) - k
    return float(numerator / denominator)


def log_normalizer(config: GameConfig, alpha: float) -> float:
    return float(np.log(normalizer(config, alpha)))


@dataclass(frozen=True)
class AnalyticPrior:
    """Object-independent message distribution with a closed form.

    ``uniform`` is the exponential prior at ``α = 0``.  ``monkey`` emits eos
    with probability ``1 - (|A| - 1) e^-α`` at every step and each other
    symbol with ``e^-α``; it is the ``max_len → ∞`` limit of the exponential
    prior and requires ``α > log(|A| - 1)``.
    """

    kind: str
    config: GameConfig
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.kind == "monkey" and not self.alpha > self.config.gamma:
            raise ValueError(
                f"monkey typing needs alpha > log(|A|-1) = {self.config.gamma:.6g}, got {self.alpha}"
            )

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.kind == "uniform" else self.alpha

    def log_prob_length(self, lengths) -> np.ndarray:
        """Log-probability of any one message with the given length(s)."""
        lengths = np.asarray(lengths, dtype=np.float64)
        a = self.effective_alpha
        if self.kind == "monkey":
            return np.log(np.exp(a) - self.config.alphabet_size + 1) - a * lengths
        return -a * lengths - log_normalizer(self.config, a)

    def log_prob(self, message: Sequence[int]) -> float:
        validate_message(message, self.config)
        return float(self.log_prob_length(len(message)))

    def step_log_probs(self, messages: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Per-step decomposition used by the training surrogate, shape ``(B, T)``.

        Exponential/uniform: ``-α`` per emitted symbol (the ``-log Z`` constant
        is dropped; it acts as a baseline).  Monkey: its per-symbol probabilities.
        """
        messages = np.asarray(messages)
        lengths = np.asarray(lengths)
        T = messages.shape[1]
        mask = np.arange(1, T + 1)[None, :] <= lengths[:, None]
        a = self.effective_alpha
        if self.kind != "monkey":
            return -a * mask
        stop = np.log1p(-np.exp(self.config.gamma - a))
        per = np.where(messages == EOS, stop, -a)
        return per * mask

    def step_distribution(self) -> np.ndarray:
        """Monkey per-step symbol distribution (index 0 is eos)."""
        if self.kind != "monkey":
            raise ValueError("only the monkey prior factorizes into i.i.d. steps")
        k = self.config.alphabet_size - 1
        p = np.full(self.config.alphabet_size, np.exp(-self.alpha))
        p[EOS] = 1.0 - k * np.exp(-self.alpha)
        return p


def length_distribution(prior: AnalyticPrior) -> np.ndarray:
    """``P(K = k)`` for ``k = 1..max_len``.

    Exponential/uniform: ``P(K=k) ∝ exp((γ - α) k)``.  Monkey typing is run
    the way a policy is run in the game, so the mass of the tail beyond
    ``max_len`` lands on the forced final step.
    """
    cfg = prior.config
    k = np.arange(1, cfg.max_len + 1, dtype=np.float64)
    if prior.kind == "monkey":
        q = (cfg.alphabet_size - 1) * np.exp(-prior.alpha)
        dist = (1.0 - q) * q ** (k - 1)
        dist[-1] = q ** (cfg.max_len - 1)
        return dist
    logw = (cfg.gamma - prior.effective_alpha) * k
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def monkey_limit_gap(config: GameConfig, alpha: float, max_lens: Sequence[int]) -> np.ndarray:
    """Sup-norm distance between the exponential prior and monkey typing, per ``max_len``."""
    if not alpha > config.gamma:
        raise ValueError(f"alpha must exceed log(|A|-1) = {config.gamma:.6g}")
    gaps = []
    for L in max_lens:
        cfg = GameConfig(config.n_att, config.n_val, config.alphabet_size, int(L))
        lengths = np.arange(1, L + 1)
        exp_prior = AnalyticPrior("exponential", cfg, alpha)
        monkey = AnalyticPrior("monkey", cfg, alpha)
        # Both priors depend on a message only through its length.
        diff = np.abs(np.exp(exp_prior.log_prob_length(lengths)) - np.exp(monkey.log_prob_length(lengths)))
        gaps.append(diff.max())
    return np.array(gaps)


def expected_length(prior: AnalyticPrior) -> float:
    dist = length_distribution(prior)
    return float(np.dot(np.arange(1, len(dist) + 1), dist))
