"""Object and message spaces, object distributions, and message rollouts.

Conventions used throughout the package:

* symbol ``0`` is ``eos``; a message is a tuple of symbols whose only ``eos``
  is its last element, so ``len(message)`` is the message length ``|m|``;
* objects are integer arrays of shape ``(n_att,)`` holding 0-based value
  indices internally; JSON corpora store 1-based values;
* a rollout that reaches step ``max_len`` is forced to emit ``eos``.  The
  forced step is deterministic, so it contributes log-probability 0 and
  entropy 0, which keeps every policy a normalized distribution over the
  finite message space.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EOS = 0
ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class GameConfig:
    n_att: int
    n_val: int
    alphabet_size: int
    max_len: int

    def __post_init__(self):
        if self.n_att < 1 or self.n_val < 1:
            raise ValueError("n_att and n_val must be positive")
        if self.alphabet_size < 3:
            raise ValueError("alphabet needs at least two symbols besides eos (alphabet_size >= 3)")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")

    @property
    def eos(self) -> int:
        return EOS

    @property
    def gamma(self) -> float:
        """``log(|A| - 1)``, the log number of non-eos symbols."""
        return float(np.log(self.alphabet_size - 1))

    @property
    def n_objects(self) -> int:
        return self.n_val**self.n_att

    @property
    def n_messages(self) -> int:
        k = self.alphabet_size - 1
        return sum(k ** (length - 1) for length in range(1, self.max_len + 1))


def validate_message(message: Sequence[int], config: GameConfig) -> None:
    n = len(message)
    if not 1 <= n <= config.max_len:
        raise ValueError(f"message length {n} outside [1, {config.max_len}]")
    if message[-1] != EOS:
        raise ValueError("message must end with eos")
    if any(s == EOS for s in message[:-1]):
        raise ValueError("eos may only appear as the last symbol")
    if any(not 0 <= s < config.alphabet_size for s in message):
        raise ValueError("symbol outside the alphabet")


def all_objects(n_att: int, n_val: int) -> np.ndarray:
    """Every att-val object, shape ``(n_val ** n_att, n_att)``, in lexicographic order."""
    return np.array(list(itertools.product(range(n_val), repeat=n_att)), dtype=np.int64).reshape(-1, n_att)


@dataclass(frozen=True)
class ObjectDistribution:
    """Distribution over the ``n_val ** n_att`` objects, indexed lexicographically.

    ``kind="power-law"`` assigns object with index ``i`` (0-based) a mass
    proportional to ``(i + 1) ** -exponent``.
    """

    n_att: int
    n_val: int
    kind: str = "uniform"
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "power-law"):
            raise ValueError(f"unknown object distribution {self.kind!r}")

    @property
    def support_size(self) -> int:
        return self.n_val**self.n_att

    @property
    def probs(self) -> np.ndarray:
        n = self.support_size
        if self.kind == "uniform":
            return np.full(n, 1.0 / n)
        w = np.arange(1, n + 1, dtype=np.float64) ** -self.exponent
        return w / w.sum()

    def objects(self) -> np.ndarray:
        return all_objects(self.n_att, self.n_val)

    def sample_indices(self, rng: np.random.Generator, size: int) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        idx = np.searchsorted(cdf, rng.random(size), side="right")
        return np.minimum(idx, self.support_size - 1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` objects as 0-based value arrays, shape ``(size, n_att)``."""
        return index_to_object(self.sample_indices(rng, size), self.n_att, self.n_val)


@dataclass
class EmpiricalObjects:
    """Sampling from a fixed set of object rows with optional weights."""

    objects: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.objects = np.asarray(self.objects, dtype=np.int64)
        w = np.ones(len(self.objects)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.objects),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per object, with positive sum")
        self.weights = w

    @property
    def probs(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        idx = np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), len(cdf) - 1)
        return self.objects[idx]


def index_to_object(index, n_att: int, n_val: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    digits = np.empty(index.shape + (n_att,), dtype=np.int64)
    rest = index.copy()
    for a in range(n_att - 1, -1, -1):
        digits[..., a] = rest % n_val
        rest //= n_val
    return digits


def object_to_index(objects, n_val: int) -> np.ndarray:
    objects = np.asarray(objects, dtype=np.int64)
    index = np.zeros(objects.shape[:-1], dtype=np.int64)
    for a in range(objects.shape[-1]):
        index = index * n_val + objects[..., a]
    return index


def sample_object(dist: ObjectDistribution, rng: np.random.Generator) -> tuple[int, ...]:
    """One object as a tuple of 1-based attribute values."""
    return tuple(int(v) + 1 for v in dist.sample(rng, 1)[0])


class Policy(Protocol):
    """Autoregressive symbol policy driven by :func:`rollout_sample` and friends.

    ``step`` receives the previous symbols (``None`` before the first symbol)
    and returns the new state together with ``(B, |A|)`` log-probabilities for
    the next symbol.  The returned state is what a state-dependent baseline
    may read.
    """

    def initial_state(self, objects: np.ndarray) -> Any: ...

    def step(self, state: Any, prev_symbols: np.ndarray | None) -> tuple[Any, Tensor]: ...


@dataclass
class Rollout:
    """A batch of messages with the per-step quantities recorded while producing them.

    Arrays have ``T = lengths.max()`` columns; entries past a message's end
    are zero and masked out.
    """

    messages: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    log_probs: Tensor
    entropies: Tensor
    states: list = field(default_factory=list)

    def message_list(self) -> list[tuple[int, ...]]:
        return [tuple(int(s) for s in row[:n]) for row, n in zip(self.messages, self.lengths)]

    def total_log_prob(self) -> Tensor:
        return ad.reduce_sum(self.log_probs, axis=1)


def _unroll(
    policy: Policy,
    objects: np.ndarray,
    max_len: int,
    mode: str,
    rng: np.random.Generator | None = None,
    messages: np.ndarray | None = None,
    lengths: np.ndarray | None = None,
) -> Rollout:
    objects = np.asarray(objects)
    batch = objects.shape[0]
    state = policy.initial_state(objects)
    alive = np.ones(batch, dtype=bool)
    prev = None
    symbols_out, logp_out, ent_out, masks, states = [], [], [], [], []
    out_len = np.zeros(batch, dtype=np.int64)

    for t in range(1, max_len + 1):
        if mode == "score" and not np.any(lengths >= t):
            break
        if mode != "score" and not alive.any():
            break
        state, logp = policy.step(state, prev)
        states.append(state)
        step_mask = alive.astype(np.float64)
        if t == max_len:
            sym = np.zeros(batch, dtype=np.int64)
            logp_t = ad.constant(np.zeros(batch))
            ent_t = ad.constant(np.zeros(batch))
        else:
            if mode == "sample":
                probs = np.exp(logp.data)
                u = rng.random(batch)
                sym = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
                sym = np.minimum(sym, probs.shape[1] - 1)
            elif mode == "greedy":
                sym = np.argmax(logp.data, axis=1)
            else:
                sym = np.where(t <= lengths, messages[:, t - 1], EOS)
            sym = np.where(alive, sym, EOS).astype(np.int64)
            logp_t = ad.mul(ad.pick(logp, sym), step_mask)
            ent_t = ad.mul(ad.neg(ad.reduce_sum(ad.mul(ad.exp(logp), logp), axis=1)), step_mask)
        if mode == "score":
            alive_next = alive & (lengths > t)
        else:
            alive_next = alive & (sym != EOS)
        out_len[alive & ~alive_next] = t
        symbols_out.append(sym)
        logp_out.append(logp_t)
        ent_out.append(ent_t)
        masks.append(step_mask)
        alive = alive_next
        prev = sym

    return Rollout(
        messages=np.stack(symbols_out, axis=1),
        lengths=out_len,
        mask=np.stack(masks, axis=1),
        log_probs=ad.stack(logp_out, axis=1),
        entropies=ad.stack(ent_out, axis=1),
        states=states,
    )


def rollout_sample(policy: Policy, objects, max_len: int, rng: np.random.Generator) -> Rollout:
    """Sample one message per object autoregressively."""
    return _unroll(policy, objects, max_len, "sample", rng=rng)


def rollout_greedy(policy: Policy, objects, max_len: int) -> Rollout:
    """Argmax decoding; ties go to the smallest symbol id."""
    return _unroll(policy, objects, max_len, "greedy")


def score_messages(policy: Policy, objects, messages: Sequence[Sequence[int]], max_len: int) -> Rollout:
    """Teacher-force ``messages`` through ``policy`` (one message per object row)."""
    padded, lengths = pad_messages(messages)
    if lengths.max() > max_len:
        raise ValueError("message longer than max_len")
    return _unroll(policy, objects, max_len, "score", messages=padded, lengths=lengths)


def pad_messages(messages: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(m) for m in messages], dtype=np.int64)
    padded = np.zeros((len(messages), int(lengths.max())), dtype=np.int64)
    for i, m in enumerate(messages):
        padded[i, : len(m)] = m
    return padded, lengths


def enumerate_messages(config: GameConfig, limit: int = ENUMERATION_LIMIT) -> list[tuple[int, ...]]:
    """All messages of the space, shortest first, lexicographic within a length."""
    if config.n_messages > limit:
        raise ValueError(f"message space has {config.n_messages} elements, above the limit {limit}")
    body = range(1, config.alphabet_size)
    out = []
    for length in range(1, config.max_len + 1):
        for prefix in itertools.product(body, repeat=length - 1):
            out.append(tuple(prefix) + (EOS,))
    return out


class CorpusFormatError(ValueError):
    pass


def write_corpus(path, objects: np.ndarray, messages: Iterable[Sequence[int]]) -> None:
    """JSON lines ``{"object": [v1, ...], "message": [s1, ..., 0]}`` with 1-based values."""
    with open(path, "w", encoding="utf-8") as fh:
        for obj, msg in zip(np.asarray(objects), messages):
            record = {"object": [int(v) + 1 for v in obj], "message": [int(s) for s in msg]}
            fh.write(json.dumps(record) + "\n")


def read_corpus(path) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Inverse of :func:`write_corpus`; objects come back 0-based."""
    objects, messages = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                obj = [int(v) - 1 for v in record["object"]]
                msg = tuple(int(s) for s in record["message"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed corpus line ({exc})") from None
            if not msg or msg[-1] != EOS or EOS in msg[:-1] or min(obj, default=0) < 0:
                raise CorpusFormatError(f"{path}:{lineno}: invalid object or message")
            if objects and len(obj) != len(objects[0]):
                raise CorpusFormatError(f"{path}:{lineno}: inconsistent number of attributes")
            objects.append(obj)
            messages.append(msg)
    if not objects:
        raise CorpusFormatError(f"{path}: empty corpus")
    return np.array(objects, dtype=np.int64), messages
