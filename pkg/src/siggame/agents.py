"""Sender, receiver (with its language-model readout), and the REINFORCE baseline.

Both agents share one recurrent core.  At step ``t`` the core consumes the
previous symbol (``bos`` at ``t = 1``), updates

    h_t = GRU(LN(e_{t-1} ⊙ d_e), LN(h_{t-1} ⊙ d_h)),

and predicts symbol ``t`` from ``LN(h_t ⊙ d_h)``.  The sender starts from the
summed attribute embeddings of the object; the receiver starts from zeros,
reads its prior over the next symbol off the same linear head at every step,
and predicts the object from the state after it has consumed ``eos``.
The dropout masks ``d_e``/``d_h`` are all-ones for the sender.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .game import EOS, GameConfig, index_to_object, object_to_index, pad_messages, score_messages


@dataclass
class DropoutMasks:
    """Per-rollout multiplicative masks, reused at every time step."""

    embedding: np.ndarray  # (B, emb)
    hidden: np.ndarray  # (B, hidden)

    @classmethod
    def ones(cls, batch: int, emb: int, hidden: int) -> "DropoutMasks":
        return cls(np.ones((batch, emb)), np.ones((batch, hidden)))

    @classmethod
    def sample(cls, batch: int, emb: int, hidden: int, scale: float, rng) -> "DropoutMasks":
        return cls(
            nn.gaussian_dropout_mask((batch, emb), scale, rng),
            nn.gaussian_dropout_mask((batch, hidden), scale, rng),
        )


class SymbolRNN:
    """GRU over symbol embeddings with LayerNorm and a next-symbol linear head."""

    def __init__(self, alphabet_size: int, hidden: int, emb: int, rng: np.random.Generator, prefix: str):
        self.alphabet_size = alphabet_size
        self.hidden = hidden
        self.emb = emb
        self.symbol_emb = nn.uniform_init(rng, (alphabet_size, emb), alphabet_size, f"{prefix}.symbol_emb")
        self.bos = nn.parameter(rng.normal(0.0, 1.0, size=(1, emb)), f"{prefix}.bos")
        self.gru = nn.GRUParams.init(rng, emb, hidden, f"{prefix}.gru")
        self.ln_e_gain = nn.parameter(np.ones(emb), f"{prefix}.ln_e_gain")
        self.ln_e_bias = nn.zeros((emb,), f"{prefix}.ln_e_bias")
        self.ln_h_gain = nn.parameter(np.ones(hidden), f"{prefix}.ln_h_gain")
        self.ln_h_bias = nn.zeros((hidden,), f"{prefix}.ln_h_bias")
        self.out_w = nn.uniform_init(rng, (hidden, alphabet_size), hidden, f"{prefix}.out_w")
        self.out_b = nn.zeros((alphabet_size,), f"{prefix}.out_b")

    def core_parameters(self) -> dict[str, Tensor]:
        params = {
            "symbol_emb": self.symbol_emb,
            "bos": self.bos,
            "ln_e_gain": self.ln_e_gain,
            "ln_e_bias": self.ln_e_bias,
            "ln_h_gain": self.ln_h_gain,
            "ln_h_bias": self.ln_h_bias,
            "out_w": self.out_w,
            "out_b": self.out_b,
        }
        params.update({f"gru.{k}": v for k, v in self.gru.tensors().items()})
        return params

    def norm_hidden(self, h, mask=None) -> Tensor:
        if mask is not None:
            h = ad.mul(h, mask)
        return nn.layer_norm(h, self.ln_h_gain, self.ln_h_bias)

    def advance(self, h_norm: Tensor, prev_symbols, masks: DropoutMasks | None = None) -> Tensor:
        """Consume one symbol and return the normalized new hidden state."""
        batch = h_norm.shape[0]
        if prev_symbols is None:
            e = ad.index_select(self.bos, np.zeros(batch, dtype=np.int64))
        else:
            e = nn.embedding(self.symbol_emb, prev_symbols)
        if masks is not None:
            e = ad.mul(e, masks.embedding)
        e_norm = nn.layer_norm(e, self.ln_e_gain, self.ln_e_bias)
        h = nn.gru_cell(e_norm, h_norm, self.gru)
        return self.norm_hidden(h, None if masks is None else masks.hidden)

    def next_symbol_log_probs(self, h_norm: Tensor) -> Tensor:
        return ad.log_softmax(nn.linear(h_norm, self.out_w, self.out_b))


class Sender(SymbolRNN):
    """Object encoder plus autoregressive message generator; implements the rollout policy."""

    def __init__(self, config: GameConfig, hidden: int = 64, emb: int = 16, rng=None):
        rng = np.random.default_rng(rng)
        super().__init__(config.alphabet_size, hidden, emb, rng, "sender")
        self.config = config
        self.object_emb = [
            nn.uniform_init(rng, (config.n_val, hidden), config.n_val, f"sender.object_emb.{a}")
            for a in range(config.n_att)
        ]

    def parameters(self) -> dict[str, Tensor]:
        params = {f"object_emb.{a}": t for a, t in enumerate(self.object_emb)}
        params.update(self.core_parameters())
        return params

    def encode_objects(self, objects) -> Tensor:
        objects = np.asarray(objects, dtype=np.int64)
        h = nn.embedding(self.object_emb[0], objects[:, 0])
        for a in range(1, self.config.n_att):
            h = ad.add(h, nn.embedding(self.object_emb[a], objects[:, a]))
        return h

    def initial_state(self, objects) -> Tensor:
        return self.norm_hidden(self.encode_objects(objects))

    def step(self, state: Tensor, prev_symbols):
        h_norm = self.advance(state, prev_symbols)
        return h_norm, self.next_symbol_log_probs(h_norm)


class Receiver(SymbolRNN):
    """Message reader with two readouts: object logits and a next-symbol language model."""

    def __init__(
        self,
        config: GameConfig,
        hidden: int = 64,
        emb: int = 16,
        dropout: float = 0.001,
        object_head: str = "factorized",
        rng=None,
    ):
        rng = np.random.default_rng(rng)
        super().__init__(config.alphabet_size, hidden, emb, rng, "receiver")
        if object_head not in ("factorized", "joint"):
            raise ValueError(f"unknown object head {object_head!r}")
        self.config = config
        self.dropout = dropout
        self.object_head = object_head
        if object_head == "factorized":
            sizes = [config.n_val] * config.n_att
        else:
            sizes = [config.n_objects]
        self.head_w = [nn.uniform_init(rng, (hidden, n), hidden, f"receiver.head_w.{i}") for i, n in enumerate(sizes)]
        self.head_b = [nn.zeros((n,), f"receiver.head_b.{i}") for i, n in enumerate(sizes)]

    def parameters(self) -> dict[str, Tensor]:
        params = self.core_parameters()
        for i, (w, b) in enumerate(zip(self.head_w, self.head_b)):
            params[f"head_w.{i}"] = w
            params[f"head_b.{i}"] = b
        return params

    def sample_masks(self, batch: int, rng) -> DropoutMasks:
        return DropoutMasks.sample(batch, self.emb, self.hidden, self.dropout, rng)

    def no_dropout(self, batch: int) -> DropoutMasks:
        return DropoutMasks.ones(batch, self.emb, self.hidden)

    def initial_state(self, batch: int, masks: DropoutMasks | None = None) -> Tensor:
        return self.norm_hidden(np.zeros((batch, self.hidden)), None if masks is None else masks.hidden)

    def read(self, messages: np.ndarray, lengths: np.ndarray, masks: DropoutMasks | None = None):
        """Run over padded messages.

        Returns ``(prior_step_log_probs (B, T), final_state (B, H))``.  The
        prior entry at the forced last step ``max_len`` is 0.
        """
        messages = np.asarray(messages, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        batch, T = messages.shape
        h = self.initial_state(batch, masks)
        prev = None
        step_logp = []
        final = None
        for t in range(1, T + 2):
            h = self.advance(h, prev, masks)
            if t <= T:
                free = ((lengths >= t) & (t < self.config.max_len)).astype(np.float64)
                logp = self.next_symbol_log_probs(h)
                step_logp.append(ad.mul(ad.pick(logp, messages[:, t - 1]), free))
                prev = messages[:, t - 1]
            done = (lengths + 1 == t).astype(np.float64)[:, None]
            if done.any():
                part = ad.mul(h, done)
                final = part if final is None else ad.add(final, part)
        return ad.stack(step_logp, axis=1), final

    def object_log_probs(self, final: Tensor) -> list[Tensor]:
        return [ad.log_softmax(nn.linear(final, w, b)) for w, b in zip(self.head_w, self.head_b)]

    def object_log_prob(self, final: Tensor, objects) -> Tensor:
        """``log R(x | m)`` per row from the final receiver state."""
        objects = np.asarray(objects, dtype=np.int64)
        heads = self.object_log_probs(final)
        if self.object_head == "joint":
            return ad.pick(heads[0], object_to_index(objects, self.config.n_val))
        total = ad.pick(heads[0], objects[:, 0])
        for a in range(1, len(heads)):
            total = ad.add(total, ad.pick(heads[a], objects[:, a]))
        return total

    def predict(self, messages, lengths) -> np.ndarray:
        """Most likely object per message (dropout off), 0-based values."""
        with ad.no_grad():
            _, final = self.read(messages, lengths)
            heads = self.object_log_probs(final)
        if self.object_head == "joint":
            return index_to_object(np.argmax(heads[0].data, axis=1), self.config.n_att, self.config.n_val)
        return np.stack([np.argmax(hd.data, axis=1) for hd in heads], axis=1)


class PriorPolicy:
    """The receiver's language model exposed as an object-independent rollout policy."""

    def __init__(self, receiver: Receiver, masks: DropoutMasks | None = None):
        self.receiver = receiver
        self.masks = masks

    def initial_state(self, objects) -> Tensor:
        return self.receiver.initial_state(len(objects), self.masks)

    def step(self, state, prev_symbols):
        h = self.receiver.advance(state, prev_symbols, self.masks)
        return h, self.receiver.next_symbol_log_probs(h)


class Baseline:
    """Two-layer MLP predicting the return from the detached sender state."""

    def __init__(self, hidden: int = 64, baseline_hidden: int | None = None, slope: float = 0.01, rng=None):
        rng = np.random.default_rng(rng)
        baseline_hidden = baseline_hidden or max(1, hidden // 2)
        self.slope = slope
        self.w1 = nn.uniform_init(rng, (hidden, baseline_hidden), hidden, "baseline.w1")
        self.b1 = nn.zeros((baseline_hidden,), "baseline.b1")
        self.w2 = nn.uniform_init(rng, (baseline_hidden,), baseline_hidden, "baseline.w2")
        self.b2 = nn.zeros((), "baseline.b2")

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def value(self, sender_state) -> Tensor:
        x = ad.stop_gradient(sender_state)
        hidden = ad.leaky_relu(nn.linear(x, self.w1, self.b1), self.slope)
        return ad.add(ad.matmul(hidden, self.w2), self.b2)


class Agents:
    """Sender, receiver, and baseline trained together."""

    def __init__(
        self,
        config: GameConfig,
        hidden: int = 64,
        emb: int = 16,
        baseline_hidden: int | None = None,
        dropout: float = 0.001,
        object_head: str = "factorized",
        seed=None,
    ):
        rng = np.random.default_rng(seed)
        self.config = config
        self.sender = Sender(config, hidden, emb, rng)
        self.receiver = Receiver(config, hidden, emb, dropout, object_head, rng)
        self.baseline = Baseline(hidden, baseline_hidden, rng=rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, module in (("sender", self.sender), ("receiver", self.receiver), ("baseline", self.baseline)):
            for name, t in module.parameters().items():
                out[f"{prefix}.{name}"] = t
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)


def sender_step(sender: Sender, x, prefix) -> np.ndarray:
    """Next-symbol distribution of the sender for one object after ``prefix``."""
    prefix = list(prefix)
    if EOS in prefix:
        raise ValueError("prefix contains eos")
    with ad.no_grad():
        state = sender.initial_state(np.asarray(x, dtype=np.int64)[None, :])
        prev = None
        for s in prefix:
            state, _ = sender.step(state, prev)
            prev = np.array([s])
        _, logp = sender.step(state, prev)
    return np.exp(logp.data[0])


def receiver_logprob_object(receiver: Receiver, messages, objects, masks: DropoutMasks | None = None) -> Tensor:
    padded, lengths = pad_messages(messages)
    _, final = receiver.read(padded, lengths, masks)
    return receiver.object_log_prob(final, objects)


def prior_logprob(receiver: Receiver, messages, masks: DropoutMasks | None = None) -> Tensor:
    padded, lengths = pad_messages(messages)
    step_logp, _ = receiver.read(padded, lengths, masks)
    return ad.reduce_sum(step_logp, axis=1)


def sender_logprob(sender: Sender, messages, objects) -> Tensor:
    """Exact ``log S(m | x)`` by teacher forcing, one message per object row."""
    return score_messages(sender, objects, messages, sender.config.max_len).total_log_prob()


def baseline_value(baseline: Baseline, sender_state) -> Tensor:
    return baseline.value(sender_state)
