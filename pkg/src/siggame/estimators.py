"""scikit-learn style wrappers around training and segmentation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .agents import Agents
from .experiment import objective_preset
from .game import EOS, EmpiricalObjects, GameConfig, rollout_greedy
from .metrics import NGramModel, detect_boundaries, segment
from .training import Trainer


class SignalingGameEstimator(BaseEstimator):
    """Train a sender/receiver pair on att-val objects.

    ``X`` holds one object per row as 0-based attribute values; rows are
    sampled in proportion to ``sample_weight`` during training.
    ``transform`` returns greedy messages padded with eos, ``predict`` maps
    such messages back to objects, and ``score`` is exact-match accuracy of
    the round trip.
    """

    def __init__(
        self,
        n_val=None,
        alphabet_size=5,
        max_len=8,
        objective="ours",
        hidden=64,
        emb=16,
        dropout=0.001,
        lr=1e-3,
        batch_size=256,
        n_updates=3000,
        random_state=None,
    ):
        self.n_val = n_val
        self.alphabet_size = alphabet_size
        self.max_len = max_len
        self.objective = objective
        self.hidden = hidden
        self.emb = emb
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.n_updates = n_updates
        self.random_state = random_state

    def _validate_objects(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, dtype=np.int64, ensure_min_samples=1)
        if np.any(X < 0):
            raise ValueError("attribute values must be non-negative")
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} attributes, expected {self.n_features_in_}")
        return X

    def fit(self, X, y=None, sample_weight=None):
        X = self._validate_objects(X, reset=True)
        n_val = self.n_val if self.n_val is not None else int(X.max()) + 1
        if X.max() >= n_val:
            raise ValueError("attribute value outside range(n_val)")
        config = GameConfig(X.shape[1], n_val, self.alphabet_size, self.max_len)
        seeds = np.random.SeedSequence(self.random_state).spawn(2)
        self.agents_ = Agents(config, self.hidden, self.emb, dropout=self.dropout, seed=np.random.default_rng(seeds[0]))
        spec = objective_preset(self.objective, self.alphabet_size)
        trainer = Trainer(self.agents_, spec, EmpiricalObjects(X, sample_weight), self.batch_size, self.lr,
                          np.random.default_rng(seeds[1]))
        trainer.fit(self.n_updates)
        self.history_ = trainer.history
        self.config_ = config
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "agents_")
        X = self._validate_objects(X, reset=False)
        with ad.no_grad():
            ro = rollout_greedy(self.agents_.sender, X, self.max_len)
        out = np.full((len(X), self.max_len), EOS, dtype=np.int64)
        out[:, : ro.messages.shape[1]] = ro.messages
        return out

    def predict(self, messages) -> np.ndarray:
        check_is_fitted(self, "agents_")
        messages = check_array(messages, dtype=np.int64)
        if messages.shape[1] > self.max_len:
            raise ValueError(f"messages longer than max_len={self.max_len}")
        is_eos = messages == EOS
        if not np.all(is_eos.any(axis=1)):
            raise ValueError("every message needs an eos")
        lengths = is_eos.argmax(axis=1) + 1
        return self.agents_.receiver.predict(messages, lengths)

    def score(self, X, y=None) -> float:
        X = self._validate_objects(X, reset=False)
        return float(np.mean(np.all(self.predict(self.transform(X)) == X, axis=1)))


class HarrisSegmenter(TransformerMixin, BaseEstimator):
    """Segment messages at branching-entropy rises of an n-gram model fitted on the corpus."""

    def __init__(self, threshold=0.0, strip_eos=False, add_k=0.0, alphabet_size=None):
        self.threshold = threshold
        self.strip_eos = strip_eos
        self.add_k = add_k
        self.alphabet_size = alphabet_size

    def _prepare(self, messages):
        out = []
        for m in messages:
            m = tuple(int(s) for s in m)
            if not m:
                raise ValueError("empty message")
            if self.strip_eos and m[-1] == EOS:
                m = m[:-1]
            out.append(m)
        return out

    def fit(self, messages, y=None):
        msgs = self._prepare(messages)
        alphabet = None
        if self.add_k > 0:
            size = self.alphabet_size or 1 + max(s for m in msgs for s in m)
            alphabet = range(size)
        self.model_ = NGramModel(add_k=self.add_k, alphabet=alphabet).fit(msgs)
        return self

    def boundaries(self, messages) -> list[list[int]]:
        check_is_fitted(self, "model_")
        return [detect_boundaries(self.model_, m, self.threshold) for m in self._prepare(messages)]

    def transform(self, messages) -> list[list[tuple[int, ...]]]:
        msgs = self._prepare(messages)
        return [segment(m, b) for m, b in zip(msgs, self.boundaries(messages))]
