"""Language analysis: TopSim, branching entropy, HAS segmentation, C1-C3 statistics, ZLA.

Messages are tuples of ints.  By default the terminal eos is kept as an
ordinary symbol; ``strip_eos=True`` drops it before any analysis.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein
from rapidfuzz.process import cdist
from scipy.stats import rankdata

from .game import EOS

DEFAULT_THRESHOLD = 0.0
THRESHOLD_PRESETS = (0.0, 0.25, 0.5)
ZLA_WINDOW = 10


class UndefinedCorrelationError(ValueError):
    """A distance vector (or ranking) has zero variance."""


class UnseenContextError(KeyError):
    """The context never occurs with a successor in the fitted corpus."""


def hamming(a, b) -> int:
    if len(a) != len(b):
        raise ValueError("hamming distance needs equal lengths")
    return int(sum(x != y for x, y in zip(a, b)))


def levenshtein(a: Sequence, b: Sequence) -> int:
    return int(Levenshtein.distance(list(a), list(b)))


def spearman(x, y) -> float:
    """Spearman's rho with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D arrays of equal length")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    sx, sy = np.dot(rx, rx), np.dot(ry, ry)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("zero variance in one of the rankings")
    return float(np.dot(rx, ry) / math.sqrt(sx * sy))


def _prepare(messages, strip_eos: bool) -> list[tuple[int, ...]]:
    out = []
    for m in messages:
        m = tuple(int(s) for s in m)
        if strip_eos and m and m[-1] == EOS:
            m = m[:-1]
        out.append(m)
    return out


def _tokenize(segmented: list[list[tuple[int, ...]]]) -> list[list[int]]:
    vocab: dict[tuple[int, ...], int] = {}
    return [[vocab.setdefault(seg, len(vocab)) for seg in msg] for msg in segmented]


def pairwise_distances(objects, units: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Hamming over objects and Levenshtein over unit sequences, for all pairs i < j."""
    objects = np.asarray(objects)
    n = len(objects)
    iu, ju = np.triu_indices(n, k=1)
    d_obj = (objects[:, None, :] != objects[None, :, :]).sum(axis=2)[iu, ju]
    d_msg = cdist(units, units, scorer=Levenshtein.distance, dtype=np.int64)[iu, ju]
    return d_obj.astype(np.float64), d_msg.astype(np.float64)


def topsim(objects, messages, unit: str = "character", segmentation=None, strip_eos: bool = False) -> float:
    """Spearman correlation between pairwise object and message distances.

    ``unit="word"`` measures Levenshtein over segment tokens;
    ``segmentation`` is then a per-message list of segments (tuples).
    """
    objects = np.asarray(objects)
    if len({tuple(o) for o in objects}) < 2:
        raise UndefinedCorrelationError("topsim needs at least two distinct objects")
    if unit == "character":
        units = [list(m) for m in _prepare(messages, strip_eos)]
    elif unit == "word":
        if segmentation is None:
            raise ValueError("word-level topsim needs a segmentation")
        units = _tokenize(segmentation)
    else:
        raise ValueError(f"unknown unit {unit!r}")
    d_obj, d_msg = pairwise_distances(objects, units)
    return spearman(d_obj, d_msg)


class NGramModel:
    """Empirical successor counts for every context up to ``max_order`` symbols.

    Each message is counted on its own: a context occurrence contributes a
    successor count only when a symbol follows it inside the same message.
    ``add_k > 0`` smooths the successor distribution over the whole alphabet.
    """

    def __init__(self, max_order: int | None = None, add_k: float = 0.0, alphabet: Sequence[int] | None = None):
        if max_order is not None and max_order < 0:
            raise ValueError("max_order must be non-negative")
        if add_k < 0:
            raise ValueError("add_k must be non-negative")
        if add_k > 0 and alphabet is None:
            raise ValueError("add-k smoothing needs the alphabet")
        self.max_order = max_order
        self.add_k = add_k
        self.alphabet = None if alphabet is None else tuple(alphabet)
        self.counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)

    def fit(self, messages) -> "NGramModel":
        self.counts = defaultdict(Counter)
        for m in messages:
            m = tuple(m)
            for j in range(len(m)):
                top = j if self.max_order is None else min(j, self.max_order)
                for n in range(top + 1):
                    self.counts[m[j - n : j]][m[j]] += 1
        return self

    def successor_distribution(self, context) -> dict[int, float]:
        context = tuple(context)
        c = self.counts.get(context)
        if not c:
            raise UnseenContextError(context)
        if self.add_k > 0:
            total = sum(c.values()) + self.add_k * len(self.alphabet)
            return {a: (c.get(a, 0) + self.add_k) / total for a in self.alphabet}
        total = sum(c.values())
        return {a: k / total for a, k in c.items()}

    def context_count(self, context) -> int:
        c = self.counts.get(tuple(context))
        return sum(c.values()) if c else 0


def branching_entropy(model: NGramModel, context) -> float:
    """Entropy in bits of the next symbol after ``context``."""
    probs = np.array(list(model.successor_distribution(context).values()))
    probs = probs[probs > 0]
    return float(max(0.0, -(probs * np.log2(probs)).sum()))


def detect_boundaries(model: NGramModel, message, threshold: float = DEFAULT_THRESHOLD) -> list[int]:
    """Boundary positions of one message by the HAS scan.

    A boundary ``k`` splits the message into ``message[:k]`` and
    ``message[k:]``.  The scan grows a window ``message[i:i+w]`` from each
    start ``i`` and marks ``i + w`` whenever branching entropy rises by more
    than ``threshold`` over the one-shorter window.  A context the model
    never saw (possible only for messages outside the fitted corpus) ends the
    growth of the current window.
    """
    s = tuple(message)
    n = len(s)
    i, w = 0, 1
    boundaries: set[int] = set()
    while i < n:
        if w > 1:
            try:
                rise = branching_entropy(model, s[i : i + w]) - branching_entropy(model, s[i : i + w - 1])
            except UnseenContextError:
                # only for messages outside the fitted corpus: stop growing this window
                i, w = i + 1, 1
                continue
            if rise > threshold:
                boundaries.add(i + w)
        if i + w < n - 1:
            w += 1
        else:
            i += 1
            w = 1
    return sorted(boundaries)


def segment(message, boundaries) -> list[tuple[int, ...]]:
    cuts = [0, *boundaries, len(message)]
    return [tuple(message[a:b]) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


@dataclass
class SegmentationResult:
    boundaries: list[list[int]]
    segments: list[list[tuple[int, ...]]]
    threshold: float


def segment_corpus(messages, threshold: float = DEFAULT_THRESHOLD, strip_eos: bool = False, add_k: float = 0.0,
                   alphabet=None, max_order: int | None = None) -> SegmentationResult:
    msgs = _prepare(messages, strip_eos)
    model = NGramModel(max_order=max_order, add_k=add_k, alphabet=alphabet).fit(msgs)
    bounds = [detect_boundaries(model, m, threshold) for m in msgs]
    return SegmentationResult(bounds, [segment(m, b) for m, b in zip(msgs, bounds)], threshold)


def criteria_stats(segmentation: SegmentationResult) -> tuple[float, int]:
    """``(n_bou, n_seg)``: mean boundaries per message and distinct segment count."""
    n_bou = float(np.mean([len(b) for b in segmentation.boundaries]))
    n_seg = len({seg for segs in segmentation.segments for seg in segs})
    return n_bou, n_seg


def _cyclic_counts(messages, order: int) -> Counter:
    c: Counter = Counter()
    for m in messages:
        L = len(m)
        for j in range(L):
            c[tuple(m[(j + k) % L] for k in range(order))] += 1
    return c


def conditional_entropy(messages, n: int, mode: str = "cyclic") -> float:
    """``Σ_{|s|=n} P(s) BE(s)`` in bits.

    ``mode="cyclic"`` counts n-grams around each message read as a cycle,
    which makes the counts shift-consistent, so the value is non-increasing
    in ``n``.  ``mode="message"`` uses the same per-message counts as
    :class:`NGramModel`, for which monotonicity can fail on short messages.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    msgs = [tuple(m) for m in messages if len(m) > 0]
    if mode == "cyclic":
        joint = _cyclic_counts(msgs, n + 1)
    elif mode == "message":
        joint = Counter(m[j : j + n + 1] for m in msgs for j in range(len(m) - n))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    total = sum(joint.values())
    if total == 0:
        raise UnseenContextError(f"no contexts of length {n}")
    ctx: Counter = Counter()
    for gram, k in joint.items():
        ctx[gram[:-1]] += k
    h = 0.0
    for gram, k in joint.items():
        h -= (k / total) * math.log2(k / ctx[gram[:-1]])
    return max(0.0, h)


@dataclass
class ZLACurve:
    ranks: np.ndarray  # 1-based frequency rank per object
    lengths: np.ndarray  # message length per rank
    centers: np.ndarray  # rank at the center of each moving-average window
    smoothed: np.ndarray
    spearman: float | None  # Spearman(rank, raw length); None if undefined


def zla_curve(lengths, frequencies, window: int = ZLA_WINDOW) -> ZLACurve:
    """Message length ordered by descending object frequency, with a centered moving average."""
    lengths = np.asarray(lengths, dtype=np.float64)
    frequencies = np.asarray(frequencies, dtype=np.float64)
    if lengths.shape != frequencies.shape:
        raise ValueError("lengths and frequencies must align")
    if window < 1:
        raise ValueError("window must be positive")
    if window > len(lengths):
        raise ValueError(f"window {window} exceeds series length {len(lengths)}")
    order = np.argsort(-frequencies, kind="stable")
    by_rank = lengths[order]
    ranks = np.arange(1, len(by_rank) + 1, dtype=np.float64)
    smoothed = np.convolve(by_rank, np.ones(window) / window, mode="valid")
    centers = ranks[: len(smoothed)] + (window - 1) / 2.0
    try:
        rho = spearman(ranks, by_rank)
    except UndefinedCorrelationError:
        rho = None
    return ZLACurve(ranks, by_rank, centers, smoothed, rho)


@dataclass
class MetricsReport:
    c_topsim: float | None
    w_topsim: float | None
    delta_wc: float | None
    n_bou: float
    n_seg: int
    threshold: float
    zla_spearman: float | None = None
    zla_curve: ZLACurve | None = field(default=None, repr=False)
    boundaries: list[list[int]] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("zla_curve")
        d.pop("boundaries")
        return d


def analyze_corpus(objects, messages, threshold: float = DEFAULT_THRESHOLD, strip_eos: bool = False,
                   add_k: float = 0.0, alphabet=None, frequencies=None, window: int = ZLA_WINDOW) -> MetricsReport:
    """All criteria statistics for one language; undefined TopSims are reported as ``None``."""
    seg = segment_corpus(messages, threshold, strip_eos, add_k, alphabet)
    n_bou, n_seg = criteria_stats(seg)
    try:
        c = topsim(objects, messages, "character", strip_eos=strip_eos)
    except UndefinedCorrelationError:
        c = None
    try:
        w = topsim(objects, messages, "word", segmentation=seg.segments)
    except UndefinedCorrelationError:
        w = None
    delta = None if c is None or w is None else w - c
    curve = None
    if frequencies is not None:
        curve = zla_curve([len(m) for m in _prepare(messages, strip_eos)], frequencies, min(window, len(messages)))
    return MetricsReport(c, w, delta, n_bou, n_seg, threshold, curve.spearman if curve else None, curve, seg.boundaries)
