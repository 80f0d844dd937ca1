"""Small policies and instances shared by the tests."""

import numpy as np

from siggame import autodiff as ad
from siggame.agents import Agents
from siggame.game import GameConfig


class FixedPolicy:
    """Same next-symbol distribution at every step, independent of the object."""

    def __init__(self, probs):
        self.logp = np.log(np.asarray(probs, dtype=np.float64))

    def initial_state(self, objects):
        return np.asarray(objects).shape[0]

    def step(self, state, prev):
        return state, ad.constant(np.tile(self.logp, (state, 1)))


def tiny_agents(seed=0, n_val=2, dropout=0.0):
    """|A| = 3, max_len = 2, hidden 4."""
    return Agents(GameConfig(1, n_val, 3, 2), hidden=4, emb=4, dropout=dropout, seed=seed)


def reference_levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def reference_topsim(objects, messages):
    """Pure-Python TopSim: raises ZeroDivisionError when a ranking is constant."""
    from siggame.verify import reference_spearman

    d_obj, d_msg = [], []
    n = len(objects)
    for i in range(n):
        for j in range(i + 1, n):
            d_obj.append(sum(a != b for a, b in zip(objects[i], objects[j])))
            d_msg.append(reference_levenshtein(messages[i], messages[j]))
    return reference_spearman(d_obj, d_msg)


# (corpus, message, threshold, boundaries), each traced by hand through the
# scan; see test_metrics.py for the branching entropies at every step.
HAND_TRACES = [
    ([(1, 2, 3, 4, 1, 2), (1, 2, 3, 5, 1, 2), (1, 2, 3, 6, 1, 2)], (1, 2, 3, 4, 1, 2), 0.0, [3]),
    ([(1, 2, 1, 2), (1, 2, 3, 3), (3, 3, 1, 2), (3, 3, 3, 3)], (1, 2, 3, 3), 0.0, [2]),
    ([(1, 2, 1, 2), (1, 2, 3, 3), (3, 3, 1, 2), (3, 3, 3, 3)], (3, 3, 1, 2), 0.0, [2]),
    ([(1, 2, 1, 2), (1, 2, 3, 3), (3, 3, 1, 2), (3, 3, 3, 3)], (3, 3, 1, 2), 0.3, []),
    ([(1, 2, 3), (1, 2, 4), (5, 1, 2)], (1, 2, 3), 0.0, [2]),
    ([(1, 2, 3), (1, 2, 4), (5, 1, 2)], (5, 1, 2), 0.0, []),
]
