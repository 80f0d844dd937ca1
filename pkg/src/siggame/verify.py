"""Fast oracle suite behind ``siggame verify``.

Every check compares an implementation against an independent route to the
same number: finite differences, brute-force enumeration, or hand counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .agents import Agents
from .game import GameConfig, all_objects, enumerate_messages, pad_messages, score_messages
from .metrics import (
    NGramModel,
    branching_entropy,
    conditional_entropy,
    detect_boundaries,
    spearman,
    topsim,
)
from .objectives import BetaSchedule, ObjectiveSpec, exact_objective, exact_terms, rewo_steps_to_one, rewo_update
from .objectives import initial_train_state
from .priors import AnalyticPrior, monkey_limit_gap, normalizer

FD_TOLERANCE = 1e-4
EQUIVALENCE_TOLERANCE = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def tiny_agents(seed: int = 0, dropout: float = 0.0, n_val: int = 2) -> Agents:
    """|A| = 3, max_len = 2, hidden 4: three messages, fully enumerable."""
    return Agents(GameConfig(1, n_val, 3, 2), hidden=4, emb=4, dropout=dropout, seed=seed)


def _flat_grad(value, params) -> np.ndarray:
    return np.concatenate([g.ravel() for g in ad.backward(value, params)])


def check_gradients() -> list[CheckResult]:
    rng = np.random.default_rng(0)
    out = []
    x = rng.normal(size=(3, 5))
    gain, bias = nn.parameter(rng.normal(size=5)), nn.parameter(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    cases = {
        "layer_norm": lambda: ad.reduce_sum(ad.mul(nn.layer_norm(xt, gain, bias), w)),
    }
    xt = nn.parameter(x)
    gru = nn.GRUParams.init(rng, 5, 4)
    for t in gru.tensors().values():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    ht = nn.parameter(rng.normal(size=(3, 4)))
    w4 = rng.normal(size=(3, 4))
    cases["gru_cell"] = lambda: ad.reduce_sum(ad.mul(nn.gru_cell(xt, ht, gru), w4))
    lw, lb = nn.parameter(rng.normal(size=(5, 4))), nn.parameter(rng.normal(size=4))
    cases["linear+log_softmax"] = lambda: ad.reduce_sum(ad.mul(ad.log_softmax(nn.linear(xt, lw, lb)), w4))
    leaves = {
        "layer_norm": [xt, gain, bias],
        "gru_cell": [xt, ht, *gru.tensors().values()],
        "linear+log_softmax": [xt, lw, lb],
    }
    for name, f in cases.items():
        err = ad.finite_difference_check(f, leaves[name])
        out.append(CheckResult(f"fd:{name}", err < FD_TOLERANCE, f"max rel err {err:.2e}"))

    agents = Agents(GameConfig(2, 3, 4, 4), hidden=6, emb=3, dropout=0.1, seed=1)
    objects = np.array([[0, 1], [2, 2], [1, 0]])
    messages = [(1, 2, 0), (3, 0), (1, 1, 2, 0)]
    padded, lengths = pad_messages(messages)
    masks = agents.receiver.sample_masks(3, np.random.default_rng(2))

    def sender_f():
        return ad.reduce_sum(score_messages(agents.sender, objects, messages, 4).total_log_prob())

    def receiver_f():
        steps, final = agents.receiver.read(padded, lengths, masks)
        return ad.add(ad.reduce_sum(agents.receiver.object_log_prob(final, objects)), ad.reduce_sum(steps))

    for name, f, params in (
        ("sender_logprob", sender_f, agents.sender.parameters()),
        ("receiver_logprob+prior", receiver_f, agents.receiver.parameters()),
    ):
        err = ad.finite_difference_check(f, list(params.values()))
        out.append(CheckResult(f"fd:{name}", err < FD_TOLERANCE, f"max rel err {err:.2e}"))
    return out


def check_priors() -> list[CheckResult]:
    worst = 0.0
    for a_size in (3, 4, 5):
        for L in range(1, 9):
            cfg = GameConfig(1, 2, a_size, L)
            lengths = np.array([len(m) for m in enumerate_messages(cfg)])
            for alpha in (0.5, 1.0, 2.0):
                brute = math.fsum(np.exp(-alpha * lengths))
                worst = max(worst, abs(normalizer(cfg, alpha) - brute))
    out = [CheckResult("prior:normalizer_closed_form", worst < 1e-12, f"max abs err {worst:.1e}")]
    cfg = GameConfig(1, 2, 5, 8)
    gaps = monkey_limit_gap(cfg, math.log(4) + 0.3, range(1, 21))
    out.append(CheckResult("prior:monkey_gap_decreasing", bool(np.all(np.diff(gaps) < 0)), f"gap at L=20 {gaps[-1]:.2e}"))
    total = AnalyticPrior("monkey", cfg, 2.0).step_distribution().sum()
    out.append(CheckResult("prior:monkey_step_sum", abs(total - 1.0) < 1e-15, f"sum {total!r}"))
    return out


def check_normalization() -> list[CheckResult]:
    agents = tiny_agents(seed=3)
    objs = all_objects(1, 2)
    terms = exact_terms(agents.sender, agents.receiver, objs, np.full(len(objs), 0.5))
    mass = float(terms.weights.data.sum())
    msgs = enumerate_messages(agents.config)
    padded, lengths = pad_messages(msgs)
    steps, _ = agents.receiver.read(padded, lengths)
    prior_mass = float(np.exp(steps.data.sum(axis=1)).sum())
    chain = abs(float(terms.entropy.data) - float(terms.neg_log_s.data))
    return [
        CheckResult("policy:sender_normalized", abs(mass - 1) < 1e-12, f"mass {mass!r}"),
        CheckResult("policy:prior_normalized", abs(prior_mass - 1) < 1e-12, f"mass {prior_mass!r}"),
        CheckResult("policy:entropy_chain_rule", chain < 1e-12, f"diff {chain:.1e}"),
    ]


def check_equivalences() -> list[CheckResult]:
    agents = tiny_agents(seed=4)
    objs = all_objects(1, 2)
    probs = np.array([0.3, 0.7])
    params = [t for k, t in agents.named_parameters().items() if not k.startswith("baseline")]
    alpha = 0.8
    cfg = agents.config
    out = []

    def grad(which):
        terms = exact_terms(agents.sender, agents.receiver, objs, probs)
        if which == "conv":
            return _flat_grad(exact_objective(ObjectiveSpec.conv(), agents.sender, agents.receiver, objs, probs), params)
        if which == "joint_unif":
            lp = AnalyticPrior("uniform", cfg).log_prob_length(terms.lengths)
            return _flat_grad(terms.expect(ad.add(terms.log_r, lp)), params)
        if which == "conv_alpha":
            spec = ObjectiveSpec.conv_alpha(alpha)
            return _flat_grad(exact_objective(spec, agents.sender, agents.receiver, objs, probs), params)
        if which == "joint_alpha":
            lp = AnalyticPrior("exponential", cfg, alpha).log_prob_length(terms.lengths)
            return _flat_grad(terms.expect(ad.add(terms.log_r, lp)), params)
        if which == "elbo_alpha":
            spec = ObjectiveSpec.elbo_alpha(alpha)
            return _flat_grad(exact_objective(spec, agents.sender, agents.receiver, objs, probs, beta=1.0), params)
        if which == "conv_alpha+H":
            spec = ObjectiveSpec.conv_alpha(alpha)
            j = exact_objective(spec, agents.sender, agents.receiver, objs, probs)
            return _flat_grad(ad.add(j, terms.entropy), params)
        raise ValueError(which)

    for label, a, b in (
        ("equiv:conv=joint_unif", "conv", "joint_unif"),
        ("equiv:conv_alpha=joint_alpha", "conv_alpha", "joint_alpha"),
        ("equiv:elbo_alpha=conv_alpha+H", "elbo_alpha", "conv_alpha+H"),
    ):
        diff = float(np.max(np.abs(grad(a) - grad(b))))
        out.append(CheckResult(label, diff < EQUIVALENCE_TOLERANCE, f"max abs diff {diff:.1e}"))
    return out


def reference_spearman(x, y) -> float:
    """Quadratic-time Spearman: average ranks by pairwise counting, then Pearson."""
    x, y = list(map(float, x)), list(map(float, y))

    def ranks(v):
        return [sum(1 for u in v if u < a) + (sum(1 for u in v if u == a) + 1) / 2.0 for a in v]

    rx, ry = ranks(x), ranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


def check_metrics() -> list[CheckResult]:
    out = []
    be = branching_entropy(NGramModel().fit([(1, 2), (1, 3)]), (1,))
    out.append(CheckResult("metrics:branching_entropy_hand", abs(be - 1.0) < 1e-15, f"BE(a) = {be}"))
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        x = rng.integers(0, 4, size=30)
        y = rng.integers(0, 6, size=30)
        worst = max(worst, abs(spearman(x, y) - reference_spearman(x, y)))
    out.append(CheckResult("metrics:spearman_reference", worst < 1e-12, f"max abs err {worst:.1e}"))
    objs = all_objects(2, 3)
    msgs = [(int(a) + 1, int(b) + 1, 0) for a, b in objs]
    c = topsim(objs, msgs)
    w = topsim(objs, msgs, "word", segmentation=[[(s,) for s in m] for m in msgs])
    out.append(CheckResult("metrics:topsim_bijective", abs(c - 1.0) < 1e-12, f"C-TopSim {c}"))
    out.append(CheckResult("metrics:wtopsim_trivial_segmentation", w == c, f"W {w} vs C {c}"))
    corpus = [(1, 2, 3, 4, 0), (1, 2, 4, 4, 0), (3, 3, 0)]
    bounds = detect_boundaries(NGramModel().fit(corpus), corpus[0], float("inf"))
    out.append(CheckResult("metrics:infinite_threshold", bounds == [], f"boundaries {bounds}"))
    mono = True
    for _ in range(20):
        msgs = [tuple(rng.integers(1, 4, size=rng.integers(0, 6))) + (0,) for _ in range(15)]
        h = [conditional_entropy(msgs, n) for n in range(6)]
        mono &= all(b <= a + 1e-12 for a, b in zip(h, h[1:]))
    out.append(CheckResult("metrics:conditional_entropy_monotone", bool(mono), "20 random corpora"))
    return out


def check_rewo() -> list[CheckResult]:
    sched = BetaSchedule.rewo()
    spec = ObjectiveSpec.ours(sched)
    state = initial_train_state(spec)
    steps = 0
    while state.beta < 1.0:
        state = rewo_update(state, 0.0, sched)
        steps += 1
    expected = rewo_steps_to_one(sched)
    return [CheckResult("rewo:steps_to_one", steps == expected, f"{steps} steps (expected {expected})")]


def run_checks() -> list[CheckResult]:
    results = []
    for group in (check_gradients, check_priors, check_normalization, check_equivalences, check_metrics, check_rewo):
        try:
            results.extend(group())
        except Exception as exc:  # a crashing oracle is a failed oracle
            results.append(CheckResult(group.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
