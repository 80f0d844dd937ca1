import numpy as np
import pytest

from helpers import FixedPolicy
from siggame.game import (
    EOS,
    CorpusFormatError,
    GameConfig,
    ObjectDistribution,
    all_objects,
    enumerate_messages,
    index_to_object,
    object_to_index,
    read_corpus,
    rollout_greedy,
    rollout_sample,
    sample_object,
    score_messages,
    validate_message,
    write_corpus,
)


def test_config_validation():
    with pytest.raises(ValueError):
        GameConfig(2, 2, 2, 4)
    with pytest.raises(ValueError):
        GameConfig(2, 2, 3, 0)
    assert GameConfig(2, 2, 5, 3).gamma == pytest.approx(np.log(4))


def test_message_validation():
    cfg = GameConfig(1, 2, 4, 3)
    validate_message((1, 3, 0), cfg)
    for bad in [(), (1, 2), (0, 1, 0), (1, 4, 0), (1, 1, 1, 0)]:
        with pytest.raises(ValueError):
            validate_message(bad, cfg)


def test_uniform_object_sampling_monte_carlo():
    dist = ObjectDistribution(2, 2)
    idx = dist.sample_indices(np.random.default_rng(0), 10**5)
    counts = np.bincount(idx, minlength=4)
    sigma = np.sqrt(10**5 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 25_000) < 3 * sigma)


def test_power_law_probabilities():
    np.testing.assert_allclose(ObjectDistribution(1, 3, "power-law").probs, [6 / 11, 3 / 11, 2 / 11], rtol=1e-14)
    assert ObjectDistribution(1, 100, "power-law").probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_single_object_support():
    dist = ObjectDistribution(1, 1)
    assert all(sample_object(dist, np.random.default_rng(s)) == (1,) for s in range(5))


def test_object_index_round_trip():
    objs = all_objects(3, 4)
    assert objs.shape == (64, 3)
    np.testing.assert_array_equal(object_to_index(objs, 4), np.arange(64))
    np.testing.assert_array_equal(index_to_object(np.arange(64), 3, 4), objs)


def test_certain_eos_policy():
    ro = rollout_sample(FixedPolicy([1.0, 1e-300, 1e-300]), np.zeros((3, 1)), 5, np.random.default_rng(0))
    assert ro.message_list() == [(EOS,)] * 3
    np.testing.assert_array_equal(ro.total_log_prob().data, 0.0)


def test_uniform_policy_geometric_lengths():
    A, L = 4, 40
    ro = rollout_sample(FixedPolicy(np.full(A, 1 / A)), np.zeros((20_000, 1)), L, np.random.default_rng(1))
    # geometric with p = 1/|A|: mean |A|, variance (1-p)/p^2
    se = np.sqrt((1 - 1 / A) * A**2 / 20_000)
    assert abs(ro.lengths.mean() - A) < 4 * se


def test_forced_eos_at_max_len():
    ro = rollout_sample(FixedPolicy([1e-9, 0.5, 0.5 - 1e-9]), np.zeros((50, 1)), 3, np.random.default_rng(2))
    for m in ro.message_list():
        assert len(m) <= 3 and m[-1] == EOS
    forced = ro.lengths == 3
    assert forced.any()
    # the forced step is deterministic: log-prob and entropy 0
    np.testing.assert_array_equal(ro.log_probs.data[forced, 2], 0.0)
    np.testing.assert_array_equal(ro.entropies.data[forced, 2], 0.0)


def test_greedy_tie_breaks_to_eos():
    ro = rollout_greedy(FixedPolicy(np.full(5, 0.2)), np.zeros((2, 1)), 6)
    assert ro.message_list() == [(EOS,), (EOS,)]


def test_greedy_deterministic_policy_matches_sample():
    pol = FixedPolicy([1e-300, 1.0, 1e-300])
    g = rollout_greedy(pol, np.zeros((2, 1)), 4).message_list()
    s = rollout_sample(pol, np.zeros((2, 1)), 4, np.random.default_rng(0)).message_list()
    assert g == s == [(1, 1, 1, 0)] * 2


def test_sampled_log_probs_match_teacher_forcing():
    pol = FixedPolicy([0.3, 0.5, 0.2])
    ro = rollout_sample(pol, np.zeros((200, 1)), 5, np.random.default_rng(3))
    scored = score_messages(pol, np.zeros((200, 1)), ro.message_list(), 5)
    np.testing.assert_allclose(ro.total_log_prob().data, scored.total_log_prob().data, atol=1e-12)


def test_enumeration_examples():
    assert enumerate_messages(GameConfig(1, 1, 3, 2)) == [(0,), (1, 0), (2, 0)]
    assert len(enumerate_messages(GameConfig(1, 1, 3, 3))) == 7
    assert len(enumerate_messages(GameConfig(1, 1, 9, 2))) == 9


@pytest.mark.parametrize("A", [3, 4, 5])
@pytest.mark.parametrize("L", range(1, 9))
def test_enumeration_count_closed_form(A, L):
    msgs = enumerate_messages(GameConfig(1, 1, A, L))
    assert len(msgs) == sum((A - 1) ** (l - 1) for l in range(1, L + 1))
    assert len(set(msgs)) == len(msgs)


def test_enumeration_guard():
    with pytest.raises(ValueError, match="limit"):
        enumerate_messages(GameConfig(1, 1, 9, 32))


def test_corpus_round_trip(tmp_path):
    objs = np.array([[0, 2], [1, 0]])
    msgs = [(1, 2, 0), (0,)]
    write_corpus(tmp_path / "c.jsonl", objs, msgs)
    assert '"object": [1, 3]' in (tmp_path / "c.jsonl").read_text()
    o2, m2 = read_corpus(tmp_path / "c.jsonl")
    np.testing.assert_array_equal(o2, objs)
    assert m2 == msgs


def test_corpus_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"object": [1], "message": [1, 0]}\n{"object": [1], "message": [1, 2]}\n')
    with pytest.raises(CorpusFormatError, match=":2:"):
        read_corpus(p)
    p.write_text("not json\n")
    with pytest.raises(CorpusFormatError, match=":1:"):
        read_corpus(p)
