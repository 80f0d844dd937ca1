import math

import numpy as np
import pytest

from helpers import tiny_agents
from siggame import autodiff as ad
from siggame import nn
from siggame.game import all_objects
from siggame.objectives import (
    BetaSchedule,
    ObjectiveSpec,
    TrainState,
    baseline_loss,
    exact_objective,
    exact_terms,
    initial_train_state,
    rewo_steps_to_one,
    rewo_update,
    surrogate_loss,
)
from siggame.training import batch_losses

OBJS = all_objects(1, 2)
PROBS = np.array([0.4, 0.6])


def flat(grads):
    return np.concatenate([g.ravel() for g in grads])


def model_params(agents):
    return [t for k, t in agents.named_parameters().items() if not k.startswith("baseline")]


def mc_gradients(agents, spec, beta, params, n_batches, batch, seed, use_baseline=True):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        idx = rng.choice(len(OBJS), size=batch, p=PROBS)
        res = batch_losses(agents, spec, beta, OBJS[idx], rng, use_baseline=use_baseline)
        out.append(flat(ad.backward(ad.neg(res.surrogate.loss), params)))
    return np.array(out)


def assert_unbiased(agents, spec, beta, n_batches=200, batch=250, seed=0, use_baseline=True):
    params = model_params(agents)
    exact = flat(ad.backward(exact_objective(spec, agents.sender, agents.receiver, OBJS, PROBS, beta), params))
    est = mc_gradients(agents, spec, beta, params, n_batches, batch, seed, use_baseline)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    mean = est.mean(axis=0)
    bad = np.abs(mean - exact) > 3 * se + 1e-12
    assert not bad.any(), f"{bad.sum()} coordinates outside 3 SE"


class TestSpec:
    def test_fields_per_kind(self):
        with pytest.raises(ValueError):
            ObjectiveSpec("conv", entreg=1.0, alpha=0.5)
        with pytest.raises(ValueError):
            ObjectiveSpec("elbo_alpha", alpha=None)
        with pytest.raises(ValueError):
            ObjectiveSpec("ours", entreg=1.0)
        with pytest.raises(ValueError):
            ObjectiveSpec("nope")
        with pytest.raises(ValueError):
            BetaSchedule.rewo(kappa=0.0)

    def test_round_trip(self):
        for spec in (ObjectiveSpec.conv(), ObjectiveSpec.conv_alpha(0.5), ObjectiveSpec.elbo_alpha(1.0),
                     ObjectiveSpec.ours()):
            assert ObjectiveSpec.from_dict(spec.to_dict()) == spec

    def test_ours_defaults_to_rewo(self):
        s = ObjectiveSpec.ours().beta
        assert (s.kind, s.kappa, s.beta0, s.rate, s.ema_decay) == ("rewo", 0.3, 1e-3, 0.01, 0.99)


class TestRewo:
    sched = BetaSchedule.rewo()

    def test_high_error_keeps_beta(self):
        st = initial_train_state(ObjectiveSpec.ours(self.sched))
        for _ in range(500):
            st = rewo_update(st, 0.5, self.sched)
        assert st.beta == 1e-3 and st.step == 500

    def test_low_error_reaches_one(self):
        st = initial_train_state(ObjectiveSpec.ours(self.sched))
        n, betas = 0, [st.beta]
        while st.beta < 1.0:
            st = rewo_update(st, 0.01, self.sched)
            betas.append(st.beta)
            n += 1
        assert n == rewo_steps_to_one(self.sched) == math.ceil(math.log(1000) / math.log(1.01))
        for _ in range(10):
            st = rewo_update(st, 0.01, self.sched)
            betas.append(st.beta)
        assert max(betas) == 1.0 and all(b >= a for a, b in zip(betas, betas[1:]))

    def test_ema(self):
        st = rewo_update(TrainState(beta=0.1), 2.0, self.sched)
        assert st.recon_ema == 2.0
        st = rewo_update(st, 1.0, self.sched)
        assert st.recon_ema == pytest.approx(0.99 * 2 + 0.01)
        with pytest.raises(ValueError):
            rewo_update(st, -1.0, self.sched)

    def test_mixed_stream_monotone(self):
        rng = np.random.default_rng(0)
        st = TrainState(beta=1e-3)
        prev = st.beta
        for e in rng.uniform(0, 0.6, size=2000):
            st = rewo_update(st, e, self.sched)
            assert prev <= st.beta <= 1.0
            prev = st.beta

    def test_fixed_schedule(self):
        sched = BetaSchedule("fixed", beta=0.4)
        st = initial_train_state(ObjectiveSpec.ours(sched))
        assert rewo_update(st, 0.0, sched).beta == 0.4


class TestExact:
    def test_sender_equal_to_prior_has_zero_kl(self):
        a = tiny_agents(seed=5)
        for t in a.sender.object_emb:
            t.data[:] = 0.0
        r = a.receiver.core_parameters()
        for name, t in a.sender.core_parameters().items():
            t.data = r[name].data.copy()
        terms = exact_terms(a.sender, a.receiver, OBJS, PROBS)
        kl = -float(terms.neg_log_s.data) - float(terms.log_prior.data)
        assert abs(kl) < 1e-12
        j = exact_objective(ObjectiveSpec.ours(BetaSchedule("fixed", 1.0)), a.sender, a.receiver, OBJS, PROBS)
        assert float(j.data) == pytest.approx(float(terms.recon.data), abs=1e-12)

    def test_surprisal_rewrite(self):
        a = tiny_agents(seed=6)
        t = exact_terms(a.sender, a.receiver, OBJS, PROBS)
        j = exact_objective(ObjectiveSpec.ours(), a.sender, a.receiver, OBJS, PROBS, beta=1.0)
        rhs = float(t.expect(ad.add(t.log_r, t.log_prior_pairs)).data) + float(t.entropy.data)
        assert abs(float(j.data) - rhs) < 1e-9

    def test_elbo_uniform_offset(self):
        a = tiny_agents(seed=7)
        t = exact_terms(a.sender, a.receiver, OBJS, PROBS)
        j = exact_objective(ObjectiveSpec.elbo_alpha(0.0), a.sender, a.receiver, OBJS, PROBS, beta=1.0)
        conv = exact_objective(ObjectiveSpec.conv(), a.sender, a.receiver, OBJS, PROBS)
        assert float(j.data) == pytest.approx(float(conv.data) + float(t.entropy.data) - math.log(3), abs=1e-12)

    def test_entropy_chain_rule(self):
        a = tiny_agents(seed=8)
        t = exact_terms(a.sender, a.receiver, OBJS, PROBS)
        assert float(t.entropy.data) == pytest.approx(float(t.neg_log_s.data), abs=1e-12)
        assert float(ad.reduce_sum(t.weights).data) == pytest.approx(1.0, abs=1e-12)

    def test_equivalence_gradients(self):
        from siggame.verify import check_equivalences

        for r in check_equivalences():
            assert r.passed, r


class TestSurrogate:
    def test_missing_prior(self):
        a = tiny_agents()
        x = ad.constant(np.zeros(2))
        s = ad.constant(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="prior"):
            surrogate_loss(ObjectiveSpec.ours(), 1.0, x, s, s, np.ones((2, 2)))
        with pytest.raises(ValueError, match="Tensor"):
            surrogate_loss(ObjectiveSpec.ours(), 1.0, x, s, s, np.ones((2, 2)), prior_logp=np.zeros((2, 2)))

    def test_returns_by_kind(self):
        log_r = ad.constant(np.array([-1.0]))
        log_s = ad.constant(np.array([[-0.5, -0.25, 0.0]]))
        ent = ad.constant(np.zeros((1, 3)))
        mask = np.array([[1.0, 1.0, 0.0]])
        prior = ad.constant(np.array([[-1.0, -2.0, 0.0]]))
        r = surrogate_loss(ObjectiveSpec.conv(), 1.0, log_r, log_s, ent, mask).returns
        np.testing.assert_allclose(r, [[-1, -1, 0]])
        r = surrogate_loss(ObjectiveSpec.conv_alpha(0.5), 1.0, log_r, log_s, ent, mask).returns
        np.testing.assert_allclose(r, [[-2.0, -1.5, 0]])
        r = surrogate_loss(ObjectiveSpec.ours(), 0.5, log_r, log_s, ent, mask, prior).returns
        # step rewards β(log P - log S) = (-0.25, -0.875)
        np.testing.assert_allclose(r, [[-2.125, -1.875, 0]])

    def test_entropy_regularizer_per_step_average(self):
        log_r = ad.constant(np.zeros(2))
        log_s = ad.constant(np.zeros((2, 3)))
        ent = ad.constant(np.array([[1.0, 2.0, 9.0], [3.0, 3.0, 3.0]]))
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
        res = surrogate_loss(ObjectiveSpec.conv(entreg=0.5), 1.0, log_r, log_s, ent, mask)
        assert float(res.loss.data) == pytest.approx(-0.5 * (1.5 + 3.0) / 2)

    def test_beta_zero_gives_prior_no_gradient(self):
        a = tiny_agents(seed=1)
        res = batch_losses(a, ObjectiveSpec.ours(), 0.0, OBJS[[0, 1, 1, 0]], np.random.default_rng(0),
                           use_baseline=False)
        lm = [a.receiver.out_w, a.receiver.out_b]
        for g in ad.backward(res.surrogate.loss, lm):
            assert np.all(g == 0)
        head = [a.receiver.head_w[0]]
        assert np.any(ad.backward(res.surrogate.loss, head)[0] != 0)

    def test_baseline_loss_only_trains_baseline(self):
        a = tiny_agents(seed=2)
        res = batch_losses(a, ObjectiveSpec.ours(), 0.5, OBJS[[0, 1, 0]], np.random.default_rng(1))
        grads = ad.backward(res.baseline_loss, model_params(a))
        assert all(np.all(g == 0) for g in grads)
        assert any(np.any(g != 0) for g in ad.backward(res.baseline_loss, list(a.baseline.parameters().values())))

    def test_baseline_fitted_to_constant(self):
        b = ad.constant(np.full((2, 3), -0.7))
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
        loss = baseline_loss(np.full((2, 3), -0.7) * mask, nn.parameter(b.data), mask)
        assert float(loss.data) == 0.0

    def test_baseline_step_decreases_loss(self):
        a = tiny_agents(seed=3)
        rng = np.random.default_rng(4)
        res = batch_losses(a, ObjectiveSpec.ours(), 0.5, OBJS[[0, 1, 1]], rng)
        params = list(a.baseline.parameters().values())
        before = float(res.baseline_loss.data)
        grads = ad.backward(res.baseline_loss, params)
        for p, g in zip(params, grads):
            p.data = p.data - 1e-2 * g
        # same seed, so the same rollout
        res2 = batch_losses(a, ObjectiveSpec.ours(), 0.5, OBJS[[0, 1, 1]], np.random.default_rng(4))
        assert float(res2.baseline_loss.data) < before


class TestUnbiased:
    @pytest.mark.parametrize("spec,beta", [
        (ObjectiveSpec.ours(), 0.7),
        (ObjectiveSpec.elbo_alpha(math.log(2)), 0.7),
        (ObjectiveSpec.conv_alpha(0.3, entreg=0.0), 1.0),
        (ObjectiveSpec.conv(entreg=0.0), 1.0),
    ], ids=["ours", "elbo_alpha", "conv_alpha", "conv"])
    def test_surrogate_gradient_matches_exact(self, spec, beta):
        assert_unbiased(tiny_agents(seed=11), spec, beta)

    def test_zero_baseline_unbiased(self):
        assert_unbiased(tiny_agents(seed=11), ObjectiveSpec.ours(), 0.7, use_baseline=False)

    def test_shifted_baseline_unbiased(self):
        a = tiny_agents(seed=11)
        a.baseline.b2.data = a.baseline.b2.data + 5.0
        assert_unbiased(a, ObjectiveSpec.ours(), 0.7, seed=1)

    def test_fitted_baseline_reduces_variance(self):
        a = tiny_agents(seed=12)
        spec = ObjectiveSpec.ours()
        rng = np.random.default_rng(0)
        bparams = list(a.baseline.parameters().values())
        adam = nn.AdamState(lr=1e-2)
        for _ in range(300):
            res = batch_losses(a, spec, 0.7, OBJS[rng.choice(2, size=64, p=PROBS)], rng)
            nn.adam_step(bparams, ad.backward(res.baseline_loss, bparams), adam)
        sender = list(a.sender.parameters().values())
        with_b = mc_gradients(a, spec, 0.7, sender, 400, 4, seed=3, use_baseline=True)
        without = mc_gradients(a, spec, 0.7, sender, 400, 4, seed=3, use_baseline=False)
        assert with_b.var(axis=0).sum() < without.var(axis=0).sum()
