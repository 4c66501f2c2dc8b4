"""Batched engine vs per-trajectory engine equivalence tests.

Every check replays identical forced actions through both engines and
demands matching log-quantities and parameter gradients to float64
round-off, so the batched path can stand in for the reference during
long training runs.
"""

import numpy as np
import pytest

from saccade import model as md
from saccade.errors import ConfigurationError
from saccade.fastpath import BatchedEngine
from saccade.glimpse import Action


def make_setup(seed=0, glimpses=3, num_scales=2, batch=3, m=2):
    cfg = md.ModelConfig(glimpses=glimpses, num_classes=4, num_scales=num_scales,
                         retina=5, lowres_side=6, w1=10, w2=9, wq=8, embed_dim=3)
    rng = np.random.default_rng(seed)
    pnet = md.PredictionNetwork(cfg, rng)
    qnet = md.InferenceNetwork(cfg, rng)
    images = rng.random((batch, 20, 20))
    img_idx = np.repeat(np.arange(batch), m)
    labels = rng.integers(cfg.num_classes, size=batch * m)
    scales = (6.0, 14.0)
    engine = BatchedEngine(pnet, scales, qnet)
    return cfg, pnet, qnet, images, img_idx, labels, scales, engine


def reference_trajs(pnet, qnet, images, img_idx, labels, scales, rolls, tau=1.0):
    """Replay the batched actions through the per-trajectory engine."""
    out = []
    t_count, r_count, _ = rolls.locations.shape
    for r in range(r_count):
        env = md.ImageEnv(images[img_idx[r]], scales, pnet.cfg)
        actions = [Action(location=rolls.locations[n, r].copy(),
                          scale_index=int(rolls.scale_indices[n, r]))
                   for n in range(t_count)]
        out.append(md._rollout(pnet, env, None, label=int(labels[r]), qnet=qnet,
                               tau=tau, forced_actions=actions))
    return out


class TestForwardEquivalence:
    @pytest.mark.parametrize("use_q,tau", [(False, 1.0), (True, 1.0), (True, 1.7)])
    def test_log_quantities_match_reference(self, use_q, tau):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        rolls = engine.rollout(images, img_idx, labels, np.random.default_rng(1),
                               tau=tau, use_q=use_q)
        refs = reference_trajs(pnet, qnet, images, img_idx, labels, scales,
                               rolls, tau=tau)
        for r, t in enumerate(refs):
            np.testing.assert_allclose(rolls.step_log_prior[:, r],
                                       t.step_log_prior, atol=1e-10)
            if use_q:
                np.testing.assert_allclose(rolls.step_log_proposal[:, r],
                                           t.step_log_proposal, atol=1e-10)
            assert rolls.log_likelihood[r] == pytest.approx(t.log_likelihood, abs=1e-10)
            np.testing.assert_allclose(rolls.class_probs[r], t.class_probs, atol=1e-12)
            np.testing.assert_allclose(rolls.scale_entropies[:, r],
                                       t.scale_entropies, atol=1e-12)
            np.testing.assert_allclose(rolls.loc_means[:, r], t.loc_means, atol=1e-12)

    def test_prior_sampling_density_matches_replay(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        rolls = engine.rollout(images, img_idx, labels, np.random.default_rng(2))
        np.testing.assert_allclose(rolls.step_log_proposal, rolls.step_log_prior,
                                   atol=1e-12)

    def test_forced_replay_round_trips(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        rolls = engine.rollout(images, img_idx, labels, np.random.default_rng(3),
                               use_q=True)
        again = engine.rollout(images, img_idx, labels,
                               forced=(rolls.locations, rolls.scale_indices),
                               use_q=True)
        np.testing.assert_allclose(again.step_log_prior, rolls.step_log_prior,
                                   atol=1e-12)
        np.testing.assert_allclose(again.step_log_proposal, rolls.step_log_proposal,
                                   atol=1e-12)
        np.testing.assert_allclose(again.log_likelihood, rolls.log_likelihood,
                                   atol=1e-12)

    def test_deterministic_under_seed(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        a = engine.rollout(images, img_idx, labels, np.random.default_rng(4), use_q=True)
        b = engine.rollout(images, img_idx, labels, np.random.default_rng(4), use_q=True)
        np.testing.assert_array_equal(a.locations, b.locations)
        np.testing.assert_array_equal(a.scale_indices, b.scale_indices)

    def test_rejects_bad_configs(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        with pytest.raises(ConfigurationError):
            BatchedEngine(pnet, (6.0,), qnet)
        with pytest.raises(ConfigurationError):
            engine.rollout(images, img_idx, labels, np.random.default_rng(0), tau=0.0)
        with pytest.raises(ConfigurationError):
            engine.rollout(images, img_idx, None, np.random.default_rng(0), use_q=True)
        no_q = BatchedEngine(pnet, scales)
        with pytest.raises(ConfigurationError):
            no_q.rollout(images, img_idx, labels, np.random.default_rng(0), use_q=True)

    def test_scale_frequencies_match_head_distribution(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup(batch=1, m=1)
        rng = np.random.default_rng(5)
        counts = np.zeros(cfg.num_scales)
        n = 3000
        probs_ref = None
        for _ in range(n):
            rolls = engine.rollout(images, img_idx, labels[:1], rng)
            counts[rolls.scale_indices[0, 0]] += 1
            if probs_ref is None:
                z = rolls._cache["p_scale"][0][0]
                probs_ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        freq = counts / n
        assert np.all(np.abs(freq - probs_ref)
                      < 3 * np.sqrt(probs_ref * (1 - probs_ref) / n) + 1e-3)


class TestBackwardEquivalence:
    def test_theta_gradients_match_reference(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        rolls = engine.rollout(images, img_idx, labels, np.random.default_rng(6),
                               use_q=True)
        refs = reference_trajs(pnet, qnet, images, img_idx, labels, scales, rolls)
        grad_rng = np.random.default_rng(7)
        c_lik = grad_rng.standard_normal(len(refs))
        c_prior = grad_rng.standard_normal(len(refs))

        pnet.pv.zero_grad()
        for r, t in enumerate(refs):
            t.grad_theta(float(c_lik[r]), float(c_prior[r]))
        want = pnet.pv.grads.copy()
        pnet.pv.zero_grad()
        engine.backward_theta(rolls, c_lik, c_prior)
        np.testing.assert_allclose(pnet.pv.grads, want, atol=1e-10)
        pnet.pv.zero_grad()

    def test_eta_gradients_match_reference(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        rolls = engine.rollout(images, img_idx, labels, np.random.default_rng(8),
                               use_q=True)
        refs = reference_trajs(pnet, qnet, images, img_idx, labels, scales, rolls)
        coef = np.random.default_rng(9).standard_normal(len(refs))

        qnet.pv.zero_grad()
        for r, t in enumerate(refs):
            t.grad_eta(float(coef[r]))
        want = qnet.pv.grads.copy()
        qnet.pv.zero_grad()
        engine.backward_eta(rolls, coef)
        np.testing.assert_allclose(qnet.pv.grads, want, atol=1e-10)
        qnet.pv.zero_grad()

    def test_exploration_seeds_match_reference(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        rolls = engine.rollout(images, img_idx, labels, np.random.default_rng(10))
        refs = reference_trajs(pnet, qnet, images, img_idx, labels, scales, rolls)
        seed_rng = np.random.default_rng(11)
        loc_seeds = seed_rng.standard_normal(rolls.loc_means.shape)
        ent = 0.37

        pnet.pv.zero_grad()
        for r, t in enumerate(refs):
            t.grad_explore(ent, loc_seeds[:, r])
        want = pnet.pv.grads.copy()
        pnet.pv.zero_grad()
        engine.backward_theta(rolls, np.zeros(len(refs)), np.zeros(len(refs)),
                              entropy_coef=ent, loc_seeds=loc_seeds)
        np.testing.assert_allclose(pnet.pv.grads, want, atol=1e-10)
        pnet.pv.zero_grad()

    def test_eta_requires_inference_pass(self):
        cfg, pnet, qnet, images, img_idx, labels, scales, engine = make_setup()
        no_q = BatchedEngine(pnet, scales)
        rolls = no_q.rollout(images, img_idx, labels, np.random.default_rng(12))
        with pytest.raises(ConfigurationError):
            no_q.backward_eta(rolls, np.ones(len(img_idx)))
