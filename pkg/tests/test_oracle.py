"""Tests for tabular toy worlds and exact-enumeration checks.

Expected constants are computed inline from first principles (explicit
sums over the action space) rather than taken from any sampled run.
"""

import math

import numpy as np
import pytest

from saccade import estimators as est
from saccade import oracle
from saccade.errors import ConfigurationError, EnumerationBudgetError
from saccade.toy import (SequenceProposal, TabularAttentionModel, force_trajectory,
                         make_toy_world, random_toy_world, rollout_toy_prior,
                         rollout_toy_proposal)


@pytest.fixture
def fixture():
    world = make_toy_world(2, 1, [[0.9, 0.1], [0.1, 0.9]])
    theta = TabularAttentionModel.from_tables(world, [0.6, 0.4])
    q = SequenceProposal.uniform(world)
    return world, theta, q


class TestToyWorld:
    def test_sequence_enumeration_count(self):
        world = make_toy_world(3, 2, np.full((3, 2), 0.5), num_glimpses=2)
        seqs = world.sequences()
        assert len(seqs) == (3 * 2) ** 2
        assert len(set(seqs)) == len(seqs)

    def test_enumeration_budget(self):
        world = make_toy_world(10, 8, np.full((10, 2), 0.5))
        with pytest.raises(EnumerationBudgetError):
            world.sequences(budget=10)

    def test_rejects_non_distribution_rows(self):
        with pytest.raises(ConfigurationError):
            make_toy_world(2, 1, [[0.9, 0.3], [0.1, 0.9]])

    def test_likelihood_factorizes_over_glimpses(self):
        world = make_toy_world(2, 1, [[0.8, 0.2], [0.3, 0.7]], num_glimpses=2)
        theta = TabularAttentionModel.from_tables(world, [0.5, 0.5])
        # two glimpses at cells 0 then 1: softmax(log 0.8 + log 0.3, ...)
        t = force_trajectory(theta, 0, (0, 1))
        z = np.log([0.8, 0.2]) + np.log([0.3, 0.7])
        want = z[0] - np.log(np.exp(z).sum())
        assert t.log_likelihood == pytest.approx(want, abs=1e-12)

    def test_prior_log_probs(self, fixture):
        world, theta, _ = fixture
        assert force_trajectory(theta, 0, (0,)).log_prior == pytest.approx(
            math.log(0.6), abs=1e-12)
        assert force_trajectory(theta, 0, (1,)).log_prior == pytest.approx(
            math.log(0.4), abs=1e-12)

    def test_prior_sampling_frequency(self, fixture):
        world, theta, _ = fixture
        rng = np.random.default_rng(0)
        n = 20000
        hits = sum(theta.sample_prior(rng) == (0,) for _ in range(n))
        p = hits / n
        assert abs(p - 0.6) < 3 * math.sqrt(0.6 * 0.4 / n)

    def test_proposal_sampling_matches_table(self, fixture):
        world, theta, q = fixture
        probs = np.array([[0.3, 0.7], [0.5, 0.5]])
        q2 = SequenceProposal.from_probs(world, probs)
        rng = np.random.default_rng(1)
        n = 20000
        hits = sum(q2.sample(0, rng) == (1,) for _ in range(n))
        assert abs(hits / n - 0.7) < 3 * math.sqrt(0.7 * 0.3 / n)
        assert q2.log_prob(0, (1,)) == pytest.approx(math.log(0.7), abs=1e-12)

    def test_rollouts_match_forced_trajectories(self, fixture):
        world, theta, q = fixture
        rng = np.random.default_rng(2)
        t = rollout_toy_proposal(theta, q, 1, rng)
        forced = force_trajectory(theta, 1, tuple(t.actions), q)
        assert t.log_prior == pytest.approx(forced.log_prior, abs=1e-14)
        assert t.log_proposal == pytest.approx(forced.log_proposal, abs=1e-14)
        assert t.log_likelihood == pytest.approx(forced.log_likelihood, abs=1e-14)
        t2 = rollout_toy_prior(theta, 1, rng)
        forced2 = force_trajectory(theta, 1, tuple(t2.actions))
        assert t2.log_weight() == pytest.approx(forced2.log_weight(), abs=1e-14)


class TestExactQuantities:
    def test_marginal_on_fixture(self, fixture):
        world, theta, q = fixture
        ell = oracle.exact_marginal(world, oracle.tabular_forcer(theta), 0)
        assert ell == pytest.approx(math.log(0.6 * 0.9 + 0.4 * 0.1), abs=1e-12)

    def test_marginals_normalize_over_labels(self):
        rng = np.random.default_rng(3)
        world = random_toy_world(rng, num_glimpses=2, num_scales=2)
        theta = TabularAttentionModel.random(world, rng)
        force = oracle.tabular_forcer(theta)
        total = sum(math.exp(oracle.exact_marginal(world, force, y))
                    for y in range(world.num_classes))
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_posterior_on_fixture(self, fixture):
        world, theta, _ = fixture
        post = oracle.exact_posterior(world, oracle.tabular_forcer(theta), 0)
        np.testing.assert_allclose(post, [27 / 29, 2 / 29], atol=1e-12)

    def test_marginal_gradient_against_finite_difference(self, fixture):
        world, theta, _ = fixture
        force = oracle.tabular_forcer(theta)
        grad = oracle.exact_grad_marginal(world, force, 0, theta.pv)
        eps = 1e-6
        for i in range(theta.pv.size):
            theta.pv.values[i] += eps
            up = oracle.exact_marginal(world, oracle.tabular_forcer(theta), 0)
            theta.pv.values[i] -= 2 * eps
            dn = oracle.exact_marginal(world, oracle.tabular_forcer(theta), 0)
            theta.pv.values[i] += eps
            assert grad[i] == pytest.approx((up - dn) / (2 * eps), abs=1e-7)

    def test_variational_bound_below_marginal(self, fixture):
        world, theta, _ = fixture
        force = oracle.tabular_forcer(theta)
        f, _ = oracle.exact_variational_bound_and_grad(world, force, 0, theta.pv)
        assert f == pytest.approx(0.6 * math.log(0.9) + 0.4 * math.log(0.1), abs=1e-12)
        assert f < oracle.exact_marginal(world, force, 0)

    def test_bound_lm_interpolates(self, fixture):
        world, theta, q = fixture
        force = oracle.tabular_forcer(theta, q)
        ell = oracle.exact_marginal(world, force, 0)
        f_under_q = 0.5 * math.log(1.08) + 0.5 * math.log(0.08)
        l1 = oracle.exact_bound_lm(world, force, 0, 1)
        assert l1 == pytest.approx(f_under_q, abs=1e-12)
        prev = l1
        for m in (2, 3, 4):
            lm = oracle.exact_bound_lm(world, force, 0, m)
            assert prev < lm < ell
            prev = lm

    def test_kl_on_fixture(self, fixture):
        world, theta, q = fixture
        force = oracle.tabular_forcer(theta, q)
        post = np.array([27 / 29, 2 / 29])
        want = float(np.sum(post * np.log(post / 0.5)))
        assert oracle.exact_kl(world, force, 0) == pytest.approx(want, abs=1e-12)

    def test_kl_zero_at_posterior_and_infinite_off_support(self, fixture):
        world, theta, _ = fixture
        post = oracle.exact_posterior(world, oracle.tabular_forcer(theta), 0)
        qpost = SequenceProposal.from_probs(world, np.tile(post, (2, 1)))
        assert oracle.exact_kl(world, oracle.tabular_forcer(theta, qpost), 0) == \
            pytest.approx(0.0, abs=1e-10)
        # a proposal with (floored) zero mass on a posterior-supported
        # sequence should blow the divergence up far past any real value
        qzero = SequenceProposal.from_probs(world, np.tile([1.0, 0.0], (2, 1)))
        assert oracle.exact_kl(world, oracle.tabular_forcer(theta, qzero), 0) > 10.0

    def test_estimator_expectation_weighs_tuples_by_proposal(self, fixture):
        world, theta, q = fixture
        probs = np.array([[0.7, 0.3], [0.7, 0.3]])
        q2 = SequenceProposal.from_probs(world, probs)
        force = oracle.tabular_forcer(theta, q2)

        def first_weight(ts):
            return est.GradientEstimate(
                grad=np.array([est.importance_weights(ts).raw[0]]),
                tag="WSRAM", sample_count=len(ts), diagnostics={})

        mean = oracle.estimator_expectation(first_weight, world, force, 0, 2, theta.pv)
        # E_q[w] = sum_a q(a) * p(y,a)/q(a) = p(y) = 0.58
        assert mean[0] == pytest.approx(0.58, abs=1e-12)

    def test_enumeration_report_contents(self, fixture):
        world, theta, q = fixture
        rep = oracle.enumeration_report(world, oracle.tabular_forcer(theta, q), 0)
        assert rep.marginal == pytest.approx(math.log(0.58), abs=1e-12)
        np.testing.assert_allclose(rep.posterior, [27 / 29, 2 / 29], atol=1e-12)
        post = np.array([27 / 29, 2 / 29])
        want_kl = float(np.sum(post * np.log(post / 0.5)))
        assert rep.kl_posterior_proposal == pytest.approx(want_kl, abs=1e-12)
        assert rep.bound_f == pytest.approx(
            0.6 * math.log(0.9) + 0.4 * math.log(0.1), abs=1e-12)


class TestIdentitySuite:
    def test_small_suite_all_pass(self):
        records = oracle.run_identity_suite(num_worlds=6, seed=11, ms=(1, 2))
        assert len(records) >= 8
        names = {r["identity"] for r in records}
        assert len(names) == len(records)
        for r in records:
            assert r["passed"], f"{r['identity']}: worst {r['worst_error']:.3e}"
            assert r["worst_error"] <= r["tolerance"]

    def test_suite_is_deterministic(self):
        a = oracle.run_identity_suite(num_worlds=3, seed=4, ms=(1, 2))
        b = oracle.run_identity_suite(num_worlds=3, seed=4, ms=(1, 2))
        assert [(r["identity"], r["worst_error"]) for r in a] == \
            [(r["identity"], r["worst_error"]) for r in b]

    def test_suite_detects_broken_control_variate(self, monkeypatch):
        monkeypatch.setenv("SACCADE_MUTATE_WAKEQ_CV", "1")
        records = oracle.run_identity_suite(num_worlds=3, seed=4, ms=(1, 2))
        byname = {r["identity"]: r for r in records}
        assert not byname["wakeq-cv-preserves-expectation"]["passed"]
