"""
Test cases for the GRPO objective, its gradient and its building blocks
"""
import json
import os
import tempfile
from unittest import TestCase

import numpy as np

from verirl.curriculum import Phase
from verirl.grpo import (
    GrpoConfig,
    RolloutGroup,
    ShapeMismatch,
    ascent_step,
    clipped_term,
    dump_rollouts,
    group_advantages,
    grpo_gradient,
    grpo_objective,
    kl_penalty,
    output_weights,
    prob_ratio,
)
from verirl.models import ConfigError
from verirl.toyenv import SyntheticTaskConfig, ToyEnvironment, ToyPolicy, sample_outputs
from verirl.trainer import finite_diff_grad, relative_error

REWARD_LEVELS = (0.0, 0.1, 0.28, 1.0)
SMALL_TASKS = SyntheticTaskConfig(seed=3, operand_high=1, vocab_size=4, feature_scale=2.0)


def make_group(sample_id, rewards, logp_new=None, logp_old=None, logp_ref=None):
    """Group with placeholder outputs; log-probabilities default to zero"""
    size = len(rewards)
    zeros = np.zeros(size)
    group = RolloutGroup(
        sample_id=sample_id,
        outputs=[str(i) for i in range(size)],
        lengths=np.ones(size, dtype=np.int64),
        logp_new=zeros if logp_new is None else np.asarray(logp_new, dtype=np.float64),
        logp_old=zeros if logp_old is None else np.asarray(logp_old, dtype=np.float64),
        logp_ref=zeros if logp_ref is None else np.asarray(logp_ref, dtype=np.float64),
    )
    return group.with_rewards(rewards)


def random_batch(rng, env, grpo_config, groups=3, group_size=4):
    """A policy with distinct current, old and reference parameters, and scored groups"""
    policy = ToyPolicy.for_environment(env).with_params(rng.normal(0.0, 0.5, ToyPolicy.for_environment(env).params.size))
    old = policy.with_params(policy.params + rng.normal(0.0, 0.05, policy.params.size))
    ref = policy.with_params(policy.params + rng.normal(0.0, 0.1, policy.params.size))
    samples = env.gen_tasks(Phase.CMRA, groups, seed=int(rng.integers(1 << 30)))
    batch = []
    for sample in samples:
        observation = env.observe(sample, Phase.CMRA)
        outputs = sample_outputs(old, observation, group_size, rng).outputs
        group = RolloutGroup(
            sample_id=sample.id,
            outputs=list(outputs),
            lengths=np.ones(group_size, dtype=np.int64),
            logp_new=np.array([policy.logprob(observation, o) for o in outputs]),
            logp_old=np.array([old.logprob(observation, o) for o in outputs]),
            logp_ref=np.array([ref.logprob(observation, o) for o in outputs]),
            observation=observation,
        )
        batch.append(group.with_rewards(rng.choice(REWARD_LEVELS, group_size), grpo_config.sigma_min))
    return policy, batch


def near_clip_boundary(batch, grpo_config, margin=1e-3):
    """True when a ratio sits where central differences would straddle a clip kink"""
    for group in batch:
        ratio = prob_ratio(group.logp_new, group.logp_old, grpo_config.ratio_cap)
        for edge in (1 - grpo_config.epsilon, 1 + grpo_config.epsilon):
            if np.any(np.abs(ratio - edge) < margin):
                return True
    return False


######################################################################
#  C O N F I G
######################################################################
class TestGrpoConfig(TestCase):
    """GrpoConfig test cases"""

    def test_defaults(self):
        """It should default to epsilon 0.2 and beta 0.01"""
        grpo_config = GrpoConfig()
        self.assertEqual(grpo_config.epsilon, 0.2)
        self.assertEqual(grpo_config.beta, 0.01)

    def test_invalid(self):
        """It should reject out-of-range hyperparameters"""
        for changes in ({"epsilon": 0.0}, {"epsilon": 1.0}, {"beta": -0.1}, {"sigma_min": 0.0},
                        {"group_size": 0}, {"learning_rate": -1.0}, {"ratio_cap": 1.0}):
            self.assertRaises(ConfigError, GrpoConfig, **changes)
        self.assertRaises(ConfigError, GrpoConfig(group_size=1).check_trainable)
        self.assertEqual(GrpoConfig().evolve(beta=0.0).beta, 0.0)
        self.assertRaises(ConfigError, GrpoConfig().evolve, beta=-1.0)


######################################################################
#  A D V A N T A G E S
######################################################################
class TestAdvantages(TestCase):
    """Group advantage test cases"""

    def test_normalized(self):
        """It should give zero mean and unit population std over 10,000 random groups"""
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            rewards = rng.uniform(0.0, 1.0, rng.integers(2, 33))
            advantages = group_advantages(rewards)
            self.assertLess(abs(advantages.mean()), 1e-9)
            self.assertLess(abs(advantages.std() - 1.0), 1e-9)
            scale, shift = rng.uniform(0.5, 5.0), rng.uniform(-3.0, 3.0)
            np.testing.assert_allclose(group_advantages(scale * rewards + shift), advantages, rtol=0, atol=1e-9)

    def test_equal_rewards(self):
        """It should give all-zero advantages to a group of equal rewards"""
        for rewards in ([1.0, 1.0], [0.0] * 16, [0.28] * 5):
            np.testing.assert_array_equal(group_advantages(rewards), np.zeros(len(rewards)))

    def test_sigma_floor(self):
        """It should divide by sigma_min when the spread is tiny"""
        advantages = group_advantages([0.0, 2e-9], sigma_min=1e-6)
        np.testing.assert_allclose(advantages, [-1e-3, 1e-3])

    def test_single_and_empty(self):
        """It should give a single output zero advantage and refuse empty groups"""
        np.testing.assert_array_equal(group_advantages([0.7]), [0.0])
        self.assertRaises(ShapeMismatch, group_advantages, [])


######################################################################
#  O B J E C T I V E
######################################################################
class TestObjective(TestCase):
    """Surrogate objective test cases"""

    def test_kl_nonnegative(self):
        """It should keep the KL estimate nonnegative and zero at equality"""
        rng = np.random.default_rng(5)
        logp_new = rng.normal(-3.0, 3.0, 100_000)
        logp_ref = rng.normal(-3.0, 3.0, 100_000)
        self.assertTrue(np.all(kl_penalty(logp_new, logp_ref) >= 0.0))
        np.testing.assert_array_equal(kl_penalty(logp_new, logp_new), np.zeros(100_000))

    def test_clipped_term_bound(self):
        """It should never exceed ratio * A"""
        rng = np.random.default_rng(6)
        ratio = np.exp(rng.normal(0.0, 0.5, 10_000))
        advantage = rng.normal(0.0, 1.0, 10_000)
        self.assertTrue(np.all(clipped_term(ratio, advantage, 0.2) <= ratio * advantage))
        self.assertEqual(clipped_term(1.5, 1.0, 0.2), 1.2)
        self.assertEqual(clipped_term(0.5, -1.0, 0.2), -0.8)
        self.assertEqual(clipped_term(1.5, -1.0, 0.2), -1.5)

    def test_ratio_cap(self):
        """It should cap exploding ratios and count them"""
        self.assertAlmostEqual(float(prob_ratio(800.0, 0.0, 1e6)), 1e6, delta=1e-3)
        group = make_group("g", [0.0, 1.0], logp_new=[800.0, 0.0])
        stats = grpo_objective([group])
        self.assertEqual(stats.capped, 1)
        self.assertTrue(np.isfinite(stats.objective))

    def test_identity_at_reference(self):
        """It should give J == 0 when current, old and reference policies coincide"""
        rng = np.random.default_rng(8)
        for beta in (0.0, 0.04):
            groups = []
            for index in range(8):
                size = int(rng.integers(2, 17))
                logp = rng.normal(-2.0, 1.0, size)
                groups.append(make_group(f"g{index}", rng.choice(REWARD_LEVELS, size), logp, logp, logp))
            stats = grpo_objective(groups, GrpoConfig(beta=beta))
            self.assertLess(abs(stats.objective), 1e-9)
            self.assertEqual(stats.clip_fraction, 0.0)
            self.assertEqual(stats.mean_kl, 0.0)

    def test_clip_fraction(self):
        """It should report the share of outputs where the clipped branch wins"""
        group = make_group("g", [0.0, 1.0], logp_new=[np.log(1.5), np.log(1.5)])
        stats = grpo_objective([group], GrpoConfig(beta=0.0))
        # A = [-1, 1]: min(-1.5, -1.2) keeps the ratio, min(1.5, 1.2) clips it
        self.assertEqual(stats.clip_fraction, 0.5)
        self.assertAlmostEqual(stats.objective, (-1.5 + 1.2) / 2)

    def test_degenerate_fraction(self):
        """It should report groups whose rewards are all equal"""
        stats = grpo_objective([make_group("a", [1.0, 1.0]), make_group("b", [0.0, 1.0])])
        self.assertEqual(stats.degenerate_fraction, 0.5)

    def test_shape_mismatch(self):
        """It should refuse groups whose vectors disagree with G"""
        group = make_group("g", [0.0, 1.0])
        group.logp_old = np.zeros(3)
        self.assertRaises(ShapeMismatch, grpo_objective, [group])
        self.assertRaises(ShapeMismatch, grpo_objective, [])
        unscored = RolloutGroup("u", ["1"], np.ones(1), np.zeros(1), np.zeros(1), np.zeros(1))
        self.assertRaises(ShapeMismatch, grpo_objective, [unscored])
        self.assertRaises(ShapeMismatch, make_group("g", [0.0, 1.0]).with_rewards, [1.0])

    def test_output_weights(self):
        """It should zero the surrogate weight where clipping is active"""
        group = make_group("g", [0.0, 1.0], logp_new=[np.log(1.5), np.log(1.5)])
        np.testing.assert_allclose(output_weights(group, GrpoConfig(beta=0.0)), [-1.5, 0.0])


######################################################################
#  G R A D I E N T
######################################################################
class TestGradient(TestCase):
    """Analytic gradient against central differences"""

    def setUp(self):
        self.env = ToyEnvironment(SMALL_TASKS)
        self.grpo_config = GrpoConfig(beta=0.04)

    def _batches(self, count, seed, margin=1e-3):
        rng = np.random.default_rng(seed)
        found = 0
        while found < count:
            policy, batch = random_batch(rng, self.env, self.grpo_config)
            if near_clip_boundary(batch, self.grpo_config, margin):
                continue
            found += 1
            yield policy, batch

    def test_matches_finite_differences(self):
        """It should agree with central differences on 100 random batches"""
        for policy, batch in self._batches(100, seed=17):
            analytic = grpo_gradient(batch, policy, self.grpo_config)
            numeric = finite_diff_grad(policy, batch, 1e-5, self.grpo_config)
            self.assertLess(relative_error(analytic, numeric), 1e-5)

    def test_error_shrinks_quadratically(self):
        """It should see the difference error fall with h squared until roundoff takes over"""
        errors = {1e-3: 0.0, 1e-4: 0.0, 1e-5: 0.0, 1e-6: 0.0}
        for policy, batch in self._batches(5, seed=23, margin=5e-2):
            analytic = grpo_gradient(batch, policy, self.grpo_config)
            for h in errors:
                errors[h] += relative_error(analytic, finite_diff_grad(policy, batch, h, self.grpo_config))
        self.assertGreater(errors[1e-3] / errors[1e-4], 4.0)
        self.assertLess(errors[1e-5], 5 * 1e-5)
        self.assertLess(errors[1e-6], 5 * 1e-5)

    def test_deterministic(self):
        """It should give bit-identical gradients on repeated evaluation"""
        policy, batch = next(self._batches(1, seed=29))
        first = grpo_gradient(batch, policy, self.grpo_config)
        np.testing.assert_array_equal(first, grpo_gradient(batch, policy, self.grpo_config))

    def test_ascent_step(self):
        """It should move along the gradient and check shapes"""
        np.testing.assert_allclose(ascent_step(np.zeros(3), np.ones(3), 0.5), [0.5, 0.5, 0.5])
        self.assertRaises(ShapeMismatch, ascent_step, np.zeros(3), np.ones(4), 0.5)

    def test_bad_step_size(self):
        """It should refuse a non-positive difference step"""
        policy, batch = next(self._batches(1, seed=31))
        self.assertRaises(ValueError, finite_diff_grad, policy, batch, 0.0)


######################################################################
#  R O L L O U T   D U M P
######################################################################
class TestRolloutDump(TestCase):
    """Rollout dump test cases"""

    def test_dump(self):
        """It should write one record per group"""
        groups = [make_group("a", [0.0, 1.0]), make_group("b", [1.0, 1.0, 0.0])]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "rollouts.jsonl")
            self.assertEqual(dump_rollouts(groups, path), 2)
            with open(path, encoding="utf-8") as handle:
                records = [json.loads(line) for line in handle]
        self.assertEqual(records[1]["sample_id"], "b")
        self.assertEqual(records[1]["rewards"], [1.0, 1.0, 0.0])
        self.assertEqual(len(records[1]["kl"]), 3)
        self.assertEqual(records[0]["ratios"], [1.0, 1.0])
