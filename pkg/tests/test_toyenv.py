"""
Test cases for the synthetic environment and the toy policy
"""
from unittest import TestCase

import numpy as np

from verirl.curriculum import Phase, augment_with_caption
from verirl.models import ConfigError, Modality
from verirl.rewards import score_total
from verirl.toyenv import (
    Channel,
    SyntheticTaskConfig,
    ToyEnvironment,
    ToyPolicy,
    UnparseableOutput,
    format_output,
    gen_tasks,
    parse_output,
    policy_logprob_grad,
    sample_outputs,
)


class TestTaskConfig(TestCase):
    """SyntheticTaskConfig test cases"""

    def test_defaults(self):
        """It should lay out 33 features for the default tasks"""
        task_config = SyntheticTaskConfig()
        self.assertEqual(task_config.operand_count, 4)
        self.assertEqual(task_config.feature_dim, 33)

    def test_invalid(self):
        """It should refuse answers outside the vocabulary and other bad values"""
        self.assertRaises(ConfigError, SyntheticTaskConfig, operand_high=4, vocab_size=8)
        self.assertRaises(ConfigError, SyntheticTaskConfig, operand_low=3, operand_high=2)
        self.assertRaises(ConfigError, SyntheticTaskConfig, caption_verbosity=3)
        self.assertRaises(ConfigError, SyntheticTaskConfig, feature_scale=0.0)
        self.assertRaises(ConfigError, SyntheticTaskConfig, fact_table_size=0)

    def test_from_settings(self):
        """It should read plan keys and ignore the rest"""
        task_config = SyntheticTaskConfig.from_settings({"OPERAND_HIGH": "2", "FRA_STEPS": "4"}, seed=9)
        self.assertEqual((task_config.operand_high, task_config.seed), (2, 9))
        self.assertRaises(ConfigError, SyntheticTaskConfig.from_settings, {"VOCAB_SIZE": "many"})


class TestTasks(TestCase):
    """Task generation and observation test cases"""

    def setUp(self):
        self.env = ToyEnvironment(SyntheticTaskConfig(seed=4))

    def test_fra_tasks(self):
        """It should generate text-only additions with correct truths"""
        samples = self.env.gen_tasks(Phase.FRA, 50)
        self.assertEqual(samples[7].id, "task-fra-00007")
        for sample in samples:
            self.assertIs(sample.modality, Modality.TEXT)
            a, b = (int(n) for n in sample.question.replace("?", "").split()[2::2])
            self.assertEqual(sample.truth.value, str(a + b))

    def test_multimodal_tasks(self):
        """It should hide the first operand behind a fact symbol"""
        for sample in self.env.gen_tasks(Phase.MRE, 50):
            self.assertTrue(sample.is_multimodal)
            symbol = int(sample.images[0].rsplit("sym", 1)[1])
            a = self.env.fact_table[symbol]
            b = int(sample.question.rstrip("?").split()[-1])
            self.assertEqual(sample.truth.value, str(a + b))
            self.assertIn(str(a), sample.caption)

    def test_deterministic(self):
        """It should regenerate identical tasks from the same seed"""
        first = gen_tasks(SyntheticTaskConfig(seed=4), Phase.CMRA, 20)
        self.assertEqual(first, gen_tasks(SyntheticTaskConfig(seed=4), Phase.CMRA, 20))
        self.assertNotEqual(first, gen_tasks(SyntheticTaskConfig(seed=5), Phase.CMRA, 20))
        self.assertEqual(self.env.gen_tasks(Phase.FRA, 0), [])
        self.assertRaises(ConfigError, self.env.gen_tasks, Phase.FRA, -1)

    def test_fra_observation(self):
        """It should read the operand pair from the question"""
        sample = self.env.gen_tasks(Phase.FRA, 1)[0]
        a, b = (int(n) for n in sample.question.replace("?", "").split()[2::2])
        observation = self.env.observe(sample, Phase.FRA)
        self.assertEqual(observation.features, (0, self.env.text_pair_index(a, b)))
        self.assertIs(self.env.channel_of(observation.features[1]), Channel.QUESTION)

    def test_channel_masks(self):
        """It should expose the caption only in CMRA and the fact symbol outside FRA"""
        sample = self.env.gen_tasks(Phase.CMRA, 1)[0]
        symbol = int(sample.images[0].rsplit("sym", 1)[1])
        a = self.env.fact_table[symbol]
        b = int(sample.question.rstrip("?").split()[-1])
        fact = self.env.fact_pair_index(symbol, b)
        self.assertEqual(self.env.observe(sample, Phase.FRA).features, (0,))
        self.assertEqual(self.env.observe(sample, Phase.CMRA).features, (0, self.env.text_pair_index(a, b), fact))
        self.assertEqual(self.env.observe(sample, Phase.MRE).features, (0, fact))
        self.assertIs(self.env.channel_of(fact), Channel.FACT)
        self.assertIsNone(self.env.channel_of(0))

    def test_augmented_question(self):
        """It should read a caption folded into the question once, not twice"""
        sample = self.env.gen_tasks(Phase.CMRA, 1)[0]
        augmented = augment_with_caption(sample)
        self.assertEqual(self.env.observe(augmented, Phase.CMRA).features,
                         self.env.observe(sample, Phase.CMRA).features)


class TestPolicy(TestCase):
    """ToyPolicy test cases"""

    def setUp(self):
        self.env = ToyEnvironment(SyntheticTaskConfig(seed=2))
        rng = np.random.default_rng(2)
        self.policy = ToyPolicy.for_environment(self.env)
        self.policy = self.policy.with_params(rng.normal(0.0, 0.3, self.policy.params.size))
        self.observation = self.env.observe(self.env.gen_tasks(Phase.CMRA, 1)[0], Phase.CMRA)

    def test_output_grammar(self):
        """It should parse exactly the outputs it can produce"""
        self.assertEqual(parse_output(format_output(5, True)), (5, True))
        self.assertEqual(parse_output(format_output(5, False)), (5, False))
        self.assertRaises(UnparseableOutput, parse_output, "five")
        self.assertRaises(UnparseableOutput, self.policy.logprob, self.observation, "9")

    def test_formatted_output_scores(self):
        """It should emit outputs the reward recognizes"""
        sample = self.env.gen_tasks(Phase.FRA, 1)[0]
        right = int(sample.truth.value)
        self.assertEqual(score_total(format_output(right, True), sample).r_total, 1.0)
        self.assertEqual(score_total(format_output(right, False), sample).r_total, 0.0)

    def test_uniform_start(self):
        """It should start uniform over answers with an even format gate"""
        policy = ToyPolicy.for_environment(self.env)
        self.assertEqual(policy.params.size, 33 * 9)
        np.testing.assert_allclose(policy.answer_probs(self.observation), np.full(8, 1 / 8))
        self.assertAlmostEqual(policy.format_prob(self.observation), 0.5)

    def test_distribution_sums_to_one(self):
        """It should assign total probability one to the 2V outputs"""
        total = sum(np.exp(self.policy.logprob(self.observation, format_output(k, f)))
                    for k in range(8) for f in (True, False))
        self.assertAlmostEqual(total, 1.0)

    def test_gradient(self):
        """It should match central differences of log pi"""
        h = 1e-6
        for output in (format_output(3, True), format_output(0, False)):
            logprob, gradient = policy_logprob_grad(self.policy, self.observation, output)
            self.assertAlmostEqual(logprob, self.policy.logprob(self.observation, output))
            numeric = np.zeros_like(gradient)
            for j in range(gradient.size):
                step = np.zeros_like(gradient)
                step[j] = h
                upper = self.policy.with_params(self.policy.params + step).logprob(self.observation, output)
                lower = self.policy.with_params(self.policy.params - step).logprob(self.observation, output)
                numeric[j] = (upper - lower) / (2 * h)
            np.testing.assert_allclose(gradient, numeric, atol=1e-7)

    def test_sampling(self):
        """It should sample reproducibly and report the log-probabilities of its draws"""
        first = sample_outputs(self.policy, self.observation, 16, np.random.default_rng([1, 2, 3]))
        again = sample_outputs(self.policy, self.observation, 16, np.random.default_rng([1, 2, 3]))
        self.assertEqual(first.outputs, again.outputs)
        for output, logprob in zip(first.outputs, first.logprobs):
            self.assertAlmostEqual(logprob, self.policy.logprob(self.observation, output))
        self.assertRaises(ConfigError, sample_outputs, self.policy, self.observation, 0, np.random.default_rng())

    def test_views(self):
        """It should expose answer and gate weights as views of the flat parameters"""
        policy = ToyPolicy.for_environment(self.env)
        policy.theta[0, 3] = 1.0
        policy.gate[0] = -2.0
        self.assertEqual(policy.params[3], 1.0)
        self.assertEqual(policy.params[-33], -2.0)
        copy = policy.copy()
        copy.gate[0] = 5.0
        self.assertEqual(policy.gate[0], -2.0)
        self.assertRaises(ConfigError, ToyPolicy, 33, 8, 4.0, np.zeros(3))
