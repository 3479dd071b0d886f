"""
Test cases for the curriculum training loop

Multi-seed curriculum efficacy runs take minutes; they only run with
VERIRL_ACCEPTANCE=1 in the environment.
"""
import json
import os
import tempfile
from unittest import TestCase, skipUnless

import numpy as np

from verirl.curriculum import Phase, default_plan, plan_from_settings
from verirl.grpo import GrpoConfig, grpo_gradient
from verirl.models import ConfigError, DatasetIOError, SchemaError
from verirl.toyenv import SyntheticTaskConfig, ToyEnvironment, ToyPolicy
from verirl.trainer import (
    TrainState,
    evaluate_policy,
    finite_diff_grad,
    heldout_tasks,
    load_checkpoint,
    relative_error,
    rollout_group,
    run_curriculum,
    save_checkpoint,
    train_step,
)
from verirl.rewards import RewardConfig
from tests.factories import SampleFactory

ACCEPTANCE = os.getenv("VERIRL_ACCEPTANCE") == "1"
ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)


def short_plan(**settings):
    """A few quick steps per phase"""
    base = {
        "FRA_STEPS": "20", "CMRA_STEPS": "5", "MRE_STEPS": "5",
        "FRA_BATCH_SIZE": "8", "CMRA_BATCH_SIZE": "8", "MRE_BATCH_SIZE": "8",
        "TASKS_PER_PHASE": "64", "HELDOUT_SIZE": "32", "SEED": "1",
    }
    base.update(settings)
    return plan_from_settings(base)


######################################################################
#  S T E P S
######################################################################
class TestTrainStep(TestCase):
    """Single step test cases"""

    def setUp(self):
        self.env = ToyEnvironment(SyntheticTaskConfig(seed=3))
        self.state = TrainState.start(ToyPolicy.for_environment(self.env), Phase.FRA, seed=3)
        self.batch = self.env.gen_tasks(Phase.FRA, 4)
        self.grpo_config = GrpoConfig(group_size=8)

    def test_counters(self):
        """It should advance the counters and remember the pre-update parameters"""
        state, stats = train_step(self.state, self.batch, self.env, grpo_config=self.grpo_config)
        self.assertEqual((stats.step, state.step, state.phase_step), (0, 1, 1))
        self.assertEqual(state.recent_rewards, (stats.mean_reward,))
        np.testing.assert_array_equal(state.old_params, self.state.policy.params)
        self.assertFalse(np.array_equal(state.policy.params, self.state.policy.params))
        self.assertEqual(len(stats.groups), 4)

    def test_record(self):
        """It should report the metrics line fields"""
        _, stats = train_step(self.state, self.batch, self.env, grpo_config=self.grpo_config)
        record = stats.to_record()
        self.assertEqual(set(record), {"step", "phase", "mean_reward", "format_rate", "acc_reward",
                                       "kl", "clip_frac", "mean_length"})
        self.assertEqual(record["phase"], "FRA")
        self.assertAlmostEqual(record["kl"], 0.0)
        self.assertEqual(record["clip_frac"], 0.0)
        self.assertLessEqual(record["mean_reward"], 1.0)

    def test_rollouts_independent_of_order(self):
        """It should sample a question's group from its own stream"""
        first = rollout_group(self.state, self.env, self.batch[2], 2, RewardConfig(), self.grpo_config)
        again = rollout_group(self.state, self.env, self.batch[2], 2, RewardConfig(), self.grpo_config)
        self.assertEqual(first.outputs, again.outputs)
        np.testing.assert_array_equal(first.rewards, again.rewards)

    def test_untrainable_group(self):
        """It should refuse groups of one"""
        self.assertRaises(ConfigError, train_step, self.state, self.batch, self.env,
                          grpo_config=GrpoConfig(group_size=1))

    def test_enter_phase(self):
        """It should freeze a fresh reference when a phase starts"""
        state, _ = train_step(self.state, self.batch, self.env, grpo_config=self.grpo_config)
        moved = state.enter_phase(Phase.MRE)
        self.assertEqual((moved.phase, moved.phase_step, moved.step), (Phase.MRE, 0, 1))
        np.testing.assert_array_equal(moved.ref_params, state.policy.params)
        self.assertEqual(moved.recent_rewards, ())


######################################################################
#  G R A D I E N T   C H E C K
######################################################################
class TestGradientCheck(TestCase):
    """Finite-difference check test cases"""

    def test_relative_error(self):
        """It should be zero for equal vectors and guarded at zero"""
        self.assertEqual(relative_error(np.ones(3), np.ones(3)), 0.0)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.0]), np.array([-1.0])), 1.0)

    def test_rollout_gradient(self):
        """It should match central differences on a real rollout batch"""
        env = ToyEnvironment(SyntheticTaskConfig(seed=3, operand_high=1, vocab_size=4, feature_scale=2.0))
        rng = np.random.default_rng(11)
        policy = ToyPolicy.for_environment(env)
        policy = policy.with_params(rng.normal(0.0, 0.3, policy.params.size))
        state = TrainState.start(policy, Phase.CMRA, seed=11)
        grpo_config = GrpoConfig(group_size=6, beta=0.04)
        # on-policy groups: every ratio is exactly one, far from the clip kinks
        groups = [rollout_group(state, env, s, i, RewardConfig(), grpo_config)
                  for i, s in enumerate(env.gen_tasks(Phase.CMRA, 3))]
        error = relative_error(grpo_gradient(groups, policy, grpo_config),
                               finite_diff_grad(policy, groups, 1e-5, grpo_config))
        self.assertLess(error, 1e-5)

    def test_spot_check_logs(self):
        """It should log the gradient check when asked to"""
        with self.assertLogs("verirl", level="INFO") as logs:
            run_curriculum(short_plan(PHASES="FRA", FRA_STEPS="2", FRA_BATCH_SIZE="2", FRA_GROUP_SIZE="4"),
                           task_config=SyntheticTaskConfig(seed=3, operand_high=1, vocab_size=4),
                           grad_check_every=1)
        self.assertEqual(sum("Gradient check" in line for line in logs.output), 2)


######################################################################
#  E V A L U A T I O N
######################################################################
class TestEvaluation(TestCase):
    """Held-out evaluation test cases"""

    def setUp(self):
        self.env = ToyEnvironment(SyntheticTaskConfig(seed=5))
        self.policy = ToyPolicy.for_environment(self.env)

    def test_uniform_policy(self):
        """It should compute exact expected rewards of the uniform policy"""
        samples = self.env.gen_tasks(Phase.MRE, 20)
        evaluation = evaluate_policy(self.policy, self.env, samples, Phase.MRE)
        self.assertEqual(evaluation.count, 20)
        self.assertAlmostEqual(evaluation.format_rate, 0.5)
        # one right answer in eight, every other answer a well-typed number
        self.assertAlmostEqual(evaluation.acc_reward, 0.5 * (1 / 8 + 7 / 8 * 0.2))
        self.assertAlmostEqual(evaluation.total_reward, 0.5 * (1 / 8 + 7 / 8 * 0.28))
        self.assertLessEqual(set(evaluation.by_category), {"mathgeo", "chart", "table", "aigc"})
        for value in evaluation.by_category.values():
            self.assertAlmostEqual(value, evaluation.acc_reward)

    def test_record(self):
        """It should name the phase and every metric in its record"""
        evaluation = evaluate_policy(self.policy, self.env, self.env.gen_tasks(Phase.FRA, 4), Phase.FRA)
        record = evaluation.to_record()
        self.assertEqual(record["phase"], "FRA")
        self.assertEqual(record["acc_reward_by_category"], {"none": evaluation.acc_reward})

    def test_heldout_disjoint_seed(self):
        """It should draw held-out tasks from their own seed"""
        plan = short_plan()
        heldout = heldout_tasks(plan, Phase.FRA, self.env)
        self.assertEqual(len(heldout), 32)
        self.assertTrue(all(s.id.startswith("heldout-fra-") for s in heldout))
        self.assertEqual(heldout, heldout_tasks(plan, Phase.FRA, self.env))


######################################################################
#  C H E C K P O I N T S
######################################################################
class TestCheckpoints(TestCase):
    """Checkpoint test cases"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "checkpoint.json")
        env = ToyEnvironment(SyntheticTaskConfig())
        policy = ToyPolicy.for_environment(env)
        policy = policy.with_params(np.random.default_rng(0).normal(size=policy.params.size))
        self.state = TrainState.start(policy, Phase.CMRA, seed=7)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        """It should restore parameters and counters"""
        save_checkpoint(self.path, self.state)
        policy, counters = load_checkpoint(self.path)
        np.testing.assert_array_equal(policy.params, self.state.policy.params)
        self.assertEqual(counters, {"phase": "CMRA", "step": 0, "phase_step": 0, "seed": 7})
        self.assertEqual(policy.feature_scale, 4.0)

    def test_version(self):
        """It should refuse checkpoints of another version"""
        save_checkpoint(self.path, self.state)
        with open(self.path, encoding="utf-8") as handle:
            payload = json.load(handle)
        payload["version"] = 99
        with open(self.path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle)
        with self.assertRaises(SchemaError) as context:
            load_checkpoint(self.path)
        self.assertEqual(context.exception.field, "version")

    def test_unreadable(self):
        """It should report missing and corrupt checkpoints"""
        self.assertRaises(DatasetIOError, load_checkpoint, os.path.join(self.tmp.name, "missing.json"))
        with open(self.path, "w", encoding="utf-8") as handle:
            handle.write("{")
        self.assertRaises(SchemaError, load_checkpoint, self.path)


######################################################################
#  C U R R I C U L U M
######################################################################
class TestCurriculum(TestCase):
    """Curriculum run test cases"""

    def test_format_rate_rises(self):
        """It should learn the format during FRA"""
        result = run_curriculum(short_plan(PHASES="FRA"))
        self.assertEqual(len(result.metrics), 20)
        self.assertGreater(result.final_evaluation(Phase.FRA).format_rate, 0.8)
        early = np.mean([m["format_rate"] for m in result.metrics[:3]])
        late = np.mean([m["format_rate"] for m in result.metrics[-3:]])
        self.assertGreater(late, early)
        self.assertIsNone(result.final_evaluation(Phase.MRE))

    def test_deterministic(self):
        """It should reproduce metrics exactly from the same seed"""
        first = run_curriculum(short_plan())
        again = run_curriculum(short_plan())
        self.assertEqual(first.metrics, again.metrics)
        np.testing.assert_array_equal(first.policy.params, again.policy.params)
        self.assertEqual([m["phase"] for m in first.metrics], ["FRA"] * 20 + ["CMRA"] * 5 + ["MRE"] * 5)

    def test_zero_budgets(self):
        """It should still evaluate every phase when no step is taken"""
        result = run_curriculum(short_plan(FRA_STEPS="0", CMRA_STEPS="0", MRE_STEPS="0"))
        self.assertEqual(result.metrics, [])
        self.assertEqual([e.phase for e in result.evaluations], [Phase.FRA, Phase.CMRA, Phase.MRE])
        self.assertTrue(np.all(result.policy.params == 0.0))

    def test_early_exit(self):
        """It should leave a phase once the rolling reward is high enough"""
        result = run_curriculum(short_plan(PHASES="FRA", FRA_STEPS="50", EARLY_EXIT_THRESHOLD="0.0",
                                           EARLY_EXIT_WINDOW="3"))
        self.assertEqual(len(result.metrics), 3)

    def test_output_files(self):
        """It should write metrics, evaluations and checkpoints"""
        with tempfile.TemporaryDirectory() as tmp:
            result = run_curriculum(short_plan(), out_dir=tmp)
            with open(os.path.join(tmp, "metrics.jsonl"), encoding="utf-8") as handle:
                self.assertEqual([json.loads(line) for line in handle], result.metrics)
            with open(os.path.join(tmp, "evaluation.jsonl"), encoding="utf-8") as handle:
                self.assertEqual(len(handle.readlines()), 3)
            for name in ("FRA", "CMRA", "MRE", "final"):
                self.assertTrue(os.path.exists(os.path.join(tmp, f"checkpoint-{name}.json")))
            policy, counters = load_checkpoint(os.path.join(tmp, "checkpoint-final.json"))
            np.testing.assert_array_equal(policy.params, result.policy.params)
            self.assertEqual(counters["step"], 30)

    def test_rollout_dump(self):
        """It should dump rollout groups every N steps next to the metrics"""
        with tempfile.TemporaryDirectory() as tmp:
            result = run_curriculum(short_plan(PHASES="FRA", FRA_STEPS="6"), out_dir=tmp, dump_rollouts_every=3)
            with open(os.path.join(tmp, "rollouts.jsonl"), encoding="utf-8") as handle:
                records = [json.loads(line) for line in handle]
        self.assertEqual(len(result.metrics), 6)
        self.assertEqual(sorted({r["step"] for r in records}), [0, 3])
        self.assertEqual(len(records), 2 * 8)
        self.assertTrue(all(r["phase"] == "FRA" for r in records))
        self.assertTrue(all(len(r["advantages"]) == len(r["outputs"]) for r in records))

    def test_dataset_modality(self):
        """It should reject a phase dataset of the wrong modality with its line number"""
        with tempfile.TemporaryDirectory() as tmp:
            text_path = os.path.join(tmp, "text.jsonl")
            image_path = os.path.join(tmp, "images.jsonl")
            for path, samples in ((text_path, SampleFactory.build_batch(2)),
                                  (image_path, SampleFactory.build_batch(2, multimodal=True))):
                with open(path, "w", encoding="utf-8") as handle:
                    handle.writelines(json.dumps(s.serialize()) + "\n" for s in samples)
            with self.assertRaises(SchemaError) as context:
                run_curriculum(short_plan(PHASES="CMRA", CMRA_DATASET=text_path))
            self.assertEqual((context.exception.field, context.exception.line), ("modality", 1))
            with self.assertRaises(SchemaError) as context:
                run_curriculum(short_plan(PHASES="FRA", FRA_DATASET=image_path))
            self.assertEqual(context.exception.line, 1)


@skipUnless(ACCEPTANCE, "set VERIRL_ACCEPTANCE=1 to run the multi-seed curriculum checks")
class TestCurriculumEfficacy(TestCase):
    """Multi-seed curriculum efficacy on the default toy plan"""

    @classmethod
    def setUpClass(cls):
        cls.full, cls.ablation = [], []
        for seed in ACCEPTANCE_SEEDS:
            plan = plan_from_settings({"SEED": str(seed)})
            cls.full.append(run_curriculum(plan))
            cls.ablation.append(run_curriculum(plan.skip_phases([Phase.CMRA])))

    def test_fra_format(self):
        """It should pass the format check at least 95% of the time after FRA"""
        rates = [r.final_evaluation(Phase.FRA).format_rate for r in self.full]
        self.assertGreaterEqual(np.mean(rates), 0.95)

    def test_mre_accuracy(self):
        """It should reach an MRE held-out accuracy reward of 0.9"""
        accuracies = [r.final_evaluation(Phase.MRE).acc_reward for r in self.full]
        self.assertGreaterEqual(np.mean(accuracies), 0.90)

    def test_cmra_helps(self):
        """It should beat the plan that skips CMRA"""
        full = np.mean([r.final_evaluation(Phase.MRE).acc_reward for r in self.full])
        ablation = np.mean([r.final_evaluation(Phase.MRE).acc_reward for r in self.ablation])
        self.assertGreater(full, ablation)

    def test_format_before_accuracy(self):
        """It should learn the format before its accuracy reward saturates"""
        format_steps, accuracy_steps = [], []
        window = np.ones(10) / 10
        for result in self.full:
            format_rate = np.convolve([m["format_rate"] for m in result.metrics], window, mode="valid")
            accuracy = np.convolve([m["acc_reward"] for m in result.metrics], window, mode="valid")
            self.assertTrue((format_rate >= 0.8).any())
            format_steps.append(int(np.argmax(format_rate >= 0.8)))
            accuracy_steps.append(int(np.argmax(accuracy >= 0.95 * accuracy.max())))
        self.assertLess(np.mean(format_steps), np.mean(accuracy_steps))

    def test_default_budgets(self):
        """It should spend the default budgets absent early exit"""
        self.assertEqual([s.steps for s in default_plan().phases], [500, 500, 1000])
        self.assertEqual(len(self.full[0].metrics), 2000)
