"""
Curriculum training loop for the toy environment

One step samples G outputs per question, scores them, turns the rewards into
group-relative advantages and takes one ascent step on the GRPO objective.
The reference policy is frozen at the start of every phase. After each phase
the policy is evaluated exactly, in expectation, on a held-out task set.
"""
import json
import logging
import os
from contextlib import ExitStack
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from verirl import config
from verirl.common.jsonl import JsonlWriter, dumps
from verirl.curriculum import (
    CurriculumPlan,
    Phase,
    PhaseProgress,
    PhaseStream,
    Transition,
    advance_phase,
    expected_modality,
    load_dataset,
    select_phase_data,
)
from verirl.grpo import (
    GrpoConfig,
    RolloutGroup,
    SurrogateStats,
    ascent_step,
    dump_rollouts,
    grpo_gradient,
    grpo_objective,
    refresh_logprobs,
)
from verirl.models import DatasetIOError, Sample, SchemaError
from verirl.rewards import RewardConfig, score_group, score_total
from verirl.toyenv import (
    SyntheticTaskConfig,
    ToyEnvironment,
    ToyPolicy,
    format_output,
    sample_outputs,
)

logger = logging.getLogger("verirl")

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    """Everything a step reads and writes"""
    phase: Phase
    policy: ToyPolicy
    ref_params: np.ndarray
    seed: int = config.SEED
    step: int = 0
    phase_step: int = 0
    recent_rewards: Tuple[float, ...] = ()
    reward_window: int = 20
    old_params: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def start(cls, policy: ToyPolicy, phase: Phase, seed: int = config.SEED, reward_window: int = 20) -> "TrainState":
        """Fresh state with the reference frozen at the current parameters"""
        return cls(phase=phase, policy=policy, ref_params=policy.params.copy(), seed=seed, reward_window=reward_window)

    def enter_phase(self, phase: Phase) -> "TrainState":
        """Moves to a phase, refreshing the reference snapshot"""
        return replace(self, phase=phase, phase_step=0, recent_rewards=(),
                       ref_params=self.policy.params.copy())


@dataclass(frozen=True)
class StepStats:
    """Telemetry of one training step"""
    step: int
    phase: Phase
    surrogate: SurrogateStats
    mean_reward: float
    format_rate: float
    acc_reward: float
    mean_length: float
    groups: Tuple[RolloutGroup, ...] = field(default=(), repr=False, compare=False)

    def to_record(self) -> dict:
        """Metrics JSONL line"""
        return {
            "step": self.step,
            "phase": self.phase.name,
            "mean_reward": self.mean_reward,
            "format_rate": self.format_rate,
            "acc_reward": self.acc_reward,
            "kl": self.surrogate.mean_kl,
            "clip_frac": self.surrogate.clip_fraction,
            "mean_length": self.mean_length,
        }


def rollout_group(state: TrainState, env: ToyEnvironment, sample: Sample, index: int,
                  reward_config: RewardConfig, grpo_config: GrpoConfig) -> RolloutGroup:
    """Samples, scores and annotates the G outputs of one question"""
    observation = env.observe(sample, state.phase)
    # an independent stream per (seed, step, sample) keeps rollouts order-free
    rng = np.random.default_rng([state.seed, state.step, index])
    rollout = sample_outputs(state.policy, observation, grpo_config.group_size, rng)
    reference = state.policy.with_params(state.ref_params)
    group = RolloutGroup(
        sample_id=sample.id,
        outputs=list(rollout.outputs),
        lengths=np.ones(len(rollout.outputs), dtype=np.int64),
        logp_new=rollout.logprobs.copy(),
        logp_old=rollout.logprobs.copy(),
        logp_ref=np.array([reference.logprob(observation, o) for o in rollout.outputs]),
        observation=observation,
    )
    return group.with_rewards(score_group(rollout.outputs, sample, reward_config), grpo_config.sigma_min)


def train_step(state: TrainState, batch: Sequence[Sample], env: ToyEnvironment,
               reward_config: RewardConfig = RewardConfig(),
               grpo_config: GrpoConfig = GrpoConfig()) -> Tuple[TrainState, StepStats]:
    """Rollout, score, advantages, gradient, ascent"""
    grpo_config.check_trainable()
    old_params = state.policy.params.copy()
    groups = [rollout_group(state, env, sample, i, reward_config, grpo_config) for i, sample in enumerate(batch)]
    surrogate = grpo_objective(groups, grpo_config)
    gradient = grpo_gradient(groups, state.policy, grpo_config)
    policy = state.policy.with_params(ascent_step(state.policy.params, gradient, grpo_config.learning_rate))

    breakdowns = [score_total(o, s, reward_config) for g, s in zip(groups, batch) for o in g.outputs]
    lengths = [len(o) for g in groups for o in g.outputs]
    mean_reward = float(np.mean([b.r_total for b in breakdowns]))
    stats = StepStats(
        step=state.step,
        phase=state.phase,
        surrogate=surrogate,
        mean_reward=mean_reward,
        format_rate=float(np.mean([b.r_format for b in breakdowns])),
        acc_reward=float(np.mean([b.r_acc for b in breakdowns])),
        mean_length=float(np.mean(lengths)),
        groups=tuple(groups),
    )
    new_state = replace(
        state,
        policy=policy,
        old_params=old_params,
        step=state.step + 1,
        phase_step=state.phase_step + 1,
        recent_rewards=(state.recent_rewards + (mean_reward,))[-state.reward_window:],
    )
    return new_state, stats


######################################################################
# G R A D I E N T   C H E C K
######################################################################

def finite_diff_grad(policy: ToyPolicy, groups: Sequence[RolloutGroup], h: float = 1e-5,
                     grpo_config: GrpoConfig = GrpoConfig()) -> np.ndarray:
    """Central differences of grpo_objective, one coordinate at a time

    Old and reference log-probabilities stay fixed; only log pi_theta moves.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = policy.params
    gradient = np.zeros_like(base)
    for j in range(base.size):
        bumped = base.copy()
        bumped[j] = base[j] + h
        upper = grpo_objective(refresh_logprobs(groups, policy.with_params(bumped)), grpo_config).objective
        bumped[j] = base[j] - h
        lower = grpo_objective(refresh_logprobs(groups, policy.with_params(bumped)), grpo_config).objective
        gradient[j] = (upper - lower) / (2 * h)
    return gradient


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| / max(|a| + |n|, tiny)"""
    scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


######################################################################
# E V A L U A T I O N
######################################################################

@dataclass(frozen=True)
class Evaluation:
    """Expected rewards of a policy on a held-out view"""
    phase: Phase
    count: int
    format_rate: float
    acc_reward: float
    total_reward: float
    by_category: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        """evaluation.jsonl line"""
        return {
            "phase": self.phase.name,
            "count": self.count,
            "format_rate": self.format_rate,
            "acc_reward": self.acc_reward,
            "total_reward": self.total_reward,
            "acc_reward_by_category": self.by_category,
        }


def evaluate_policy(policy: ToyPolicy, env: ToyEnvironment, samples: Sequence[Sample], phase: Phase,
                    reward_config: RewardConfig = RewardConfig()) -> Evaluation:
    """Exact expectation over the 2V possible outputs of every sample"""
    formats, accuracies, totals = [], [], []
    per_category: Dict[str, List[float]] = {}
    for sample in samples:
        observation = env.observe(sample, phase)
        probs = policy.answer_probs(observation)
        gate = policy.format_prob(observation)
        scored = [score_total(format_output(k, True), sample, reward_config) for k in range(policy.vocab_size)]
        # bare outputs always score zero
        accuracy = gate * float(np.dot(probs, [b.r_acc for b in scored]))
        total = gate * float(np.dot(probs, [b.r_total for b in scored]))
        formats.append(gate)
        accuracies.append(accuracy)
        totals.append(total)
        per_category.setdefault(sample.category.value, []).append(accuracy)
    return Evaluation(
        phase=phase,
        count=len(samples),
        format_rate=float(np.mean(formats)),
        acc_reward=float(np.mean(accuracies)),
        total_reward=float(np.mean(totals)),
        by_category={k: float(np.mean(v)) for k, v in sorted(per_category.items())},
    )


######################################################################
# C H E C K P O I N T S
######################################################################

def save_checkpoint(path: str, state: TrainState) -> None:
    """Versioned JSON checkpoint of the parameters and counters"""
    policy = state.policy
    payload = {
        "version": CHECKPOINT_VERSION,
        "phase": state.phase.name,
        "step": state.step,
        "phase_step": state.phase_step,
        "seed": state.seed,
        "feature_dim": policy.feature_dim,
        "vocab_size": policy.vocab_size,
        "feature_scale": policy.feature_scale,
        "theta": policy.theta.tolist(),
        "gate": policy.gate.tolist(),
    }
    try:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(dumps(payload) + "\n")
    except OSError as error:
        raise DatasetIOError(f"Cannot write checkpoint '{path}': {error.strerror}") from error


def load_checkpoint(path: str) -> Tuple[ToyPolicy, dict]:
    """Restores the policy and returns the checkpoint's counters"""
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except OSError as error:
        raise DatasetIOError(f"Cannot read checkpoint '{path}': {error.strerror}") from error
    except json.JSONDecodeError as error:
        raise SchemaError(f"Checkpoint is not valid JSON: {error.msg}") from error
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"Unsupported checkpoint version {payload.get('version')!r}", "version")
    params = np.concatenate([np.asarray(payload["theta"], dtype=np.float64).ravel(),
                             np.asarray(payload["gate"], dtype=np.float64)])
    policy = ToyPolicy(payload["feature_dim"], payload["vocab_size"], payload["feature_scale"], params)
    counters = {k: payload[k] for k in ("phase", "step", "phase_step", "seed")}
    return policy, counters


######################################################################
# C U R R I C U L U M
######################################################################

@dataclass
class CurriculumResult:
    """Final policy, per-step metrics and per-phase evaluations"""
    policy: ToyPolicy
    metrics: List[dict]
    evaluations: List[Evaluation]

    def final_evaluation(self, phase: Phase = Phase.MRE) -> Optional[Evaluation]:
        """Last evaluation of a phase, if it ran"""
        matching = [e for e in self.evaluations if e.phase is phase]
        return matching[-1] if matching else None


def _phase_samples(plan: CurriculumPlan, phase: Phase, env: ToyEnvironment) -> List[Sample]:
    spec = plan.spec(phase)
    if spec.dataset:
        return load_dataset(spec.dataset, expected_modality(phase))
    return env.gen_tasks(phase, plan.tasks_per_phase, seed=[plan.seed, 0, phase.value], prefix="train")


def heldout_tasks(plan: CurriculumPlan, phase: Phase, env: ToyEnvironment) -> List[Sample]:
    """Held-out tasks under a seed derived from the plan seed"""
    return env.gen_tasks(phase, plan.heldout_size, seed=[plan.seed, 1, phase.value], prefix="heldout")


def run_curriculum(
    plan: CurriculumPlan,
    task_config: Optional[SyntheticTaskConfig] = None,
    reward_config: RewardConfig = RewardConfig(),
    grpo_config: GrpoConfig = GrpoConfig(),
    out_dir: Optional[str] = None,
    grad_check_every: int = config.GRAD_CHECK_EVERY,
    dump_rollouts_every: int = config.DUMP_ROLLOUTS_EVERY,
) -> CurriculumResult:
    """Runs every phase of the plan in order

    With out_dir set, writes metrics.jsonl (flushed per step), evaluation.jsonl,
    one checkpoint per phase and checkpoint-final.json. With dump_rollouts_every
    also set, the rollout groups of every N-th step go to rollouts.jsonl.
    """
    if task_config is None:
        task_config = SyntheticTaskConfig.from_settings(dict(plan.task_settings), seed=plan.seed)
    env = ToyEnvironment(task_config)
    policy = ToyPolicy.for_environment(env)
    state = TrainState.start(policy, plan.order[0], plan.seed, plan.early_exit_window)
    metrics: List[dict] = []
    evaluations: List[Evaluation] = []

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    with ExitStack() as stack:
        writer = stack.enter_context(JsonlWriter(os.path.join(out_dir, "metrics.jsonl"))) if out_dir else None
        rollout_writer = None
        if out_dir and dump_rollouts_every:
            rollout_writer = stack.enter_context(JsonlWriter(os.path.join(out_dir, "rollouts.jsonl")))
        for phase in plan.order:
            state = state.enter_phase(phase)
            spec = plan.spec(phase)
            phase_grpo = spec.grpo_config(grpo_config)
            logger.info("Phase %s starts at step %d (budget %d)", phase.name, state.step, spec.steps)
            if advance_phase(plan, PhaseProgress(phase, 0)) is Transition.STAY:
                phase_grpo.check_trainable()
                view = select_phase_data(plan, phase, _phase_samples(plan, phase, env))
                stream = PhaseStream(view.samples, spec.batch_size, seed=[plan.seed, phase.value])
                while advance_phase(plan, PhaseProgress(phase, state.phase_step, state.recent_rewards)) is Transition.STAY:
                    state, stats = train_step(state, stream.next_batch(), env, reward_config, phase_grpo)
                    record = stats.to_record()
                    metrics.append(record)
                    if writer:
                        writer.write(record)
                    if rollout_writer and stats.step % dump_rollouts_every == 0:
                        dump_rollouts(stats.groups, rollout_writer, phase_grpo, step=stats.step, phase=phase.name)
                    if grad_check_every and stats.step % grad_check_every == 0:
                        _spot_check(state, stats, phase_grpo)
            evaluation = evaluate_policy(
                state.policy, env, list(select_phase_data(plan, phase, heldout_tasks(plan, phase, env))),
                phase, reward_config,
            )
            evaluations.append(evaluation)
            logger.info("Phase %s done after %d steps: format %.3f, accuracy reward %.3f",
                        phase.name, state.phase_step, evaluation.format_rate, evaluation.acc_reward)
            if out_dir:
                save_checkpoint(os.path.join(out_dir, f"checkpoint-{phase.name}.json"), state)

    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint-final.json"), state)
        with JsonlWriter(os.path.join(out_dir, "evaluation.jsonl")) as eval_writer:
            for evaluation in evaluations:
                eval_writer.write(evaluation.to_record())
    return CurriculumResult(state.policy, metrics, evaluations)


def _spot_check(state: TrainState, stats: StepStats, grpo_config: GrpoConfig) -> None:
    """Compares the analytic gradient with central differences at the pre-update parameters"""
    policy = state.policy.with_params(state.old_params)
    groups = list(stats.groups)
    error = relative_error(grpo_gradient(groups, policy, grpo_config),
                           finite_diff_grad(policy, groups, 1e-5, grpo_config))
    log = logger.warning if error >= 1e-5 else logger.info
    log("Gradient check at step %d: relative error %.2e", stats.step, error)
