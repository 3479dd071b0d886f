"""
Group-relative policy optimization

Advantages are computed from the reward statistics of the G outputs sampled
for one question, so no learned value function is involved. The objective
is the clipped surrogate with a KL penalty toward a frozen reference policy:

    J = mean over groups of (1/G) sum_i [ min(ratio_i A_i, clip(ratio_i) A_i)
                                          - beta KL_i ]

Ratios and KL terms are sequence level, so the per-token average of each
output collapses to the sequence term; output lengths are still carried for
token-level policies.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from verirl import config
from verirl.common.jsonl import JsonlWriter, write_jsonl
from verirl.models import ConfigError

logger = logging.getLogger("verirl")


class ShapeMismatch(ValueError):
    """Per-output vectors of a rollout group disagree in length"""


class Policy(Protocol):
    """What the optimizer needs from a policy"""

    params: np.ndarray

    def logprob(self, observation: Any, output: str) -> float:
        """log pi(output | observation)"""

    def logprob_grad(self, observation: Any, output: str) -> Tuple[float, np.ndarray]:
        """log pi(output | observation) and its gradient wrt the flat parameters"""

    def with_params(self, params: np.ndarray) -> "Policy":
        """A copy of the policy with other parameters"""


@dataclass(frozen=True)
class GrpoConfig:
    """Hyperparameters of the objective and of the ascent step"""
    group_size: int = config.GROUP_SIZE
    epsilon: float = config.CLIP_EPSILON
    beta: float = config.KL_BETA
    sigma_min: float = config.SIGMA_MIN
    learning_rate: float = config.LEARNING_RATE
    ratio_cap: float = config.RATIO_CAP

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigError("group_size must be at least 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.sigma_min <= 0:
            raise ConfigError(f"sigma_min must be positive, got {self.sigma_min}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.ratio_cap <= 1:
            raise ConfigError(f"ratio_cap must exceed 1, got {self.ratio_cap}")

    def check_trainable(self) -> "GrpoConfig":
        """Training needs at least two outputs per group"""
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2 for training")
        return self

    def evolve(self, **changes) -> "GrpoConfig":
        """Copy with overrides, re-validated"""
        return replace(self, **changes)


@dataclass
class RolloutGroup:
    """The G outputs sampled for one question and everything computed about them"""
    sample_id: str
    outputs: List[str]
    lengths: np.ndarray
    logp_new: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    rewards: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    observation: Any = field(default=None, repr=False, compare=False)

    @property
    def size(self) -> int:
        """G"""
        return len(self.outputs)

    def validate(self) -> "RolloutGroup":
        """Raises ShapeMismatch unless every per-output vector has length G"""
        size = self.size
        named = {
            "lengths": self.lengths,
            "logp_new": self.logp_new,
            "logp_old": self.logp_old,
            "logp_ref": self.logp_ref,
            "rewards": self.rewards,
            "advantages": self.advantages,
        }
        for name, values in named.items():
            if values is not None and np.shape(values) != (size,):
                raise ShapeMismatch(
                    f"group {self.sample_id}: {name} has shape {np.shape(values)}, expected ({size},)"
                )
        if np.any(np.asarray(self.lengths) < 1):
            raise ShapeMismatch(f"group {self.sample_id}: output lengths must be positive")
        return self

    def with_rewards(self, rewards: Sequence[float], sigma_min: float = config.SIGMA_MIN) -> "RolloutGroup":
        """Attaches rewards and the advantages derived from them"""
        rewards = np.asarray(rewards, dtype=np.float64)
        return replace(self, rewards=rewards, advantages=group_advantages(rewards, sigma_min)).validate()


@dataclass(frozen=True)
class GroupSummary:
    """Advantage telemetry of one group"""
    sample_id: str
    mean_reward: float
    reward_std: float
    degenerate: bool


@dataclass(frozen=True)
class SurrogateStats:
    """Objective value and training telemetry of one batch"""
    objective: float
    clip_fraction: float
    mean_kl: float
    mean_ratio: float
    capped: int
    groups: Tuple[GroupSummary, ...] = ()

    @property
    def degenerate_fraction(self) -> float:
        """Share of groups whose rewards were all equal"""
        if not self.groups:
            return 0.0
        return sum(g.degenerate for g in self.groups) / len(self.groups)


######################################################################
# O B J E C T I V E   P I E C E S
######################################################################

def group_advantages(rewards: Sequence[float], sigma_min: float = config.SIGMA_MIN) -> np.ndarray:
    """A_i = (r_i - mean(r)) / max(std(r), sigma_min), population std

    A group whose rewards are all equal carries no signal and gets zeros.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ShapeMismatch("rewards must be a non-empty vector")
    if np.ptp(rewards) == 0:
        return np.zeros_like(rewards)
    centered = rewards - rewards.mean()
    return centered / max(float(rewards.std()), sigma_min)


def prob_ratio(logp_new, logp_old, cap: float = config.RATIO_CAP):
    """exp(logp_new - logp_old) computed in log space and capped"""
    return np.exp(np.minimum(np.subtract(logp_new, logp_old), np.log(cap)))


def ratio_capped(logp_new, logp_old, cap: float = config.RATIO_CAP):
    """Flags ratios that prob_ratio clamped"""
    return np.subtract(logp_new, logp_old) > np.log(cap)


def clipped_term(ratio, advantage, epsilon: float = config.CLIP_EPSILON):
    """min(ratio A, clip(ratio, 1 - eps, 1 + eps) A)"""
    return np.minimum(
        np.multiply(ratio, advantage),
        np.multiply(np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon), advantage),
    )


def kl_penalty(logp_new, logp_ref):
    """u - log u - 1 with u = pi_ref / pi_new; zero exactly when the two agree"""
    log_u = np.subtract(logp_ref, logp_new)
    return np.maximum(np.expm1(log_u) - log_u, 0.0)


def _require_advantages(group: RolloutGroup) -> RolloutGroup:
    if group.advantages is None:
        raise ShapeMismatch(f"group {group.sample_id}: advantages are not populated")
    return group.validate()


def grpo_objective(groups: Sequence[RolloutGroup], grpo_config: GrpoConfig = GrpoConfig()) -> SurrogateStats:
    """Evaluates J over a batch of groups together with telemetry"""
    if not groups:
        raise ShapeMismatch("grpo_objective needs at least one group")
    eps, beta = grpo_config.epsilon, grpo_config.beta
    group_terms, kl_terms, ratio_terms = [], [], []
    clipped = capped = outputs = 0
    summaries = []
    for group in groups:
        _require_advantages(group)
        ratio = prob_ratio(group.logp_new, group.logp_old, grpo_config.ratio_cap)
        surrogate = clipped_term(ratio, group.advantages, eps)
        kl = kl_penalty(group.logp_new, group.logp_ref)
        # each of the |o_i| token terms equals the sequence term, so the token average is that term
        group_terms.append(float(np.mean(surrogate - beta * kl)))
        kl_terms.append(kl)
        ratio_terms.append(ratio)
        clipped += int(np.count_nonzero(ratio * group.advantages > surrogate))
        capped += int(np.count_nonzero(ratio_capped(group.logp_new, group.logp_old, grpo_config.ratio_cap)))
        outputs += group.size
        rewards = group.rewards if group.rewards is not None else np.zeros(group.size)
        summaries.append(GroupSummary(
            group.sample_id, float(np.mean(rewards)), float(np.std(rewards)), bool(np.ptp(rewards) == 0)
        ))
    if capped:
        logger.debug("Probability ratio capped at %g for %d outputs", grpo_config.ratio_cap, capped)
    return SurrogateStats(
        objective=float(np.mean(group_terms)),
        clip_fraction=clipped / outputs,
        mean_kl=float(np.mean(np.concatenate(kl_terms))),
        mean_ratio=float(np.mean(np.concatenate(ratio_terms))),
        capped=capped,
        groups=tuple(summaries),
    )


######################################################################
# G R A D I E N T
######################################################################

def output_weights(group: RolloutGroup, grpo_config: GrpoConfig = GrpoConfig()) -> np.ndarray:
    """dJ_group / d logp_new for every output of one group, before the 1/G factor

    The surrogate contributes ratio * A where the unclipped branch is selected
    and nothing where the clipped branch wins or the ratio was capped. The KL
    estimator contributes -beta * (1 - u).
    """
    _require_advantages(group)
    ratio = prob_ratio(group.logp_new, group.logp_old, grpo_config.ratio_cap)
    advantages = group.advantages
    unclipped = ratio * advantages <= np.clip(ratio, 1 - grpo_config.epsilon, 1 + grpo_config.epsilon) * advantages
    live = unclipped & ~ratio_capped(group.logp_new, group.logp_old, grpo_config.ratio_cap)
    surrogate = np.where(live, ratio * advantages, 0.0)
    u = np.exp(group.logp_ref - group.logp_new)
    return surrogate - grpo_config.beta * (1.0 - u)


def grpo_gradient(groups: Sequence[RolloutGroup], policy: Policy,
                  grpo_config: GrpoConfig = GrpoConfig()) -> np.ndarray:
    """Analytic gradient of grpo_objective wrt the policy's flat parameters"""
    if not groups:
        raise ShapeMismatch("grpo_gradient needs at least one group")
    gradient = np.zeros_like(policy.params, dtype=np.float64)
    for group in groups:
        weights = output_weights(group, grpo_config)
        for weight, output in zip(weights, group.outputs):
            if weight == 0.0:
                continue
            _, grad = policy.logprob_grad(group.observation, output)
            gradient += (weight / group.size) * grad
    return gradient / len(groups)


def refresh_logprobs(groups: Sequence[RolloutGroup], policy: Policy) -> List[RolloutGroup]:
    """Recomputes log pi_theta of the stored outputs under another parameter set"""
    refreshed = []
    for group in groups:
        logp = np.array([policy.logprob(group.observation, o) for o in group.outputs])
        refreshed.append(replace(group, logp_new=logp))
    return refreshed


def ascent_step(params: np.ndarray, gradient: np.ndarray, learning_rate: float) -> np.ndarray:
    """Plain gradient ascent on J"""
    if params.shape != gradient.shape:
        raise ShapeMismatch(f"gradient shape {gradient.shape} does not match parameters {params.shape}")
    return params + learning_rate * gradient


######################################################################
# R O L L O U T   D U M P
######################################################################

def rollout_records(groups: Sequence[RolloutGroup], grpo_config: GrpoConfig = GrpoConfig()) -> List[dict]:
    """One analysis record per group"""
    records = []
    for group in groups:
        ratio = prob_ratio(group.logp_new, group.logp_old, grpo_config.ratio_cap)
        records.append({
            "sample_id": group.sample_id,
            "outputs": list(group.outputs),
            "rewards": None if group.rewards is None else group.rewards.tolist(),
            "advantages": None if group.advantages is None else group.advantages.tolist(),
            "ratios": np.atleast_1d(ratio).tolist(),
            "kl": np.atleast_1d(kl_penalty(group.logp_new, group.logp_ref)).tolist(),
        })
    return records


def dump_rollouts(groups: Sequence[RolloutGroup], target: Union[str, JsonlWriter],
                  grpo_config: GrpoConfig = GrpoConfig(), **context) -> int:
    """Writes the rollout dump JSONL, returning the number of groups written

    The target is a path or an open JsonlWriter; context fields such as the
    step and phase are added to every record.
    """
    records = [{**context, **record} for record in rollout_records(groups, grpo_config)]
    if isinstance(target, JsonlWriter):
        for record in records:
            target.write(record)
        return len(records)
    return write_jsonl(records, target)
