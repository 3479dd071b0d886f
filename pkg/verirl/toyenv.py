"""
Synthetic verifiable tasks and a small analytic policy

Tasks are additions a + b with a known integer answer. Text-only tasks state
both operands. Multimodal tasks hide the first operand behind an opaque fact
symbol (the "image"): its value comes from a seeded fact table, and the caption
states that value.

The policy observes sparse binary features, scaled by feature_scale, from
three channels, each enabled per phase:

    bias        always on
    text pair   the first two in-range numbers of the question (and caption)
    fact pair   (fact symbol, last question number)

It answers with a softmax over the V candidate integers. A sigmoid gate picks
between a formatted output "<think>...</think> \\boxed{k}" and a bare "k".
Log-probabilities and their gradients are closed form.
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from verirl import config
from verirl.curriculum import Phase
from verirl.models import ConfigError, GroundTruth, ImageCategory, Modality, Sample, TruthType

logger = logging.getLogger("verirl")

THINK_TEXT = "add the two numbers"
FACT_PREFIX = "fact-"
CAPTION_TEMPLATES = (
    "{value}",
    "The image shows the number {value}.",
    "The picture is a plain card. The image shows the number {value} in large print.",
)
MULTIMODAL_CATEGORIES = (ImageCategory.MATHGEO, ImageCategory.CHART, ImageCategory.TABLE, ImageCategory.AIGC)

_NUMBER_RE = re.compile(r"\d+")
_FACT_RE = re.compile(r"^" + FACT_PREFIX + r"sym(\d+)$")
_FORMATTED_RE = re.compile(r"^<think>([^<]+)</think> \\boxed\{(\d+)\}$")
_BARE_RE = re.compile(r"^(\d+)$")


class UnparseableOutput(ValueError):
    """Text outside the policy's output grammar"""


class Channel(Enum):
    """Observation channels"""
    QUESTION = "question"
    CAPTION = "caption"
    FACT = "fact"


PHASE_CHANNELS = {
    Phase.FRA: frozenset({Channel.QUESTION}),
    Phase.CMRA: frozenset({Channel.QUESTION, Channel.CAPTION, Channel.FACT}),
    Phase.MRE: frozenset({Channel.QUESTION, Channel.FACT}),
}


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Task generator and feature layout"""
    seed: int = config.SEED
    operand_low: int = 0
    operand_high: int = 3
    vocab_size: int = 8
    fact_table_size: int = 4
    caption_verbosity: int = 1
    feature_scale: float = 4.0
    visibility: Dict[Phase, FrozenSet[Channel]] = field(
        default_factory=lambda: dict(PHASE_CHANNELS), hash=False, compare=False
    )

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if not 0 <= self.operand_low <= self.operand_high:
            raise ConfigError("operands need 0 <= operand_low <= operand_high")
        if 2 * self.operand_high >= self.vocab_size:
            raise ConfigError(
                f"operand range {self.operand_low}..{self.operand_high} yields answers up to "
                f"{2 * self.operand_high}, outside a vocabulary of {self.vocab_size}"
            )
        if self.fact_table_size < 1:
            raise ConfigError("fact_table_size must be positive")
        if not 0 <= self.caption_verbosity < len(CAPTION_TEMPLATES):
            raise ConfigError(f"caption_verbosity must lie in 0..{len(CAPTION_TEMPLATES) - 1}")
        if self.feature_scale <= 0:
            raise ConfigError("feature_scale must be positive")

    @classmethod
    def from_settings(cls, settings: Dict[str, str], seed: int = config.SEED) -> "SyntheticTaskConfig":
        """Builds a config from plan keys such as OPERAND_HIGH=3"""
        kinds = {
            "OPERAND_LOW": ("operand_low", int),
            "OPERAND_HIGH": ("operand_high", int),
            "VOCAB_SIZE": ("vocab_size", int),
            "FACT_TABLE_SIZE": ("fact_table_size", int),
            "CAPTION_VERBOSITY": ("caption_verbosity", int),
            "FEATURE_SCALE": ("feature_scale", float),
        }
        values = {"seed": seed}
        for key, raw in settings.items():
            if key not in kinds:
                continue
            name, kind = kinds[key]
            try:
                values[name] = kind(raw)
            except ValueError as error:
                raise ConfigError(f"Invalid value for {key}: {raw!r}") from error
        return cls(**values)

    @property
    def operand_count(self) -> int:
        """N, the number of distinct operand values"""
        return self.operand_high - self.operand_low + 1

    @property
    def feature_dim(self) -> int:
        """bias + N*N text pairs + table*N fact pairs"""
        n = self.operand_count
        return 1 + n * n + self.fact_table_size * n


@dataclass(frozen=True)
class ToyObservation:
    """Active feature indices and the channels they were allowed to come from"""
    features: Tuple[int, ...]
    channels: FrozenSet[Channel]


@dataclass(frozen=True)
class Rollout:
    """G sampled outputs with their log-probabilities"""
    outputs: Tuple[str, ...]
    logprobs: np.ndarray = field(compare=False)


######################################################################
# T A S K S
######################################################################

class ToyEnvironment:
    """Generates tasks and turns samples into observations"""

    def __init__(self, task_config: SyntheticTaskConfig = SyntheticTaskConfig()):
        self.config = task_config
        table_rng = np.random.default_rng([task_config.seed, 0xFAC7])
        permutation = table_rng.permutation(task_config.fact_table_size)
        self.fact_table = tuple(int(task_config.operand_low + p % task_config.operand_count) for p in permutation)

    @property
    def feature_dim(self) -> int:
        """Length of the feature vector"""
        return self.config.feature_dim

    def caption(self, value: int) -> str:
        """Verbal description of a fact card"""
        return CAPTION_TEMPLATES[self.config.caption_verbosity].format(value=value)

    def gen_tasks(self, phase: Phase, count: int,
                  seed: Union[int, Sequence[int], None] = None, prefix: str = "task") -> List[Sample]:
        """Deterministic task list; text-only for FRA, fact-card tasks otherwise"""
        if count < 0:
            raise ConfigError("count must be non-negative")
        cfg = self.config
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        samples = []
        for index in range(count):
            sample_id = f"{prefix}-{phase.name.lower()}-{index:05d}"
            b = int(rng.integers(cfg.operand_low, cfg.operand_high + 1))
            if phase is Phase.FRA:
                a = int(rng.integers(cfg.operand_low, cfg.operand_high + 1))
                samples.append(Sample(
                    id=sample_id,
                    question=f"What is {a} + {b}?",
                    truth=GroundTruth(TruthType.MATH, str(a + b)),
                ))
                continue
            symbol = int(rng.integers(cfg.fact_table_size))
            category = MULTIMODAL_CATEGORIES[int(rng.integers(len(MULTIMODAL_CATEGORIES)))]
            a = self.fact_table[symbol]
            samples.append(Sample(
                id=sample_id,
                question=f"What is the number in the image plus {b}?",
                truth=GroundTruth(TruthType.MATH, str(a + b)),
                images=(f"{FACT_PREFIX}sym{symbol}",),
                caption=self.caption(a),
                category=category,
                modality=Modality.MULTIMODAL,
            ))
        logger.debug("Generated %d %s tasks", count, phase.name)
        return samples

    ######################################################################
    # O B S E R V A T I O N S
    ######################################################################

    def _in_range(self, text: str) -> List[int]:
        low, high = self.config.operand_low, self.config.operand_high
        return [n for n in (int(m) for m in _NUMBER_RE.findall(text)) if low <= n <= high]

    def text_pair_index(self, a: int, b: int) -> int:
        """Feature index of an operand pair read from text"""
        n, low = self.config.operand_count, self.config.operand_low
        return 1 + (a - low) * n + (b - low)

    def fact_pair_index(self, symbol: int, b: int) -> int:
        """Feature index of a (fact symbol, operand) pair"""
        n, low = self.config.operand_count, self.config.operand_low
        return 1 + n * n + symbol * n + (b - low)

    def channel_of(self, index: int) -> Optional[Channel]:
        """Which channel a feature index belongs to; None for the bias"""
        if index == 0:
            return None
        n = self.config.operand_count
        return Channel.QUESTION if index <= n * n else Channel.FACT

    def observe(self, sample: Sample, phase: Phase) -> ToyObservation:
        """Features of a sample under the phase's channel mask"""
        channels = self.config.visibility[phase]
        features = [0]
        question_numbers = self._in_range(sample.question)
        if Channel.QUESTION in channels:
            numbers = list(question_numbers)
            if Channel.CAPTION in channels and sample.caption and not sample.augmented:
                numbers = self._in_range(sample.caption) + numbers
            if len(numbers) >= 2:
                features.append(self.text_pair_index(numbers[0], numbers[1]))
        if Channel.FACT in channels and question_numbers:
            for ref in sample.images:
                match = _FACT_RE.match(ref)
                if match and int(match.group(1)) < self.config.fact_table_size:
                    features.append(self.fact_pair_index(int(match.group(1)), question_numbers[-1]))
                    break
        return ToyObservation(tuple(features), channels)


######################################################################
# P O L I C Y
######################################################################

def format_output(answer: int, formatted: bool) -> str:
    """Output text for an answer index"""
    return f"<think>{THINK_TEXT}</think> \\boxed{{{answer}}}" if formatted else str(answer)


@lru_cache(maxsize=1024)
def parse_output(output: str) -> Tuple[int, bool]:
    """(answer, formatted) of an output the policy can produce"""
    match = _FORMATTED_RE.match(output)
    if match:
        return int(match.group(2)), True
    match = _BARE_RE.match(output)
    if match:
        return int(match.group(1)), False
    raise UnparseableOutput(f"Output outside the policy grammar: {output[:40]!r}")


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


class ToyPolicy:
    """Softmax answer head and sigmoid format gate over shared sparse features"""

    def __init__(self, feature_dim: int, vocab_size: int,
                 feature_scale: float = 4.0, params: Optional[np.ndarray] = None):
        self.feature_dim = feature_dim
        self.vocab_size = vocab_size
        self.feature_scale = feature_scale
        size = feature_dim * (vocab_size + 1)
        if params is None:
            params = np.zeros(size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ConfigError(f"Expected {size} parameters, got shape {params.shape}")
        self.params = params

    @classmethod
    def for_environment(cls, env: ToyEnvironment) -> "ToyPolicy":
        """Uniform policy sized for an environment"""
        return cls(env.feature_dim, env.config.vocab_size, env.config.feature_scale)

    @property
    def theta(self) -> np.ndarray:
        """Answer weights, feature_dim x V (a view)"""
        return self.params[:self.feature_dim * self.vocab_size].reshape(self.feature_dim, self.vocab_size)

    @property
    def gate(self) -> np.ndarray:
        """Format-gate weights, feature_dim (a view)"""
        return self.params[self.feature_dim * self.vocab_size:]

    def with_params(self, params: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(self.feature_dim, self.vocab_size, self.feature_scale, np.array(params, dtype=np.float64))

    def copy(self) -> "ToyPolicy":
        """Independent copy"""
        return self.with_params(self.params)

    def logits(self, observation: ToyObservation) -> Tuple[np.ndarray, float]:
        rows = list(observation.features)
        logits = self.feature_scale * self.theta[rows].sum(axis=0)
        gate_logit = self.feature_scale * float(self.gate[rows].sum())
        return logits, gate_logit

    def answer_log_probs(self, observation: ToyObservation) -> np.ndarray:
        """log softmax over the V answers"""
        logits, _ = self.logits(observation)
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    def answer_probs(self, observation: ToyObservation) -> np.ndarray:
        """softmax over the V answers"""
        return np.exp(self.answer_log_probs(observation))

    def format_prob(self, observation: ToyObservation) -> float:
        """Probability that the gate emits the formatted output"""
        _, gate_logit = self.logits(observation)
        return float(np.exp(_log_sigmoid(gate_logit)))

    def logprob(self, observation: ToyObservation, output: str) -> float:
        answer, formatted = parse_output(output)
        if answer >= self.vocab_size:
            raise UnparseableOutput(f"Answer {answer} is outside a vocabulary of {self.vocab_size}")
        logits, gate_logit = self.logits(observation)
        shifted = logits - logits.max()
        log_softmax = shifted[answer] - np.log(np.exp(shifted).sum())
        return float(log_softmax) + _log_sigmoid(gate_logit if formatted else -gate_logit)

    def logprob_grad(self, observation: ToyObservation, output: str) -> Tuple[float, np.ndarray]:
        answer, formatted = parse_output(output)
        if answer >= self.vocab_size:
            raise UnparseableOutput(f"Answer {answer} is outside a vocabulary of {self.vocab_size}")
        logits, gate_logit = self.logits(observation)
        shifted = logits - logits.max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        rows = list(observation.features)
        gradient = np.zeros_like(self.params)
        theta_grad = gradient[:self.feature_dim * self.vocab_size].reshape(self.feature_dim, self.vocab_size)
        gate_grad = gradient[self.feature_dim * self.vocab_size:]
        # d log softmax_k / d z = onehot(k) - p
        delta = -probs
        delta[answer] += 1.0
        theta_grad[rows] += self.feature_scale * delta
        gate_prob = float(np.exp(_log_sigmoid(gate_logit)))
        gate_grad[rows] += self.feature_scale * ((1.0 - gate_prob) if formatted else -gate_prob)
        logprob = float(np.log(probs[answer])) + _log_sigmoid(gate_logit if formatted else -gate_logit)
        return logprob, gradient


def sample_outputs(policy: ToyPolicy, observation: ToyObservation, group_size: int,
                   rng: np.random.Generator) -> Rollout:
    """Draws G outputs: the gate decides the format, the softmax the answer"""
    if group_size < 1:
        raise ConfigError("group_size must be at least 1")
    log_probs = policy.answer_log_probs(observation)
    probs = np.exp(log_probs)
    _, gate_logit = policy.logits(observation)
    formatted = rng.random(group_size) < np.exp(_log_sigmoid(gate_logit))
    answers = rng.choice(policy.vocab_size, size=group_size, p=probs / probs.sum())
    outputs = tuple(format_output(int(k), bool(f)) for k, f in zip(answers, formatted))
    gate_terms = np.where(formatted, _log_sigmoid(gate_logit), _log_sigmoid(-gate_logit))
    return Rollout(outputs, log_probs[answers] + gate_terms)


def policy_logprob_grad(policy: ToyPolicy, observation: ToyObservation, output: str) -> Tuple[float, np.ndarray]:
    """log pi(output | observation) and its closed-form gradient"""
    return policy.logprob_grad(observation, output)


def gen_tasks(task_config: SyntheticTaskConfig, phase: Phase, count: int) -> List[Sample]:
    """Tasks of one phase under the config's seed"""
    return ToyEnvironment(task_config).gen_tasks(phase, count)
