"""
Three-phase curriculum

FRA   foundational reasoning on text-only samples, untouched
CMRA  cross-modal adaptation on captioned multimodal samples, caption
      prepended to the question
MRE   multimodal reasoning on multimodal samples with the caption removed

A plan fixes which phases run, in that order, with a step budget, a dataset
and GRPO overrides per phase. Phases advance when their budget is spent, or
earlier when the rolling mean reward reaches an optional threshold.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from verirl import config
from verirl.common.jsonl import read_jsonl
from verirl.grpo import GrpoConfig
from verirl.models import (
    ConfigError,
    DataValidationError,
    EmptyPhaseData,
    MissingCaption,
    Modality,
    PlanError,
    Sample,
    SchemaError,
)

logger = logging.getLogger("verirl")

CAPTION_TEMPLATE = "Image description: {caption}\n"


class AlreadyAugmented(DataValidationError):
    """The question already carries a caption prefix"""


class Phase(IntEnum):
    """Curriculum phases in training order"""
    FRA = 1
    CMRA = 2
    MRE = 3

    @classmethod
    def parse(cls, name: str) -> "Phase":
        """Phase from its name, case-insensitive"""
        try:
            return cls[name.strip().upper()]
        except KeyError as error:
            raise PlanError(f"Unknown phase '{name}'; expected one of FRA, CMRA, MRE") from error


class Transform(Enum):
    """Question rewrite applied to a phase's samples"""
    IDENTITY = "identity"
    CAPTION_AUGMENT = "caption-augment"
    CAPTION_STRIP = "caption-strip"


class Transition(Enum):
    """Outcome of advance_phase"""
    STAY = "stay"
    ADVANCE = "advance"
    TERMINAL = "terminal"


PHASE_TRANSFORMS = {
    Phase.FRA: Transform.IDENTITY,
    Phase.CMRA: Transform.CAPTION_AUGMENT,
    Phase.MRE: Transform.CAPTION_STRIP,
}

_GRPO_KEYS = {
    "LR": ("learning_rate", float),
    "BETA": ("beta", float),
    "EPSILON": ("epsilon", float),
    "GROUP_SIZE": ("group_size", int),
}
_PHASE_KEYS = ("STEPS", "DATASET", "TRANSFORM", "BATCH_SIZE") + tuple(_GRPO_KEYS)
_GLOBAL_KEYS = ("PHASES", "EARLY_EXIT_THRESHOLD", "EARLY_EXIT_WINDOW", "TASKS_PER_PHASE", "HELDOUT_SIZE", "SEED")
TASK_KEYS = ("OPERAND_LOW", "OPERAND_HIGH", "VOCAB_SIZE", "FACT_TABLE_SIZE", "CAPTION_VERBOSITY", "FEATURE_SCALE")


######################################################################
# P L A N
######################################################################

@dataclass(frozen=True)
class PhaseSpec:
    """Budget, data and optimizer overrides of one phase"""
    phase: Phase
    steps: int
    transform: Transform
    batch_size: int = config.BATCH_SIZE
    dataset: Optional[str] = None
    overrides: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.steps < 0:
            raise PlanError(f"{self.phase.name}: step budget must be non-negative")
        if self.batch_size < 1:
            raise PlanError(f"{self.phase.name}: batch size must be positive")
        if self.transform is not PHASE_TRANSFORMS[self.phase]:
            raise PlanError(
                f"{self.phase.name} must use the {PHASE_TRANSFORMS[self.phase].value} transform, "
                f"not {self.transform.value}"
            )
        try:
            self.grpo_config(GrpoConfig())
        except ConfigError as error:
            raise PlanError(f"{self.phase.name}: {error}") from error

    def grpo_config(self, base: GrpoConfig) -> GrpoConfig:
        """The base GRPO config with this phase's overrides applied"""
        return base.evolve(**dict(self.overrides))


@dataclass(frozen=True)
class CurriculumPlan:
    """Ordered phases plus run-wide settings"""
    phases: Tuple[PhaseSpec, ...]
    early_exit_threshold: Optional[float] = None
    early_exit_window: int = 20
    tasks_per_phase: int = 512
    heldout_size: int = 256
    seed: int = config.SEED
    task_settings: Tuple[Tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        if not self.phases:
            raise PlanError("A plan needs at least one phase")
        order = [spec.phase for spec in self.phases]
        if any(later <= earlier for earlier, later in zip(order, order[1:])):
            raise PlanError("Phases must appear in FRA, CMRA, MRE order, each at most once: "
                            + ",".join(p.name for p in order))
        if self.early_exit_window < 1:
            raise PlanError("EARLY_EXIT_WINDOW must be positive")
        if self.tasks_per_phase < 1 or self.heldout_size < 1:
            raise PlanError("TASKS_PER_PHASE and HELDOUT_SIZE must be positive")
        if self.seed < 0:
            raise PlanError("SEED must be non-negative")

    @property
    def order(self) -> Tuple[Phase, ...]:
        """Phases in execution order"""
        return tuple(spec.phase for spec in self.phases)

    def spec(self, phase: Phase) -> PhaseSpec:
        """The PhaseSpec of a phase in this plan"""
        for spec in self.phases:
            if spec.phase is phase:
                return spec
        raise PlanError(f"Phase {phase.name} is not part of this plan")

    def next_phase(self, phase: Phase) -> Optional[Phase]:
        """The phase after this one, or None at the end of the plan"""
        order = self.order
        index = order.index(self.spec(phase).phase)
        return order[index + 1] if index + 1 < len(order) else None

    def skip_phases(self, skipped: Iterable[Phase]) -> "CurriculumPlan":
        """Plan without some phases, for ablations"""
        skipped = set(skipped)
        kept = tuple(spec for spec in self.phases if spec.phase not in skipped)
        return CurriculumPlan(kept, self.early_exit_threshold, self.early_exit_window,
                              self.tasks_per_phase, self.heldout_size, self.seed, self.task_settings)


def _number(settings: Mapping[str, str], key: str, kind, default):
    raw = settings.get(key)
    if raw is None or str(raw).strip() == "":
        return default
    try:
        return kind(str(raw).strip())
    except ValueError as error:
        raise PlanError(f"Invalid value for {key}: {raw!r}") from error


def plan_from_settings(settings: Mapping[str, str]) -> CurriculumPlan:
    """Builds a plan from flat KEY=VALUE settings"""
    settings = {key.strip().upper(): value for key, value in settings.items()}
    known = set(_GLOBAL_KEYS) | set(TASK_KEYS) | {f"{p.name}_{k}" for p in Phase for k in _PHASE_KEYS}
    unknown = sorted(set(settings) - known)
    if unknown:
        raise PlanError("Unknown plan keys: " + ", ".join(unknown))

    names = [n for n in (settings.get("PHASES") or "FRA,CMRA,MRE").split(",") if n.strip()]
    specs = []
    for phase in (Phase.parse(n) for n in names):
        prefix = phase.name + "_"
        try:
            transform = Transform(settings.get(prefix + "TRANSFORM") or PHASE_TRANSFORMS[phase].value)
        except ValueError as error:
            raise PlanError(f"Invalid value for {prefix}TRANSFORM: {settings[prefix + 'TRANSFORM']!r}") from error
        overrides = []
        for key, (name, kind) in _GRPO_KEYS.items():
            value = _number(settings, prefix + key, kind, None)
            if value is not None:
                overrides.append((name, value))
        specs.append(PhaseSpec(
            phase=phase,
            steps=_number(settings, prefix + "STEPS", int, config.PHASE_STEPS[phase.name]),
            transform=transform,
            batch_size=_number(settings, prefix + "BATCH_SIZE", int, config.BATCH_SIZE),
            dataset=settings.get(prefix + "DATASET") or None,
            overrides=tuple(overrides),
        ))
    return CurriculumPlan(
        phases=tuple(specs),
        early_exit_threshold=_number(settings, "EARLY_EXIT_THRESHOLD", float, None),
        early_exit_window=_number(settings, "EARLY_EXIT_WINDOW", int, 20),
        tasks_per_phase=_number(settings, "TASKS_PER_PHASE", int, 512),
        heldout_size=_number(settings, "HELDOUT_SIZE", int, 256),
        seed=_number(settings, "SEED", int, config.SEED),
        task_settings=tuple(sorted((k, str(v)) for k, v in settings.items() if k in TASK_KEYS)),
    )


def load_plan(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> CurriculumPlan:
    """Plan from an optional KEY=VALUE file with explicit overrides on top"""
    settings: Dict[str, str] = {}
    if path:
        try:
            settings.update(config.read_config_file(path))
        except FileNotFoundError as error:
            raise PlanError(f"Plan file not found: {path}") from error
    settings.update(overrides or {})
    plan = plan_from_settings(settings)
    logger.info("Curriculum plan: %s", " -> ".join(
        f"{spec.phase.name}({spec.steps})" for spec in plan.phases))
    return plan


def default_plan() -> CurriculumPlan:
    """FRA 500, CMRA 500 and MRE 1000 steps unless the environment says otherwise"""
    return plan_from_settings({})


######################################################################
# D A T A S E T S
######################################################################

def expected_modality(phase: Phase) -> Modality:
    """Modality a phase's own dataset file must have"""
    return Modality.TEXT if phase is Phase.FRA else Modality.MULTIMODAL


def load_dataset(path: str, modality: Optional[Modality] = None) -> List[Sample]:
    """Reads and validates a dataset JSONL file

    With a modality every record must have it; errors carry line numbers.
    """
    samples = []
    for number, data in read_jsonl(path):
        try:
            sample = Sample.deserialize(data)
        except SchemaError as error:
            raise error.at_line(number) from error
        if modality is not None and sample.modality is not modality:
            raise SchemaError(
                f"Modality mismatch: expected {modality.value}, found {sample.modality.value}",
                "modality",
                number,
            )
        samples.append(sample)
    logger.info("Loaded %d samples from %s", len(samples), path)
    return samples


def augment_with_caption(sample: Sample) -> Sample:
    """Prepends the caption to the question; caption, images and truth are kept"""
    if sample.augmented:
        raise AlreadyAugmented(f"Sample {sample.id} is already caption-augmented")
    if not sample.caption or not sample.caption.strip():
        raise MissingCaption(f"Sample {sample.id} has no caption to augment with")
    prefix = CAPTION_TEMPLATE.format(caption=sample.caption)
    return sample.evolve(question=prefix + sample.question, augmented=True)


def strip_caption(sample: Sample) -> Sample:
    """Removes the caption, and its question prefix when one was added"""
    if sample.caption is None and not sample.augmented:
        return sample
    question = sample.question
    if sample.augmented:
        prefix = CAPTION_TEMPLATE.format(caption=sample.caption)
        if not question.startswith(prefix):
            raise SchemaError(f"Sample {sample.id} is marked augmented but lacks its caption prefix", "question")
        question = question[len(prefix):]
    return sample.evolve(question=question, caption=None, augmented=False)


def apply_transform(transform: Transform, sample: Sample) -> Sample:
    """Dispatches one of the three transforms"""
    if transform is Transform.CAPTION_AUGMENT:
        return augment_with_caption(sample)
    if transform is Transform.CAPTION_STRIP:
        return strip_caption(sample)
    return sample


def _phase_filter(phase: Phase, sample: Sample) -> bool:
    if phase is Phase.FRA:
        return not sample.is_multimodal
    if phase is Phase.CMRA:
        return sample.is_multimodal and bool(sample.caption)
    return sample.is_multimodal


@dataclass(frozen=True)
class PhaseView:
    """The transformed samples a phase trains on"""
    phase: Phase
    samples: Tuple[Sample, ...]

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def category_counts(self) -> Dict[str, int]:
        """Samples per image category"""
        return category_counts(self.samples)


def select_phase_data(plan: CurriculumPlan, phase: Phase, dataset: Sequence[Sample],
                      seed: Optional[int] = None) -> PhaseView:
    """Filters and transforms a dataset for one phase

    Input order is kept unless a seed is given, in which case the view is a
    seeded permutation.
    """
    transform = plan.spec(phase).transform
    selected = [apply_transform(transform, s) for s in dataset if _phase_filter(phase, s)]
    if not selected:
        raise EmptyPhaseData(f"No samples qualify for phase {phase.name}")
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(selected))
        selected = [selected[i] for i in order]
    logger.info("Phase %s: %d samples selected", phase.name, len(selected))
    return PhaseView(phase, tuple(selected))


def category_counts(samples: Iterable[Sample]) -> Dict[str, int]:
    """Samples per image category, sorted by category name"""
    counts = Counter(s.category.value for s in samples)
    return dict(sorted(counts.items()))


class PhaseStream:
    """Endless batches over a phase view, reshuffled on every pass"""

    def __init__(self, samples: Sequence[Sample], batch_size: int, seed: int):
        if not samples:
            raise EmptyPhaseData("Cannot stream an empty dataset")
        self.samples = tuple(samples)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(self.samples))
        self.position = 0
        self.passes = 0

    def next_batch(self) -> List[Sample]:
        """The next batch_size samples, wrapping into a fresh permutation"""
        batch = []
        while len(batch) < self.batch_size:
            if self.position == len(self.order):
                self.order = self.rng.permutation(len(self.samples))
                self.position = 0
                self.passes += 1
            batch.append(self.samples[self.order[self.position]])
            self.position += 1
        return batch

    def __iter__(self):
        while True:
            yield self.next_batch()


######################################################################
# P H A S E   A D V A N C E M E N T
######################################################################

@dataclass(frozen=True)
class PhaseProgress:
    """What advance_phase looks at"""
    phase: Phase
    steps: int
    recent_rewards: Tuple[float, ...] = ()


def early_exit_reached(plan: CurriculumPlan, recent_rewards: Sequence[float]) -> bool:
    """Rolling mean reward over the window reached the threshold"""
    if plan.early_exit_threshold is None or len(recent_rewards) < plan.early_exit_window:
        return False
    window = recent_rewards[-plan.early_exit_window:]
    return float(np.mean(window)) >= plan.early_exit_threshold


def advance_phase(plan: CurriculumPlan, progress: PhaseProgress) -> Transition:
    """Stay, move to the next phase, or finish"""
    spec = plan.spec(progress.phase)
    done = progress.steps >= spec.steps or early_exit_reached(plan, progress.recent_rewards)
    if not done:
        return Transition.STAY
    if plan.next_phase(progress.phase) is None:
        return Transition.TERMINAL
    return Transition.ADVANCE
