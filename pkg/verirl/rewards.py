"""
Rule-based reward

R_total = w_f * R_format + w_a * R_acc, where R_format checks for exactly one
non-empty <think>...</think> block followed by a final answer, and R_acc is
computed only when the format check passes. Math and choice accuracy are
split into a type-match part (w_t) and a value-match part (w_p); string
accuracy is binary.

Scoring is pure, so results are memoized.
"""
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from verirl import config
from verirl.common.jsonl import read_jsonl
from verirl.mathexpr import EvalError, MathExpr, parse_math
from verirl.models import ConfigError, GroundTruth, Sample, SchemaError, TruthType
from verirl.verifier import (
    AnswerKind,
    ExtractedAnswer,
    InvalidChoice,
    choice_match,
    extract_answer,
    math_equivalent,
    reduce_choice,
    string_match,
)

logger = logging.getLogger("verirl")

ANSWER_MARKERS = ("boxed", "answer_tag")
_ANSWER_TAG_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_WEIGHT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RewardConfig:
    """Reward weights and output-format conventions"""
    w_f: float = config.W_FORMAT
    w_a: float = config.W_ACCURACY
    w_t: float = config.W_TYPE
    w_p: float = config.W_PARAM
    think_open: str = config.THINK_OPEN
    think_close: str = config.THINK_CLOSE
    answer_marker: str = config.ANSWER_MARKER

    def __post_init__(self):
        for name in ("w_f", "w_a", "w_t", "w_p"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Weight {name} must be non-negative")
        if abs(self.w_f + self.w_a - 1.0) > _WEIGHT_TOLERANCE:
            raise ConfigError(f"w_f + w_a must equal 1, got {self.w_f} + {self.w_a}")
        if abs(self.w_t + self.w_p - 1.0) > _WEIGHT_TOLERANCE:
            raise ConfigError(f"w_t + w_p must equal 1, got {self.w_t} + {self.w_p}")
        if not self.think_open or not self.think_close:
            raise ConfigError("Think tags cannot be empty")
        if self.answer_marker not in ANSWER_MARKERS:
            raise ConfigError(f"Answer marker must be one of {ANSWER_MARKERS}")


@dataclass(frozen=True)
class FormatVerdict:
    """Outcome of the two format criteria"""
    think_block_ok: bool
    final_answer_present: bool
    answer: Optional[str] = None

    @property
    def passed(self) -> bool:
        """R_format is 1 only when both criteria hold"""
        return self.think_block_ok and self.final_answer_present


@dataclass(frozen=True)
class RewardBreakdown:
    """Reward components of one output"""
    r_format: int
    r_acc: float
    r_total: float
    kind: TruthType
    notes: Tuple[str, ...] = ()

    def to_record(self, record_id) -> dict:
        """Grading output line"""
        return {
            "id": record_id,
            "r_format": self.r_format,
            "r_acc": self.r_acc,
            "r_total": self.r_total,
            "note": "; ".join(self.notes),
        }


######################################################################
# F O R M A T
######################################################################

def _last_boxed(text: str) -> str:
    marker = "\\boxed{"
    index = text.rfind(marker)
    if index == -1:
        return ""
    start = index + len(marker)
    depth, pos = 1, start
    while pos < len(text) and depth > 0:
        if text[pos] == "{":
            depth += 1
        elif text[pos] == "}":
            depth -= 1
        pos += 1
    if depth != 0:
        return ""
    return text[start:pos - 1].strip()


def _last_line(text: str) -> str:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    return lines[-1] if lines else ""


def check_format(output: str, reward_config: RewardConfig = RewardConfig()) -> FormatVerdict:
    """Checks the think block and the final answer that follows it"""
    open_tag, close_tag = reward_config.think_open, reward_config.think_close
    if output.count(open_tag) != 1 or output.count(close_tag) != 1:
        return FormatVerdict(False, False)
    start = output.index(open_tag) + len(open_tag)
    close = output.index(close_tag)
    if close < start or not output[start:close].strip():
        return FormatVerdict(False, False)
    tail = output[close + len(close_tag):]
    if reward_config.answer_marker == "answer_tag":
        tags = _ANSWER_TAG_RE.findall(tail)
        answer = tags[-1].strip() if tags else ""
    else:
        answer = _last_boxed(tail) or _last_line(tail)
    return FormatVerdict(True, bool(answer), answer or None)


######################################################################
# A C C U R A C Y
######################################################################

@lru_cache(maxsize=4096)
def _truth_expr(value: str) -> MathExpr:
    return parse_math(value)


def _accuracy(answer: ExtractedAnswer, truth: GroundTruth,
              reward_config: RewardConfig) -> Tuple[float, Tuple[str, ...]]:
    if truth.kind is TruthType.STRING:
        return (1.0 if string_match(answer.raw, truth.value) else 0.0), ()

    if truth.kind is TruthType.MATH:
        if answer.kind is AnswerKind.OPTION:
            answer = extract_answer(answer.raw, allow_option=False)
        type_ok = answer.kind is AnswerKind.EXPRESSION
        value_ok, notes = False, ()
        if type_ok:
            try:
                value_ok = math_equivalent(answer.expr, _truth_expr(truth.value))
            except EvalError as error:
                notes = (f"math_verify: {error}",)
        else:
            notes = (f"answer is {answer.kind.value}, not an expression",)
        return reward_config.w_t * type_ok + reward_config.w_p * value_ok, notes

    label = reduce_choice(answer.raw)
    type_ok = label is not None and label in truth.options
    try:
        value_ok = choice_match(answer.raw, truth.value, truth.options)
    except InvalidChoice as error:
        return 0.0, (f"choice: {error}",)
    return reward_config.w_t * type_ok + reward_config.w_p * value_ok, ()


def score_accuracy(answer: ExtractedAnswer, truth: GroundTruth,
                   reward_config: RewardConfig = RewardConfig()) -> float:
    """Accuracy of an extracted answer in [0, 1]; never raises"""
    return _accuracy(answer, truth, reward_config)[0]


######################################################################
# T O T A L   R E W A R D
######################################################################

@lru_cache(maxsize=65536)
def _score(output: str, truth: GroundTruth, reward_config: RewardConfig) -> RewardBreakdown:
    verdict = check_format(output, reward_config)
    if not verdict.passed:
        reason = "missing think block" if not verdict.think_block_ok else "missing final answer"
        r_format, r_acc, notes = 0, 0.0, (f"format: {reason}",)
    else:
        r_format = 1
        r_acc, notes = _accuracy(
            extract_answer(verdict.answer, allow_option=truth.kind is TruthType.CHOICE), truth, reward_config)
    r_total = reward_config.w_f * r_format + reward_config.w_a * r_acc
    return RewardBreakdown(r_format, r_acc, r_total, truth.kind, notes)


def score_total(output: str, sample: Union[Sample, GroundTruth],
                reward_config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """R_total of one output against a sample's ground truth"""
    truth = sample.truth if isinstance(sample, Sample) else sample
    return _score(output, truth, reward_config)


def score_group(outputs: Sequence[str], sample: Union[Sample, GroundTruth],
                reward_config: RewardConfig = RewardConfig(),
                workers: Optional[int] = None) -> List[float]:
    """Total rewards of G outputs for one sample, in output order"""
    if not outputs:
        raise ValueError("score_group needs at least one output")
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            breakdowns = list(pool.map(lambda o: score_total(o, sample, reward_config), outputs))
    else:
        breakdowns = [score_total(o, sample, reward_config) for o in outputs]
    return [b.r_total for b in breakdowns]


######################################################################
# B A T C H   G R A D I N G
######################################################################

@dataclass(frozen=True)
class GradingRecord:
    """One line of a grading file"""
    id: str
    output: str
    truth: GroundTruth


@dataclass(frozen=True)
class GradingSummary:
    """Aggregate numbers printed after a grading run"""
    count: int
    mean_total: float
    format_rate: float
    mean_accuracy: float


def parse_grading_record(data: dict) -> GradingRecord:
    """Validates one grading record"""
    for key in ("id", "output", "truth", "truth_type"):
        if key not in data:
            raise SchemaError("Invalid grading record: missing " + key, key)
    if not isinstance(data["output"], str):
        raise SchemaError("Invalid type for [output]: " + str(type(data["output"])), "output")
    truth = GroundTruth.from_record(data["truth"], data["truth_type"], data.get("options"))
    return GradingRecord(data["id"], data["output"], truth)


def read_grading_file(path: str) -> Iterable[GradingRecord]:
    """Yields validated grading records, attributing errors to line numbers"""
    for number, data in read_jsonl(path):
        try:
            yield parse_grading_record(data)
        except SchemaError as error:
            raise error.at_line(number) from error


def grade_records(records: Iterable[GradingRecord],
                  reward_config: RewardConfig = RewardConfig()) -> List[Tuple[str, RewardBreakdown]]:
    """Scores every record, keeping input order"""
    results = [(r.id, score_total(r.output, r.truth, reward_config)) for r in records]
    logger.info("Graded %d records", len(results))
    return results


def summarize(results: Sequence[Tuple[str, RewardBreakdown]]) -> GradingSummary:
    """Mean total reward, format-pass rate and mean accuracy"""
    count = len(results)
    if count == 0:
        return GradingSummary(0, 0.0, 0.0, 0.0)
    return GradingSummary(
        count,
        sum(b.r_total for _, b in results) / count,
        sum(b.r_format for _, b in results) / count,
        sum(b.r_acc for _, b in results) / count,
    )
