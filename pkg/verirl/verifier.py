"""
Answer verification for the three task families

Mathematical answers are compared numerically (exactly for rational
constants, at sampled points for expressions with symbols), string answers
by exact match after normalization, and multiple-choice answers by their
reduced option label.
"""
import logging
import re
import zlib
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np

from verirl import config
from verirl.mathexpr import (
    EvalError,
    MathExpr,
    ParseError,
    evaluate,
    evaluate_exact,
    free_symbols,
    parse_math,
)

logger = logging.getLogger("verirl")

DEFAULT_OPTIONS = ("A", "B", "C", "D", "E")
SAMPLE_LOW, SAMPLE_HIGH = 0.5, 2.5

_CHOICE_RE = re.compile(r"^\s*[\(\[]?\s*([A-Za-z])\s*[\)\]]?\s*[.:]?\s*$")
_OPTION_KIND_RE = re.compile(r"^\(?[A-Z]\)?\.?$")
_SPACE_RE = re.compile(r"\s+")


class InvalidChoice(Exception):
    """A candidate does not reduce to a label of the option set"""


class AnswerKind(Enum):
    """Deterministic classification of an extracted answer"""
    EXPRESSION = "expression"
    TEXT = "text"
    OPTION = "option"


@dataclass(frozen=True)
class ExtractedAnswer:
    """The answer span taken from a model output"""
    raw: str
    kind: AnswerKind
    expr: Optional[MathExpr] = None


def extract_answer(span: str, allow_option: bool = True) -> ExtractedAnswer:
    """Classifies an answer span: option label, then expression, then text

    With allow_option off a bare capital such as "R" is read as a symbol,
    which is what a mathematical ground truth expects.
    """
    text = span.strip()
    if allow_option and _OPTION_KIND_RE.match(text):
        return ExtractedAnswer(span, AnswerKind.OPTION)
    try:
        return ExtractedAnswer(span, AnswerKind.EXPRESSION, parse_math(text))
    except ParseError:
        return ExtractedAnswer(span, AnswerKind.TEXT)


######################################################################
# S T R I N G   A N S W E R S
######################################################################

def normalize_string(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace runs"""
    return _SPACE_RE.sub(" ", text.lower()).strip()


def string_match(candidate: str, truth: str) -> bool:
    """Exact match of the normalized strings"""
    return normalize_string(candidate) == normalize_string(truth)


######################################################################
# M U L T I P L E   C H O I C E
######################################################################

def reduce_choice(label: str) -> Optional[str]:
    """Reduces "(b)", "B.", "[B]" and the like to "B"; None if no label"""
    match = _CHOICE_RE.match(label or "")
    return match.group(1).upper() if match else None


def choice_match(candidate: str, truth: str, options: Iterable[str] = DEFAULT_OPTIONS) -> bool:
    """Compares option labels after reduction

    Raises InvalidChoice when the candidate is not a label of the option set.
    """
    allowed = {o.strip().upper() for o in options}
    label = reduce_choice(candidate)
    if label is None:
        raise InvalidChoice(f"'{candidate}' is not an option label")
    if label not in allowed:
        raise InvalidChoice(f"'{label}' is not one of {sorted(allowed)}")
    return label == reduce_choice(truth)


######################################################################
# M A T H E M A T I C A L   A N S W E R S
######################################################################

def _close(a, b, tol) -> bool:
    """Relative closeness scaled by max(1, |a|, |b|)

    Symmetric in a and b, and never tighter than tol * max(1, |b|).
    """
    return abs(a - b) <= tol * max(1, abs(a), abs(b))


def math_equivalent(
    a: MathExpr,
    b: MathExpr,
    tol: float = config.MATH_TOLERANCE,
    points: int = config.SAMPLE_POINTS,
    resamples: int = config.MAX_RESAMPLES,
) -> bool:
    """True iff the two expressions agree within relative tolerance

    Constant expressions are compared once, exactly when both are rational.
    Expressions with symbols are compared at pseudo-random points drawn from
    +-[0.5, 2.5]; different free-symbol sets are never equivalent.
    Raises EvalError when no point evaluates on both sides.
    """
    names = free_symbols(a)
    if names != free_symbols(b):
        return False
    if not names:
        exact_a, exact_b = evaluate_exact(a), evaluate_exact(b)
        if exact_a is not None and exact_b is not None:
            return _close(exact_a, exact_b, Fraction(tol))
        return _close(evaluate(a), evaluate(b), tol)

    ordered = sorted(names)
    # Seeded by the symbol set, so argument order never changes the points
    rng = np.random.default_rng(zlib.crc32(",".join(ordered).encode()))
    valid = 0
    for _ in range(points + resamples):
        magnitudes = rng.uniform(SAMPLE_LOW, SAMPLE_HIGH, len(ordered))
        signs = rng.choice((-1.0, 1.0), len(ordered))
        env = dict(zip(ordered, (magnitudes * signs).tolist()))
        try:
            value_a, value_b = evaluate(a, env), evaluate(b, env)
        except EvalError:
            continue
        if not _close(value_a, value_b, tol):
            return False
        valid += 1
        if valid == points:
            break
    if valid == 0:
        raise EvalError("no sample point evaluates on both sides")
    logger.debug("Compared %s and %s at %d points", a, b, valid)
    return True
