"""
Mathematical answer expressions

Parses the arithmetic/LaTeX subset that final answers are written in
into an immutable MathExpr tree, serializes trees back to source and
evaluates them either exactly (rational constant trees) or in floating
point (everything else).

Supported: integers, decimals, fractions a/b, \\frac{a}{b}, \\sqrt{x},
sqrt(x), abs(x), pi/\\pi, parentheses and braces, + - * / ^, unary minus,
implicit multiplication (2x, 3\\pi), single-letter symbols, and optional
\\boxed{...} / $...$ / \\(...\\) wrappers.
"""
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Tuple, Union

MAX_HEIGHT = 200
MAX_LITERAL_DIGITS = 1000
MAX_EXACT_EXPONENT = 4096
MAX_EXACT_BITS = 1 << 16


class ParseError(Exception):
    """Input is outside the supported answer grammar"""

    def __init__(self, offset: int, expected: str):
        self.offset = offset
        self.expected = expected
        super().__init__(f"at byte {offset}: expected {expected}")


class EvalError(Exception):
    """Division by zero or a domain error while evaluating"""


class NodeKind(Enum):
    """Node kinds of a MathExpr tree"""
    INTEGER = "integer"
    RATIONAL = "rational"
    DECIMAL = "decimal"
    SYMBOL = "symbol"
    NEGATION = "negation"
    BINARY = "binary"
    FUNCTION = "function"
    CONSTANT = "constant"


ARITY = {
    NodeKind.INTEGER: 0,
    NodeKind.RATIONAL: 0,
    NodeKind.DECIMAL: 0,
    NodeKind.SYMBOL: 0,
    NodeKind.CONSTANT: 0,
    NodeKind.NEGATION: 1,
    NodeKind.FUNCTION: 1,
    NodeKind.BINARY: 2,
}
BINARY_OPS = ("+", "-", "*", "/", "^")
FUNCTIONS = ("sqrt", "abs")


@dataclass(frozen=True)
class MathExpr:
    """One node of a parsed answer expression

    value holds the int for INTEGER, (numerator, denominator) for RATIONAL,
    the literal text for DECIMAL, the name for SYMBOL/FUNCTION/CONSTANT and
    the operator for BINARY.
    """
    kind: NodeKind
    value: Union[int, str, Tuple[int, int], None] = None
    children: Tuple["MathExpr", ...] = ()
    height: int = field(default=1, compare=False, repr=False)

    def __post_init__(self):
        if len(self.children) != ARITY[self.kind]:
            raise ValueError(f"{self.kind.value} node needs {ARITY[self.kind]} children")
        if self.kind is NodeKind.RATIONAL and self.value[1] == 0:
            raise ValueError("Rational denominator must be nonzero")
        if self.kind is NodeKind.BINARY and self.value not in BINARY_OPS:
            raise ValueError(f"Unknown operator {self.value!r}")
        if self.kind is NodeKind.FUNCTION and self.value not in FUNCTIONS:
            raise ValueError(f"Unknown function {self.value!r}")
        if self.children:
            object.__setattr__(self, "height", 1 + max(c.height for c in self.children))

    def __str__(self):
        return to_source(self)


def integer(number: int) -> MathExpr:
    """Integer leaf"""
    return MathExpr(NodeKind.INTEGER, number)


def rational(numerator: int, denominator: int) -> MathExpr:
    """Rational leaf"""
    return MathExpr(NodeKind.RATIONAL, (numerator, denominator))


def symbol(name: str) -> MathExpr:
    """Single-letter symbol leaf"""
    return MathExpr(NodeKind.SYMBOL, name)


def binary(op: str, left: MathExpr, right: MathExpr) -> MathExpr:
    """Binary operator node"""
    return MathExpr(NodeKind.BINARY, op, (left, right))


def negation(operand: MathExpr) -> MathExpr:
    """Unary minus node"""
    return MathExpr(NodeKind.NEGATION, None, (operand,))


######################################################################
# T O K E N I Z E R
######################################################################

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
    |(?P<num>\d+(?:\.\d*)?|\.\d+)
    |(?P<cmd>\\[A-Za-z]+|\\[,;:! ])
    |(?P<word>[A-Za-z]+)
    |(?P<op>[-+*/^(){}−×÷·π])
    """,
    re.VERBOSE | re.ASCII,
)

_COMMANDS = {
    "\\frac": ("frac", None),
    "\\dfrac": ("frac", None),
    "\\tfrac": ("frac", None),
    "\\sqrt": ("func", "sqrt"),
    "\\pi": ("const", "pi"),
    "\\cdot": ("op", "*"),
    "\\times": ("op", "*"),
    "\\div": ("op", "/"),
}
_SPACING = {"\\left", "\\right", "\\,", "\\;", "\\:", "\\!", "\\ "}
_UNICODE_OPS = {"−": "-", "×": "*", "·": "*", "÷": "/"}


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str, start: int, end: int, offset) -> List[_Token]:
    tokens = []
    pos = start
    while pos < end:
        match = _TOKEN_RE.match(text, pos, end)
        if not match:
            raise ParseError(offset(pos), "a number, symbol, operator or LaTeX command")
        kind, lexeme = match.lastgroup, match.group()
        if kind == "cmd":
            if lexeme in _COMMANDS:
                kind, lexeme = _COMMANDS[lexeme][0], _COMMANDS[lexeme][1] or lexeme
                tokens.append(_Token(kind, lexeme, pos))
            elif lexeme not in _SPACING:
                raise ParseError(offset(pos), "a supported LaTeX command")
        elif kind == "word":
            if lexeme in FUNCTIONS:
                tokens.append(_Token("func", lexeme, pos))
            elif lexeme == "pi":
                tokens.append(_Token("const", "pi", pos))
            elif len(lexeme) == 1:
                tokens.append(_Token("ident", lexeme, pos))
            else:
                raise ParseError(offset(pos), "a single-letter symbol")
        elif kind == "op":
            if lexeme == "π":
                tokens.append(_Token("const", "pi", pos))
            else:
                tokens.append(_Token("op", _UNICODE_OPS.get(lexeme, lexeme), pos))
        elif kind == "num":
            if len(lexeme) > MAX_LITERAL_DIGITS:
                raise ParseError(offset(pos), f"a numeric literal of at most {MAX_LITERAL_DIGITS} digits")
            tokens.append(_Token("num", lexeme, pos))
        pos = match.end()
    tokens.append(_Token("end", "", end))
    return tokens


def _matching_brace(text: str, open_index: int, end: int) -> int:
    depth = 0
    for index in range(open_index, end):
        if text[index] == "{":
            depth += 1
        elif text[index] == "}":
            depth -= 1
            if depth == 0:
                return index
    return -1


def _strip_wrappers(text: str) -> Tuple[int, int]:
    """Returns the [start, end) span left after removing answer wrappers"""
    start, end = 0, len(text)
    while True:
        while start < end and text[start].isspace():
            start += 1
        while end > start and text[end - 1].isspace():
            end -= 1
        segment = text[start:end]
        for opener, closer in (("$$", "$$"), ("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")):
            if (len(segment) >= len(opener) + len(closer)
                    and segment.startswith(opener) and segment.endswith(closer)):
                start, end = start + len(opener), end - len(closer)
                break
        else:
            if segment.startswith("\\boxed{") and _matching_brace(text, start + 6, end) == end - 1:
                start, end = start + 7, end - 1
            elif len(segment) > 1 and segment.endswith("."):
                end -= 1
            else:
                return start, end


######################################################################
# P A R S E R
######################################################################

class _Parser:
    """Recursive descent over the token list, one method per precedence level"""

    PRIMARY_START = {"num", "ident", "const", "func", "frac"}

    def __init__(self, tokens: List[_Token], offset):
        self.tokens = tokens
        self.index = 0
        self.depth = 0
        self.offset = offset

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def _advance(self) -> _Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def _fail(self, expected: str):
        raise ParseError(self.offset(self.current.pos), expected)

    def _expect(self, kind: str, text: Optional[str] = None) -> _Token:
        token = self.current
        if token.kind != kind or (text is not None and token.text != text):
            self._fail(repr(text) if text else kind)
        return self._advance()

    def _is_op(self, *ops) -> bool:
        return self.current.kind == "op" and self.current.text in ops

    def _node(self, node: MathExpr) -> MathExpr:
        if node.height > MAX_HEIGHT:
            self._fail("a shallower expression")
        return node

    def _enter(self):
        self.depth += 1
        if self.depth > MAX_HEIGHT // 2:
            self._fail("a shallower expression")

    def parse(self) -> MathExpr:
        tree = self.expr()
        if self.current.kind != "end":
            self._fail("an operator or end of input")
        return tree

    def expr(self) -> MathExpr:
        node = self.term()
        while self._is_op("+", "-"):
            op = self._advance().text
            node = self._node(binary(op, node, self.term()))
        return node

    def term(self) -> MathExpr:
        node = self.unary()
        while True:
            if self._is_op("*", "/"):
                op = self._advance().text
                node = self._node(binary(op, node, self.unary()))
            elif self.current.kind in self.PRIMARY_START - {"num"} or self._is_op("(", "{"):
                node = self._node(binary("*", node, self.power()))
            else:
                return node

    def unary(self) -> MathExpr:
        if self._is_op("-", "+"):
            sign = self._advance().text
            self._enter()
            operand = self.unary()
            self.depth -= 1
            return operand if sign == "+" else self._node(negation(operand))
        return self.power()

    def power(self) -> MathExpr:
        base = self.primary()
        if self._is_op("^"):
            self._advance()
            self._enter()
            exponent = self.unary()
            self.depth -= 1
            return self._node(binary("^", base, exponent))
        return base

    def _group(self, opener: str, closer: str) -> MathExpr:
        self._expect("op", opener)
        self._enter()
        inner = self.expr()
        self.depth -= 1
        self._expect("op", closer)
        return inner

    def primary(self) -> MathExpr:
        token = self.current
        if token.kind == "num":
            self._advance()
            if "." in token.text:
                # ".5" and "5." are stored as "0.5" and "5.0"
                text = token.text
                text = "0" + text if text.startswith(".") else text
                text = text + "0" if text.endswith(".") else text
                return MathExpr(NodeKind.DECIMAL, text)
            return integer(int(token.text))
        if token.kind == "ident":
            self._advance()
            return symbol(token.text)
        if token.kind == "const":
            self._advance()
            return MathExpr(NodeKind.CONSTANT, "pi")
        if token.kind == "func":
            self._advance()
            if token.text == "sqrt" and self._is_op("{"):
                argument = self._group("{", "}")
            else:
                argument = self._group("(", ")")
            return self._node(MathExpr(NodeKind.FUNCTION, token.text, (argument,)))
        if token.kind == "frac":
            self._advance()
            numerator = self._group("{", "}")
            denominator = self._group("{", "}")
            if (numerator.kind is NodeKind.INTEGER and denominator.kind is NodeKind.INTEGER
                    and denominator.value != 0):
                return rational(numerator.value, denominator.value)
            return self._node(binary("/", numerator, denominator))
        if self._is_op("("):
            return self._group("(", ")")
        if self._is_op("{"):
            return self._group("{", "}")
        return self._fail("a number, symbol, function or '('")


def parse_math(source: Union[str, bytes]) -> MathExpr:
    """Parses an answer string into a MathExpr tree

    Raises ParseError with the byte offset of the first offending token.
    """
    if isinstance(source, (bytes, bytearray)):
        source = bytes(source).decode("utf-8", errors="replace")
    if not isinstance(source, str):
        raise ParseError(0, "text")

    def offset(pos: int) -> int:
        return len(source[:pos].encode("utf-8", errors="surrogatepass"))

    start, end = _strip_wrappers(source)
    if start >= end:
        raise ParseError(offset(start), "an expression")
    tokens = _tokenize(source, start, end, offset)
    return _Parser(tokens, offset).parse()


######################################################################
# S E R I A L I Z E R
######################################################################

def to_source(expr: MathExpr) -> str:
    """Serializes a tree so that parse_math(to_source(t)) == t"""
    kind = expr.kind
    if kind is NodeKind.INTEGER:
        return str(expr.value)
    if kind is NodeKind.RATIONAL:
        return f"\\frac{{{expr.value[0]}}}{{{expr.value[1]}}}"
    if kind in (NodeKind.DECIMAL, NodeKind.SYMBOL):
        return expr.value
    if kind is NodeKind.CONSTANT:
        return "\\pi"
    if kind is NodeKind.NEGATION:
        return f"-({to_source(expr.children[0])})"
    if kind is NodeKind.FUNCTION:
        inner = to_source(expr.children[0])
        return f"\\sqrt{{{inner}}}" if expr.value == "sqrt" else f"abs({inner})"
    left, right = expr.children
    return f"({to_source(left)}){expr.value}({to_source(right)})"


def free_symbols(expr: MathExpr) -> FrozenSet[str]:
    """Names of the symbols occurring in the tree"""
    if expr.kind is NodeKind.SYMBOL:
        return frozenset((expr.value,))
    names = frozenset()
    for child in expr.children:
        names |= free_symbols(child)
    return names


######################################################################
# E V A L U A T I O N
######################################################################

def evaluate(expr: MathExpr, env: Optional[Dict[str, float]] = None) -> float:
    """Floating point value of the tree under a symbol assignment"""
    try:
        value = _evaluate(expr, env or {})
    except ZeroDivisionError as error:
        raise EvalError("division by zero") from error
    except (ValueError, OverflowError) as error:
        raise EvalError(f"domain error: {error}") from error
    if not math.isfinite(value):
        raise EvalError("non-finite value")
    return value


def _evaluate(expr: MathExpr, env: Dict[str, float]) -> float:
    kind = expr.kind
    if kind is NodeKind.INTEGER:
        return float(expr.value)
    if kind is NodeKind.RATIONAL:
        return expr.value[0] / expr.value[1]
    if kind is NodeKind.DECIMAL:
        return float(expr.value)
    if kind is NodeKind.CONSTANT:
        return math.pi
    if kind is NodeKind.SYMBOL:
        if expr.value not in env:
            raise ValueError(f"unbound symbol {expr.value}")
        return float(env[expr.value])
    if kind is NodeKind.NEGATION:
        return -_evaluate(expr.children[0], env)
    if kind is NodeKind.FUNCTION:
        argument = _evaluate(expr.children[0], env)
        return math.sqrt(argument) if expr.value == "sqrt" else abs(argument)
    left = _evaluate(expr.children[0], env)
    right = _evaluate(expr.children[1], env)
    if expr.value == "+":
        return left + right
    if expr.value == "-":
        return left - right
    if expr.value == "*":
        return left * right
    if expr.value == "/":
        return left / right
    return math.pow(left, right)


class _Inexact(Exception):
    """The tree leaves the rationals"""


def evaluate_exact(expr: MathExpr) -> Optional[Fraction]:
    """Exact value of a rational constant tree, None when not rational

    Raises EvalError on division by zero.
    """
    try:
        return _exact(expr)
    except _Inexact:
        return None
    except ZeroDivisionError as error:
        raise EvalError("division by zero") from error


def _exact(expr: MathExpr) -> Fraction:
    kind = expr.kind
    if kind is NodeKind.INTEGER:
        return Fraction(expr.value)
    if kind is NodeKind.RATIONAL:
        return Fraction(expr.value[0], expr.value[1])
    if kind is NodeKind.DECIMAL:
        return Fraction(expr.value)
    if kind is NodeKind.NEGATION:
        return -_exact(expr.children[0])
    if kind is NodeKind.FUNCTION and expr.value == "abs":
        return abs(_exact(expr.children[0]))
    if kind is not NodeKind.BINARY:
        raise _Inexact()
    left = _exact(expr.children[0])
    right = _exact(expr.children[1])
    if expr.value == "+":
        return left + right
    if expr.value == "-":
        return left - right
    if expr.value == "*":
        return left * right
    if expr.value == "/":
        return left / right
    if right.denominator != 1 or abs(right.numerator) > MAX_EXACT_EXPONENT:
        raise _Inexact()
    size = max(left.numerator.bit_length(), left.denominator.bit_length())
    if size * abs(right.numerator) > MAX_EXACT_BITS:
        raise _Inexact()
    return left ** right.numerator
