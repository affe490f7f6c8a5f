"""Energy expressions: parsing, printing, symbolic differentiation, compilation.

The grammar only admits C^3 (in fact C^infinity) expressions::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' ['-'] INTEGER)?
    atom   := NUMBER | 't' | 'x<k>' | FUNC '(' expr ')' | '(' expr ')'
    FUNC   := exp | sin | cos | tanh

Denominators must be free of variables and exponents must be integer
literals (non-negative whenever the base contains a variable).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

FUNCTIONS = ("exp", "sin", "cos", "tanh")


class ExpressionError(ValueError):
    """Base class for every error raised while reading an expression."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class ParseError(ExpressionError):
    pass


class UnknownIdentifierError(ExpressionError):
    pass


class DisallowedConstructError(ExpressionError):
    pass


class EvaluationError(ArithmeticError):
    """Non-finite value during evaluation; ``subterm`` is the first culprit."""

    def __init__(self, subterm: "Expr", value: float | None = None):
        self.subterm = subterm
        self.value = value
        super().__init__(f"non-finite value while evaluating subterm {to_text(subterm)}")


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # "t" or "x1", "x2", ...


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"  # variable-free


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, Add, Sub, Mul, Div, Pow, Func]

ZERO = Num(0.0)
ONE = Num(1.0)


def variables(expr: Expr) -> set[str]:
    if isinstance(expr, Num):
        return set()
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, (Neg, Func)):
        return variables(expr.arg)
    if isinstance(expr, Pow):
        return variables(expr.base)
    return variables(expr.left) | variables(expr.right)


def additive_terms(expr: Expr) -> list[Expr]:
    """Flatten the top-level sum; subtracted terms come back wrapped in ``Neg``."""
    if isinstance(expr, Add):
        return additive_terms(expr.left) + additive_terms(expr.right)
    if isinstance(expr, Sub):
        return additive_terms(expr.left) + [Neg(t) for t in additive_terms(expr.right)]
    return [expr]


# ---------------------------------------------------------------------- printing


def to_text(expr: Expr) -> str:
    """Fully parenthesised text form; ``parse(to_text(e))`` rebuilds ``e``."""
    if isinstance(expr, Num):
        if expr.value < 0 or math.copysign(1.0, expr.value) < 0:
            return f"(-{repr(-expr.value)})"
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_text(expr.arg)})"
    if isinstance(expr, Func):
        return f"{expr.name}({to_text(expr.arg)})"
    if isinstance(expr, Pow):
        return f"({to_text(expr.base)}^{expr.exponent})"
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(expr)]
    return f"({to_text(expr.left)} {op} {to_text(expr.right)})"


# ----------------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
  | (?P<bad>.)
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, line_start = 1, 0
    for m in _TOKEN.finditer(text):
        kind = m.lastgroup
        column = m.start() - line_start + 1
        if kind == "ws":
            chunk = m.group()
            if "\n" in chunk:
                line += chunk.count("\n")
                line_start = m.start() + chunk.rindex("\n") + 1
            continue
        if kind == "bad":
            raise ParseError(f"unexpected character {m.group()!r}", line, column)
        tokens.append(_Token(kind, m.group(), line, column))
    end_col = len(text) - line_start + 1
    tokens.append(_Token("end", "", line, end_col))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.n = n

    @property
    def tok(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ParseError(f"expected {text!r}, found {found!r}", self.tok.line, self.tok.column)
        return self.advance()

    def parse(self) -> Expr:
        if self.tok.kind == "end":
            raise ParseError("empty expression", self.tok.line, self.tok.column)
        expr = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected token {self.tok.text!r}", self.tok.line, self.tok.column)
        return expr

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op_tok = self.advance()
            rhs = self.unary()
            if op_tok.text == "*":
                node = Mul(node, rhs)
                continue
            if variables(rhs):
                raise DisallowedConstructError(
                    "denominator contains a variable", op_tok.line, op_tok.column
                )
            if evaluate(rhs, 0.0, ()) == 0.0:
                raise DisallowedConstructError("division by zero", op_tok.line, op_tok.column)
            node = Div(node, rhs)
        return node

    def unary(self) -> Expr:
        if self.tok.text == "-":
            self.advance()
            return Neg(self.unary())
        if self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.text != "^":
            return base
        caret = self.advance()
        sign = 1
        paren = False
        if self.tok.text == "(":
            paren = True
            self.advance()
        if self.tok.text == "-":
            sign = -1
            self.advance()
        if self.tok.kind != "num":
            raise DisallowedConstructError(
                "exponent must be an integer literal", self.tok.line, self.tok.column
            )
        num_tok = self.advance()
        value = float(num_tok.text)
        if not value.is_integer():
            raise DisallowedConstructError(
                f"non-integer exponent {num_tok.text}", num_tok.line, num_tok.column
            )
        if paren:
            self.expect(")")
        exponent = sign * int(value)
        if exponent < 0 and variables(base):
            raise DisallowedConstructError(
                "negative exponent of a variable expression (variable denominator)",
                caret.line,
                caret.column,
            )
        return Pow(base, exponent)

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            if tok.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(tok.text, arg)
            if tok.text == "t":
                return Var("t")
            m = re.fullmatch(r"x([1-9]\d*)", tok.text)
            if m and int(m.group(1)) <= self.n:
                return Var(tok.text)
            raise UnknownIdentifierError(f"unknown identifier {tok.text!r}", tok.line, tok.column)
        if tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = tok.text or "end of input"
        raise ParseError(f"unexpected token {found!r}", tok.line, tok.column)


def parse_energy(text: str, n: int) -> Expr:
    """Parse ``text`` as an energy in the variables ``t, x1..xn``."""
    if not 1 <= n <= 8:
        raise ValueError(f"dimension must be in 1..8, got {n}")
    if not text or not text.strip():
        raise ParseError("empty expression", 1, 1)
    return _Parser(text, n).parse()


# ---------------------------------------------------- simplifying constructors


def _num(expr: Expr) -> float | None:
    return expr.value if isinstance(expr, Num) else None


def add(a: Expr, b: Expr) -> Expr:
    va, vb = _num(a), _num(b)
    if va is not None and vb is not None:
        return Num(va + vb)
    if va == 0.0:
        return b
    if vb == 0.0:
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    va, vb = _num(a), _num(b)
    if va is not None and vb is not None:
        return Num(va - vb)
    if vb == 0.0:
        return a
    if va == 0.0:
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    return Sub(a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    va, vb = _num(a), _num(b)
    if va is not None and vb is not None:
        return Num(va * vb)
    if va == 0.0 or vb == 0.0:
        return ZERO
    if va == 1.0:
        return b
    if vb == 1.0:
        return a
    if va == -1.0:
        return neg(b)
    if vb == -1.0:
        return neg(a)
    if vb is not None:
        a, b = b, a  # constants to the left
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    va, vb = _num(a), _num(b)
    if vb == 1.0:
        return a
    if va == 0.0:
        return ZERO
    if va is not None and vb is not None:
        return Num(va / vb)
    return Div(a, b)


def power(base: Expr, k: int) -> Expr:
    if k == 0:
        return ONE
    if k == 1:
        return base
    vb = _num(base)
    if vb is not None:
        return Num(vb**k)
    return Pow(base, k)


# -------------------------------------------------------------- differentiation


def differentiate(expr: Expr, var: str) -> Expr:
    """Exact derivative of ``expr`` with respect to ``var`` (``t`` or ``x<k>``)."""
    if isinstance(expr, Num):
        return ZERO
    if isinstance(expr, Var):
        return ONE if expr.name == var else ZERO
    if isinstance(expr, Neg):
        return neg(differentiate(expr.arg, var))
    if isinstance(expr, Add):
        return add(differentiate(expr.left, var), differentiate(expr.right, var))
    if isinstance(expr, Sub):
        return sub(differentiate(expr.left, var), differentiate(expr.right, var))
    if isinstance(expr, Mul):
        da = differentiate(expr.left, var)
        db = differentiate(expr.right, var)
        return add(mul(da, expr.right), mul(expr.left, db))
    if isinstance(expr, Div):
        # denominators are variable-free
        return div(differentiate(expr.left, var), expr.right)
    if isinstance(expr, Pow):
        db = differentiate(expr.base, var)
        if _num(db) == 0.0:
            return ZERO
        k = expr.exponent
        return mul(mul(Num(float(k)), power(expr.base, k - 1)), db)
    if isinstance(expr, Func):
        du = differentiate(expr.arg, var)
        if _num(du) == 0.0:
            return ZERO
        u = expr.arg
        if expr.name == "exp":
            outer: Expr = expr
        elif expr.name == "sin":
            outer = Func("cos", u)
        elif expr.name == "cos":
            outer = neg(Func("sin", u))
        else:
            outer = sub(ONE, power(expr, 2))
        return mul(outer, du)
    raise TypeError(f"not an expression node: {expr!r}")


# ------------------------------------------------------------------- evaluation


def evaluate(expr: Expr, t: float, x) -> float:
    """Tree-walking evaluation; raises ``EvaluationError`` at the innermost
    subterm whose value is not finite."""
    try:
        value = _eval_node(expr, t, x)
    except OverflowError:
        value = math.inf
    if not math.isfinite(value):
        raise EvaluationError(_culprit(expr, t, x), value)
    return value


def _eval_node(e: Expr, t: float, x) -> float:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return t if e.name == "t" else float(x[int(e.name[1:]) - 1])
    if isinstance(e, Neg):
        return -_eval_node(e.arg, t, x)
    if isinstance(e, Pow):
        return _eval_node(e.base, t, x) ** e.exponent
    if isinstance(e, Func):
        return getattr(math, e.name)(_eval_node(e.arg, t, x))
    a = _eval_node(e.left, t, x)
    b = _eval_node(e.right, t, x)
    if isinstance(e, Add):
        return a + b
    if isinstance(e, Sub):
        return a - b
    if isinstance(e, Mul):
        return a * b
    return a / b


def _children(e: Expr) -> tuple:
    if isinstance(e, (Num, Var)):
        return ()
    if isinstance(e, (Neg, Func)):
        return (e.arg,)
    if isinstance(e, Pow):
        return (e.base,)
    return (e.left, e.right)


def _culprit(e: Expr, t: float, x) -> Expr:
    for child in _children(e):
        try:
            v = _eval_node(child, t, x)
        except OverflowError:
            v = math.inf
        if not math.isfinite(v):
            return _culprit(child, t, x)
    return e


def _code(e: Expr, mod: str) -> str:
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{_code(e.arg, mod)})"
    if isinstance(e, Pow):
        return f"({_code(e.base, mod)})**{e.exponent}"
    if isinstance(e, Func):
        return f"{mod}.{e.name}({_code(e.arg, mod)})"
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
    return f"({_code(e.left, mod)} {op} {_code(e.right, mod)})"


def compile_many(exprs: list[Expr], n: int, vectorized: bool = False) -> Callable:
    """Compile ``exprs`` into ``fn(t, x1, ..., xn) -> tuple``.

    With ``vectorized=True`` the function accepts numpy arrays; constant
    entries are broadcast against ``t`` so every output has its shape.
    """
    args = ", ".join(["t"] + [f"x{i + 1}" for i in range(n)])
    mod = "_np" if vectorized else "_m"
    if vectorized:
        body = ", ".join(f"(_z + {_code(e, mod)})" for e in exprs)
        src = f"def _fn({args}):\n    _z = 0.0 * (t + {' + '.join(f'x{i + 1}' for i in range(n))})\n"
        src += f"    return ({body},)\n"
    else:
        body = ", ".join(_code(e, mod) for e in exprs)
        src = f"def _fn({args}):\n    return ({body},)\n"
    namespace = {"_m": math, "_np": np}
    exec(compile(src, "<energy>", "exec"), namespace)
    return namespace["_fn"]
