"""Scalar expression language evaluated over second-order hyper-dual numbers.

Expressions are real-valued maps of named real variables.  Complex
coordinates enter as real pairs (``z1re``, ``z1im``); Wirtinger operators are
assembled elsewhere from real derivatives.  Evaluating an expression on
hyper-dual numbers returns the value together with two first directional
derivatives and one mixed second derivative, exact to rounding.

Grammar (binding tightness increasing):

    expr   := term (('+' | '-') term)*          left associative
    term   := unary (('*' | '/') unary)*        left associative
    unary  := '-' unary | power
    power  := primary ('^' unary)?              right associative
    primary:= NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

so ``^`` binds tighter than unary minus (``-x^2`` is ``-(x^2)``) and the
exponent may itself be signed (``x^-2``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainEvalError, ParseError

__all__ = [
    "HyperDual",
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "parse",
    "to_string",
    "eval_hyperdual",
    "eval_value",
    "free_variables",
    "substitute",
    "FUNCTIONS",
]


# --------------------------------------------------------------------------
# Hyper-dual arithmetic
# --------------------------------------------------------------------------

Scalar = Union[float, np.ndarray]


@dataclass
class HyperDual:
    """Truncated second-order number v + d1*e1 + d2*e2 + d12*e1*e2.

    e1^2 = e2^2 = 0 while e1*e2 survives, so sums and products carry exact
    first derivatives along two directions plus the mixed second derivative.
    Components may be floats or broadcast-compatible numpy arrays, which is
    how batched evaluation over many points works.
    """

    v: Scalar
    d1: Scalar = 0.0
    d2: Scalar = 0.0
    d12: Scalar = 0.0

    @staticmethod
    def constant(value: Scalar) -> "HyperDual":
        return HyperDual(value, 0.0, 0.0, 0.0)

    def __add__(self, other: "HyperDual") -> "HyperDual":
        return HyperDual(
            self.v + other.v,
            self.d1 + other.d1,
            self.d2 + other.d2,
            self.d12 + other.d12,
        )

    def __sub__(self, other: "HyperDual") -> "HyperDual":
        return HyperDual(
            self.v - other.v,
            self.d1 - other.d1,
            self.d2 - other.d2,
            self.d12 - other.d12,
        )

    def __neg__(self) -> "HyperDual":
        return HyperDual(-self.v, -self.d1, -self.d2, -self.d12)

    def __mul__(self, other: "HyperDual") -> "HyperDual":
        return HyperDual(
            self.v * other.v,
            self.d1 * other.v + self.v * other.d1,
            self.d2 * other.v + self.v * other.d2,
            self.d12 * other.v
            + self.d1 * other.d2
            + self.d2 * other.d1
            + self.v * other.d12,
        )

    def __truediv__(self, other: "HyperDual") -> "HyperDual":
        return self * other.reciprocal()

    def chain(self, f0: Scalar, f1: Scalar, f2: Scalar) -> "HyperDual":
        """Apply a univariate f with value f0 and derivatives f1, f2 at self.v."""
        return HyperDual(
            f0,
            f1 * self.d1,
            f1 * self.d2,
            f1 * self.d12 + f2 * self.d1 * self.d2,
        )

    def reciprocal(self) -> "HyperDual":
        if np.any(self.v == 0.0):
            raise DomainEvalError("division by zero")
        inv = 1.0 / self.v
        return self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def exp(self) -> "HyperDual":
        e = np.exp(self.v)
        return self.chain(e, e, e)

    def log(self) -> "HyperDual":
        if np.any(self.v <= 0.0):
            raise DomainEvalError("log of nonpositive argument")
        inv = 1.0 / self.v
        return self.chain(np.log(self.v), inv, -inv * inv)

    def sqrt(self) -> "HyperDual":
        if np.any(self.v <= 0.0):
            raise DomainEvalError("sqrt of nonpositive argument")
        r = np.sqrt(self.v)
        return self.chain(r, 0.5 / r, -0.25 / (r * self.v))

    def sin(self) -> "HyperDual":
        return self.chain(np.sin(self.v), np.cos(self.v), -np.sin(self.v))

    def cos(self) -> "HyperDual":
        return self.chain(np.cos(self.v), -np.sin(self.v), -np.cos(self.v))

    def abs2(self) -> "HyperDual":
        return self.chain(self.v * self.v, 2.0 * self.v, 2.0)

    def pow(self, other: "HyperDual") -> "HyperDual":
        if _is_constant(other):
            return self._pow_const(float(np.asarray(other.v).reshape(-1)[0]))
        # variable exponent: u^w = exp(w log u), needs u > 0
        return (other * self.log()).exp()

    def _pow_const(self, p: float) -> "HyperDual":
        if p == 0.0:
            one = np.ones_like(np.asarray(self.v, dtype=float))
            return HyperDual.constant(one if one.shape else 1.0)
        if p == 1.0:
            return self
        if p != int(p) and np.any(self.v < 0.0):
            raise DomainEvalError("fractional power of negative argument")
        if p < 2.0 and p != int(p) and np.any(self.v == 0.0):
            raise DomainEvalError("power derivative singular at zero")
        v = self.v
        f0 = v**p
        f1 = p * v ** (p - 1.0)
        f2 = p * (p - 1.0) * v ** (p - 2.0) if p != 1.0 else np.zeros_like(f0)
        return self.chain(f0, f1, f2)


def _is_constant(h: HyperDual) -> bool:
    return (
        np.all(np.asarray(h.d1) == 0.0)
        and np.all(np.asarray(h.d2) == 0.0)
        and np.all(np.asarray(h.d12) == 0.0)
    )


FUNCTIONS = {
    "exp": HyperDual.exp,
    "log": HyperDual.log,
    "sin": HyperDual.sin,
    "cos": HyperDual.cos,
    "sqrt": HyperDual.sqrt,
    "abs2": HyperDual.abs2,
}

_VALUE_FUNCTIONS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "abs2": lambda x: x * x,
}


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Call]


# --------------------------------------------------------------------------
# Tokenizer / parser
# --------------------------------------------------------------------------

_OPS = "+-*/^()"


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    """Return (kind, text, offset) tokens; kind in {num, name, op}."""
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPS:
            tokens.append(("op", c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or text[j] == "."):
                if text[j] == ".":
                    if seen_dot:
                        raise ParseError("malformed number", j)
                    seen_dot = True
                j += 1
            # exponent suffix: 1e-3, 2.5E+10
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    while k < n and text[k].isdigit():
                        k += 1
                    j = k
            tokens.append(("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        if self.pos < len(self.tokens):
            return self.tokens[self.pos]
        return ("eof", "", len(self.text))

    def advance(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        kind, text, offset = self.peek()
        if kind != "op" or text != op:
            raise ParseError(f"expected {op!r}", offset)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, offset = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected trailing input {text!r}", offset)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                left = BinOp(text, left, self.term())
            else:
                return left

    def term(self) -> Expr:
        left = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                left = BinOp(text, left, self.unary())
            else:
                return left

    def unary(self) -> Expr:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def primary(self) -> Expr:
        kind, text, offset = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            nkind, ntext, _ = self.peek()
            if nkind == "op" and ntext == "(":
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function {text!r}", offset)
                self.advance()
                arg = self.expr()
                self.expect_op(")")
                return Call(text, arg)
            return Var(text)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise ParseError(f"expected a value, got {text!r}" if text else "unexpected end of input", offset)


def parse(text: str) -> Expr:
    """Parse an expression string into an AST.

    Raises ParseError (with byte offset) on syntax errors and unknown
    function names.
    """
    if not text or not text.strip():
        raise ParseError("empty expression", 0)
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# Serialization (inverse of parse up to whitespace)
# --------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _to_string(e: Expr, parent_prec: int, right_side: bool) -> str:
    if isinstance(e, Num):
        s = repr(e.value)
        if s.endswith(".0"):
            s = s[:-2]
        if e.value < 0:
            # negative literals only arise from programmatic construction
            return f"({s})"
        return s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({_to_string(e.arg, 0, False)})"
    if isinstance(e, Neg):
        inner = _to_string(e.arg, _PREC["neg"], False)
        s = f"-{inner}"
        return f"({s})" if parent_prec > _PREC["neg"] else s
    if isinstance(e, BinOp):
        prec = _PREC[e.op]
        if e.op == "^":
            # right associative: the left child needs parens at equal precedence
            ls = _to_string(e.left, prec + 1, False)
            rs = _to_string(e.right, prec, True)
        else:
            ls = _to_string(e.left, prec, False)
            rs = _to_string(e.right, prec + 1, True)
        s = f"{ls}{e.op}{rs}"
        needs = parent_prec > prec or (parent_prec == prec and right_side)
        return f"({s})" if needs else s
    raise TypeError(f"not an Expr: {e!r}")


def to_string(e: Expr) -> str:
    """Serialize an AST; parse(to_string(e)) == e."""
    return _to_string(e, 0, False)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def free_variables(e: Expr) -> set[str]:
    if isinstance(e, Num):
        return set()
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return free_variables(e.arg)
    if isinstance(e, Call):
        return free_variables(e.arg)
    return free_variables(e.left) | free_variables(e.right)


def substitute(e: Expr, mapping: dict[str, Expr]) -> Expr:
    """Replace variables by expressions (used by coordinate changes)."""
    if isinstance(e, Num):
        return e
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, Call):
        return Call(e.fn, substitute(e.arg, mapping))
    return BinOp(e.op, substitute(e.left, mapping), substitute(e.right, mapping))


def eval_hyperdual(
    e: Expr,
    env: dict[str, Scalar],
    dir1: dict[str, Scalar] | None = None,
    dir2: dict[str, Scalar] | None = None,
) -> HyperDual:
    """Evaluate with value, two first derivatives and the mixed second.

    env maps every free variable to its value (floats or equal-length
    arrays for batched evaluation); dir1/dir2 give the components of the
    two differentiation directions (missing names mean zero).
    """
    d1 = dir1 or {}
    d2 = dir2 or {}

    def rec(node: Expr) -> HyperDual:
        if isinstance(node, Num):
            return HyperDual.constant(node.value)
        if isinstance(node, Var):
            if node.name not in env:
                raise DomainEvalError(f"unbound variable {node.name!r}")
            return HyperDual(env[node.name], d1.get(node.name, 0.0), d2.get(node.name, 0.0), 0.0)
        if isinstance(node, Neg):
            return -rec(node.arg)
        if isinstance(node, Call):
            return FUNCTIONS[node.fn](rec(node.arg))
        if isinstance(node, BinOp):
            left = rec(node.left)
            if node.op == "+":
                return left + rec(node.right)
            if node.op == "-":
                return left - rec(node.right)
            if node.op == "*":
                return left * rec(node.right)
            if node.op == "/":
                return left / rec(node.right)
            return left.pow(rec(node.right))
        raise TypeError(f"not an Expr: {node!r}")

    return rec(e)


def eval_value(e: Expr, env: dict[str, Scalar]) -> Scalar:
    """Value-only evaluation (no derivative bookkeeping); same domain checks."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.name not in env:
            raise DomainEvalError(f"unbound variable {e.name!r}")
        return env[e.name]
    if isinstance(e, Neg):
        return -eval_value(e.arg, env)
    if isinstance(e, Call):
        arg = eval_value(e.arg, env)
        if e.fn == "log":
            if np.any(np.asarray(arg) <= 0.0):
                raise DomainEvalError("log of nonpositive argument")
            return np.log(arg)
        if e.fn == "sqrt":
            if np.any(np.asarray(arg) < 0.0):
                raise DomainEvalError("sqrt of negative argument")
            return np.sqrt(arg)
        return _VALUE_FUNCTIONS[e.fn](arg)
    left = eval_value(e.left, env)
    right = eval_value(e.right, env)
    if e.op == "+":
        return left + right
    if e.op == "-":
        return left - right
    if e.op == "*":
        return left * right
    if e.op == "/":
        if np.any(np.asarray(right) == 0.0):
            raise DomainEvalError("division by zero")
        return left / right
    if np.any(np.asarray(left) < 0.0) and float(np.max(np.abs(np.asarray(right) - np.round(right)))) > 0:
        raise DomainEvalError("fractional power of negative argument")
    return left**right
