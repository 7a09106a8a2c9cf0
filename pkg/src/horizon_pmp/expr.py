"""Scalar math expressions over declared variables, with forward-mode derivatives.

Expressions define the dynamics and payoff of a control problem as text, e.g.
``"exp(-t)*(x1 - u1*u1/2)"`` over the symbols ``{t, x1, u1}``.  The grammar is

    expr   := term { ("+" | "-") term }
    term   := factor { ("*" | "/") factor }
    factor := "-" factor | power
    power  := atom [ "^" factor ]
    atom   := NUMBER | IDENT | IDENT "(" expr ")" | "(" expr ")"

so ``^`` is right-associative and binds tighter than unary minus.  Recognised
functions: ``exp, log, sin, cos, sqrt, abs``.

Evaluation accepts floats or numpy arrays in the environment and broadcasts.
Failures of ``/``, ``log``, ``sqrt`` and ``^`` are hard :class:`ExprDomainError`
exceptions (never silent NaNs): downstream improper-integral classification
must not see poisoned values.

Parsed :class:`Expr` trees are frozen and safe to share across threads;
evaluation keeps no shared state.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Unary",
    "Binary",
    "DualValue",
    "ExprError",
    "ExprSyntaxError",
    "UnknownSymbolError",
    "ExprDomainError",
    "UnboundVariableError",
    "parse",
    "evaluate",
    "eval_dual",
    "to_source",
    "variables",
]

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs")


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownSymbolError(ExprError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier '{name}' at offset {offset}")
        self.name = name
        self.offset = offset


class UnboundVariableError(ExprError):
    def __init__(self, name: str):
        super().__init__(f"variable '{name}' is not bound in the environment")
        self.name = name


class ExprDomainError(ExprError):
    """Raised when evaluation leaves the real domain (log <= 0, x/0, ...).

    Carries the offending subtree in ``node``.
    """

    def __init__(self, message: str, node: "Expr"):
        super().__init__(f"{message} in '{to_source(node)}'")
        self.node = node


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or a FUNCTIONS entry
    child: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Unary, Binary]


def variables(e: Expr) -> set[str]:
    """Set of variable names occurring in the tree."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Unary):
        return variables(e.child)
    if isinstance(e, Binary):
        return variables(e.left) | variables(e.right)
    return set()


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "ident" | "op" | "end"
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            # skip over whitespace-only tail
            rest = source[pos:]
            if rest.strip() == "":
                break
            bad = pos + len(rest) - len(rest.lstrip())
            raise ExprSyntaxError(f"unexpected character '{source[bad]}'", bad)
        for kind in ("num", "ident", "op"):
            text = m.group(kind)
            if text is not None:
                tokens.append(_Token(kind, text, m.start(kind)))
                break
        pos = m.end()
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token], symbols: tuple[str, ...]):
        self.tokens = tokens
        self.i = 0
        self.symbols = symbols

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        tok = self.peek()
        if tok.kind == "op" and tok.text == op:
            return self.advance()
        if tok.kind == "end":
            raise ExprSyntaxError(f"expected '{op}', got end of input", tok.pos)
        raise ExprSyntaxError(f"expected '{op}', got '{tok.text}'", tok.pos)

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = Binary(op, node, self.parse_term())
        return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = Binary(op, node, self.parse_factor())
        return node

    def parse_factor(self) -> Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.advance()
            return Unary("neg", self.parse_factor())
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.advance()
            # right-associative; exponent may carry its own unary minus
            return Binary("^", base, self.parse_factor())
        return base

    def parse_atom(self) -> Expr:
        tok = self.advance()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.kind == "ident":
            nxt = self.peek()
            if nxt.kind == "op" and nxt.text == "(":
                if tok.text not in FUNCTIONS:
                    raise UnknownSymbolError(tok.text, tok.pos)
                self.advance()
                arg = self.parse_expr()
                self.expect_op(")")
                return Unary(tok.text, arg)
            if tok.text not in self.symbols:
                raise UnknownSymbolError(tok.text, tok.pos)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        if tok.kind == "end":
            raise ExprSyntaxError("unexpected end of input", tok.pos)
        raise ExprSyntaxError(f"unexpected token '{tok.text}'", tok.pos)


def parse(source: str, symbols) -> Expr:
    """Parse ``source`` into an AST over the declared variable names.

    Raises :class:`ExprSyntaxError` (with byte offset), :class:`UnknownSymbolError`,
    or ``ValueError`` for an empty/duplicated symbol declaration.
    """
    symbols = tuple(symbols)
    if not symbols:
        raise ValueError("symbol set must be nonempty")
    if len(set(symbols)) != len(symbols):
        raise ValueError("symbol names must be distinct")
    if source.strip() == "":
        raise ExprSyntaxError("empty input", 0)
    parser = _Parser(_tokenize(source), symbols)
    node = parser.parse_expr()
    tail = parser.peek()
    if tail.kind != "end":
        raise ExprSyntaxError(f"unexpected trailing token '{tail.text}'", tail.pos)
    return node


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    return _PREC["atom"]


def to_source(e: Expr) -> str:
    """Render the AST back to text; ``parse(to_source(e)) == e``."""
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = to_source(e.child)
            if _prec(e.child) <= _PREC["neg"]:
                inner = f"({inner})"
            return f"-{inner}"
        return f"{e.op}({to_source(e.child)})"
    assert isinstance(e, Binary)
    lhs, rhs = to_source(e.left), to_source(e.right)
    p = _PREC[e.op]
    # left operand: parenthesise strictly lower precedence (left-assoc ops bind
    # equal precedence to the left); right operand: also parenthesise equal
    # precedence, except for right-associative ^.
    if _prec(e.left) < p or (e.op == "^" and _prec(e.left) <= p):
        lhs = f"({lhs})"
    if _prec(e.right) < p or (e.op in "+-*/" and _prec(e.right) == p):
        rhs = f"({rhs})"
    return f"{lhs} {e.op} {rhs}" if e.op in "+-" else f"{lhs}{e.op}{rhs}"


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _require_finite(value, node: Expr):
    if not np.all(np.isfinite(value)):
        raise ExprDomainError("non-finite result", node)
    return value


def _eval(e: Expr, env: dict):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Unary):
        v = _eval(e.child, env)
        if e.op == "neg":
            return -v
        if e.op == "exp":
            return _require_finite(np.exp(v), e)
        if e.op == "log":
            if np.any(np.asarray(v) <= 0.0):
                raise ExprDomainError("log of nonpositive value", e)
            return np.log(v)
        if e.op == "sin":
            return np.sin(v)
        if e.op == "cos":
            return np.cos(v)
        if e.op == "sqrt":
            if np.any(np.asarray(v) < 0.0):
                raise ExprDomainError("sqrt of negative value", e)
            return np.sqrt(v)
        if e.op == "abs":
            return np.abs(v)
        raise ExprError(f"unknown unary op '{e.op}'")
    assert isinstance(e, Binary)
    a = _eval(e.left, env)
    b = _eval(e.right, env)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if e.op == "/":
        if np.any(np.asarray(b) == 0.0):
            raise ExprDomainError("division by zero", e)
        return _require_finite(a / b, e)
    if e.op == "^":
        return _pow_value(a, b, e)
    raise ExprError(f"unknown binary op '{e.op}'")


def _pow_value(a, b, node: Expr):
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    b_is_int = np.all(b_arr == np.floor(b_arr))
    if np.any((a_arr == 0.0) & (b_arr < 0.0)):
        raise ExprDomainError("zero raised to a negative power", node)
    if not b_is_int and np.any(a_arr < 0.0):
        raise ExprDomainError("negative base with non-integer exponent", node)
    return _require_finite(np.power(a, b), node)


def evaluate(e: Expr, env: dict):
    """Evaluate the tree on float (or numpy array) bindings.

    Raises :class:`UnboundVariableError` or :class:`ExprDomainError`.
    """
    return _eval(e, env)


# ---------------------------------------------------------------------------
# Forward-mode duals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualValue:
    """Value paired with a directional derivative w.r.t. one seeded variable."""

    value: float
    derivative: float

    def __add__(self, other):
        other = _as_dual(other)
        return DualValue(self.value + other.value, self.derivative + other.derivative)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_dual(other)
        return DualValue(self.value - other.value, self.derivative - other.derivative)

    def __rsub__(self, other):
        return _as_dual(other) - self

    def __mul__(self, other):
        other = _as_dual(other)
        return DualValue(
            self.value * other.value,
            self.derivative * other.value + self.value * other.derivative,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_dual(other)
        return DualValue(
            self.value / other.value,
            (self.derivative * other.value - self.value * other.derivative)
            / (other.value * other.value),
        )

    def __rtruediv__(self, other):
        return _as_dual(other) / self

    def __neg__(self):
        return DualValue(-self.value, -self.derivative)


def _as_dual(x) -> DualValue:
    return x if isinstance(x, DualValue) else DualValue(x, 0.0)


def _eval_dual(e: Expr, env: dict, seed: str) -> DualValue:
    if isinstance(e, Const):
        return DualValue(e.value, 0.0)
    if isinstance(e, Var):
        try:
            v = env[e.name]
        except KeyError:
            raise UnboundVariableError(e.name) from None
        d = 1.0 if e.name == seed else 0.0
        return DualValue(v, d * np.ones_like(np.asarray(v, dtype=float)) if np.ndim(v) else d)
    if isinstance(e, Unary):
        u = _eval_dual(e.child, env, seed)
        if e.op == "neg":
            return -u
        if e.op == "exp":
            ev = _require_finite(np.exp(u.value), e)
            return DualValue(ev, ev * u.derivative)
        if e.op == "log":
            if np.any(np.asarray(u.value) <= 0.0):
                raise ExprDomainError("log of nonpositive value", e)
            return DualValue(np.log(u.value), u.derivative / u.value)
        if e.op == "sin":
            return DualValue(np.sin(u.value), np.cos(u.value) * u.derivative)
        if e.op == "cos":
            return DualValue(np.cos(u.value), -np.sin(u.value) * u.derivative)
        if e.op == "sqrt":
            if np.any(np.asarray(u.value) < 0.0):
                raise ExprDomainError("sqrt of negative value", e)
            sv = np.sqrt(u.value)
            if np.any(np.asarray(sv) == 0.0):
                raise ExprDomainError("derivative of sqrt at zero", e)
            return DualValue(sv, u.derivative / (2.0 * sv))
        if e.op == "abs":
            return DualValue(np.abs(u.value), np.sign(u.value) * u.derivative)
        raise ExprError(f"unknown unary op '{e.op}'")
    assert isinstance(e, Binary)
    a = _eval_dual(e.left, env, seed)
    if e.op == "^" and isinstance(e.right, Const):
        # power rule keeps negative bases legal for integer exponents
        p = e.right.value
        v = _pow_value(a.value, p, e)
        if p == 0.0:
            return DualValue(v, 0.0 * a.derivative)
        dv = p * _pow_value(a.value, p - 1.0, e) * a.derivative
        return DualValue(v, dv)
    b = _eval_dual(e.right, env, seed)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if e.op == "/":
        if np.any(np.asarray(b.value) == 0.0):
            raise ExprDomainError("division by zero", e)
        return a / b
    if e.op == "^":
        v = _pow_value(a.value, b.value, e)
        if np.any(np.asarray(a.value) <= 0.0):
            raise ExprDomainError("power derivative needs a positive base", e)
        dv = v * (b.derivative * np.log(a.value) + b.value * a.derivative / a.value)
        return DualValue(v, dv)
    raise ExprError(f"unknown binary op '{e.op}'")


def eval_dual(e: Expr, env: dict, seed: str) -> DualValue:
    """Evaluate value and d(value)/d(seed) by forward-mode propagation."""
    if seed not in env:
        raise UnboundVariableError(seed)
    return _eval_dual(e, env, seed)


# ---------------------------------------------------------------------------
# Kernel compilation
# ---------------------------------------------------------------------------
# ODE right-hand sides evaluate the same small trees millions of times, so the
# hot path uses trees compiled to plain numpy expressions.  Compiled kernels
# skip the per-node domain checks; callers guard the output with isfinite and
# fall back to the interpreted evaluator to raise the precise domain error.

_FN_NAME = {"exp": "np.exp", "log": "np.log", "sin": "np.sin", "cos": "np.cos", "sqrt": "np.sqrt", "abs": "np.abs"}


def _vcode(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{_vcode(e.child)})"
        return f"{_FN_NAME[e.op]}({_vcode(e.child)})"
    op = "**" if e.op == "^" else e.op
    return f"({_vcode(e.left)}{op}{_vcode(e.right)})"


def _dadd(a: str, b: str) -> str:
    if a == "0.0":
        return b
    if b == "0.0":
        return a
    return f"({a}+{b})"


def _dmul(a: str, b: str) -> str:
    if a == "0.0" or b == "0.0":
        return "0.0"
    return f"({a}*{b})"


def _dcode(e: Expr, seed: str) -> tuple[str, str]:
    """(value code, derivative code) by forward-mode rules, pruning zeros."""
    if isinstance(e, Const):
        return repr(e.value), "0.0"
    if isinstance(e, Var):
        return e.name, ("1.0" if e.name == seed else "0.0")
    if isinstance(e, Unary):
        v, d = _dcode(e.child, seed)
        if e.op == "neg":
            return f"(-{v})", ("0.0" if d == "0.0" else f"(-{d})")
        fv = f"{_FN_NAME[e.op]}({v})"
        if d == "0.0":
            return fv, "0.0"
        rules = {
            "exp": f"({fv}*{d})",
            "log": f"({d}/{v})",
            "sin": f"(np.cos({v})*{d})",
            "cos": f"((-np.sin({v}))*{d})",
            "sqrt": f"({d}/(2.0*{fv}))",
            "abs": f"(np.sign({v})*{d})",
        }
        return fv, rules[e.op]
    assert isinstance(e, Binary)
    va, da = _dcode(e.left, seed)
    if e.op == "^" and isinstance(e.right, Const):
        p = e.right.value
        fv = f"({va}**{repr(p)})"
        if da == "0.0" or p == 0.0:
            return fv, "0.0"
        return fv, _dmul(_dmul(repr(p), f"({va}**{repr(p - 1.0)})"), da)
    vb, db = _dcode(e.right, seed)
    if e.op == "+":
        return f"({va}+{vb})", _dadd(da, db)
    if e.op == "-":
        neg = "0.0" if db == "0.0" else f"(-{db})"
        return f"({va}-{vb})", _dadd(da, neg)
    if e.op == "*":
        return f"({va}*{vb})", _dadd(_dmul(da, vb), _dmul(va, db))
    if e.op == "/":
        fv = f"({va}/{vb})"
        if da == "0.0" and db == "0.0":
            return fv, "0.0"
        num = _dadd(_dmul(da, vb), "0.0" if db == "0.0" else f"(-{_dmul(va, db)})")
        return fv, f"({num}/({vb}*{vb}))"
    assert e.op == "^"
    fv = f"({va}**{vb})"
    if da == "0.0" and db == "0.0":
        return fv, "0.0"
    term1 = "0.0" if db == "0.0" else _dmul(db, f"np.log({va})")
    term2 = "0.0" if da == "0.0" else f"({vb}*{da}/{va})"
    return fv, _dmul(fv, _dadd(term1, term2))


def compile_kernel(items, symbols):
    """Compile a tuple-valued closure over positional arguments ``symbols``.

    ``items`` mixes ("value", expr) and ("deriv", expr, seed) entries; the
    returned callable yields one scalar (or broadcast array) per item, with no
    domain checking.
    """
    parts = []
    for item in items:
        if item[0] == "value":
            parts.append(_vcode(item[1]))
        else:
            parts.append(_dcode(item[1], item[2])[1])
    body = ",".join(parts)
    src = f"def _kernel({', '.join(symbols)}):\n    return ({body}{',' if len(parts) == 1 else ''})\n"
    ns: dict = {"np": np}
    exec(src, ns)  # noqa: S102 - generated from a validated AST
    return ns["_kernel"]
