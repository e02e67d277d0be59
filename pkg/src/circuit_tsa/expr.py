"""Behavioral-source expression language.

Expressions are immutable trees over node voltages ``V(n)``, device currents
``I(label)`` and simulation time ``TIME``.  They can be parsed from text,
pretty-printed back, evaluated against bindings, and compiled into Python
functions returning values plus analytic partial derivatives.

Expression nodes overload the arithmetic operators, so model equations
written against plain floats also build trees when fed ``Expr`` symbols.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

DIV_GUARD = 1e-12

UNARY_OPS = ("neg", "abs", "sqrt", "exp", "sin", "cos")
BINARY_OPS = ("add", "sub", "mul", "div", "pow", "min", "max")

# function name -> arity
FUNCTIONS = {
    "abs": 1,
    "sqrt": 1,
    "exp": 1,
    "sin": 1,
    "cos": 1,
    "min": 2,
    "max": 2,
    "pow": 2,
    "clamp": 3,
}

SUFFIXES = {
    "t": 1e12,
    "g": 1e9,
    "meg": 1e6,
    "k": 1e3,
    "mil": 25.4e-6,
    "m": 1e-3,
    "u": 1e-6,
    "n": 1e-9,
    "p": 1e-12,
    "f": 1e-15,
}


class ExpressionError(Exception):
    """Base class for expression problems."""


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnboundReferenceError(ExpressionError):
    pass


class EvaluationFault(ExpressionError):
    """Raised when a subtree produces NaN from non-NaN operands."""

    def __init__(self, subtree: "Expr"):
        super().__init__(f"NaN produced by {to_text(subtree)}")
        self.subtree = subtree


def _wrap(value) -> "Expr":
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float)):
        return Const(float(value))
    raise TypeError(f"cannot use {type(value).__name__} in an expression")


class Expr:
    """Base class of expression nodes."""

    __slots__ = ()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, other):
        return Binary("pow", self, _wrap(other))

    def __neg__(self):
        if isinstance(self, Const):
            return Const(-self.value)
        return Unary("neg", self)

    def __pos__(self):
        return self

    def __str__(self):
        return to_text(self)


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        if isinstance(self.value, Expr):
            raise TypeError("Const value must be a number")


@dataclass(frozen=True)
class Volt(Expr):
    node: int


@dataclass(frozen=True)
class Curr(Expr):
    label: str


@dataclass(frozen=True)
class Time(Expr):
    pass


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    arg: Expr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ExpressionError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ExpressionError(f"unknown binary operator {self.op!r}")


@dataclass(frozen=True)
class Clamp(Expr):
    arg: Expr
    lo: Expr
    hi: Expr


TIME = Time()


# -- builders with light constant folding -----------------------------------

def add(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if isinstance(a, Const) and a.value == 0.0:
        return b
    if isinstance(b, Const) and b.value == 0.0:
        return a
    return Binary("add", a, b)


def sub(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if isinstance(b, Const) and b.value == 0.0:
        return a
    if isinstance(a, Const) and a.value == 0.0:
        return -b
    return Binary("sub", a, b)


def mul(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    for c, other in ((a, b), (b, a)):
        if isinstance(c, Const):
            if c.value == 0.0:
                return Const(0.0)
            if c.value == 1.0:
                return other
            if c.value == -1.0:
                return -other
    return Binary("mul", a, b)


def div(a, b) -> Expr:
    a, b = _wrap(a), _wrap(b)
    if isinstance(a, Const) and isinstance(b, Const) and abs(b.value) >= DIV_GUARD:
        return Const(a.value / b.value)
    if isinstance(b, Const) and b.value == 1.0:
        return a
    return Binary("div", a, b)


def fmin(a, b) -> Expr:
    return Binary("min", _wrap(a), _wrap(b))


def fmax(a, b) -> Expr:
    return Binary("max", _wrap(a), _wrap(b))


def clamp(x, lo, hi) -> Expr:
    return Clamp(_wrap(x), _wrap(lo), _wrap(hi))


def V(node: int) -> Expr:
    return Const(0.0) if node == 0 else Volt(node)


def I(label: str) -> Expr:  # noqa: E743
    return Curr(label)


# -- generic math helpers (floats or trees) ----------------------------------
#
# Model equations call these so the same code path serves numeric evaluation
# and tree construction.

def _unary_dispatch(op: str, fn: Callable[[float], float]):
    def apply(x):
        if isinstance(x, Expr):
            if isinstance(x, Const):
                return Const(fn(x.value))
            return Unary(op, x)
        return fn(x)

    apply.__name__ = op
    return apply


sin = _unary_dispatch("sin", math.sin)
cos = _unary_dispatch("cos", math.cos)
sqrt = _unary_dispatch("sqrt", math.sqrt)
exp = _unary_dispatch("exp", math.exp)
fabs = _unary_dispatch("abs", abs)


def minimum(a, b):
    if isinstance(a, Expr) or isinstance(b, Expr):
        return fmin(a, b)
    return min(a, b)


def maximum(a, b):
    if isinstance(a, Expr) or isinstance(b, Expr):
        return fmax(a, b)
    return max(a, b)


def limit(x, lo, hi):
    if isinstance(x, Expr) or isinstance(lo, Expr) or isinstance(hi, Expr):
        return clamp(x, lo, hi)
    return min(max(x, lo), hi)


# -- traversal ----------------------------------------------------------------

def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Unary):
        return (e.arg,)
    if isinstance(e, Binary):
        return (e.left, e.right)
    if isinstance(e, Clamp):
        return (e.arg, e.lo, e.hi)
    return ()


def walk(e: Expr) -> Iterable[Expr]:
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(children(node))


def references(e: Expr) -> tuple[set[int], set[str]]:
    """Node ids and device labels referenced by ``e``."""
    nodes, labels = set(), set()
    for node in walk(e):
        if isinstance(node, Volt):
            nodes.add(node.node)
        elif isinstance(node, Curr):
            labels.add(node.label)
    return nodes, labels


def substitute(e: Expr, fn: Callable[[Expr], Expr | None]) -> Expr:
    """Rebuild ``e`` bottom-up, replacing leaves for which ``fn`` returns a tree."""
    if isinstance(e, Unary):
        arg = substitute(e.arg, fn)
        return e if arg is e.arg else Unary(e.op, arg)
    if isinstance(e, Binary):
        left, right = substitute(e.left, fn), substitute(e.right, fn)
        if left is e.left and right is e.right:
            return e
        return Binary(e.op, left, right)
    if isinstance(e, Clamp):
        parts = [substitute(c, fn) for c in (e.arg, e.lo, e.hi)]
        return Clamp(*parts)
    replacement = fn(e)
    return e if replacement is None else replacement


# -- parsing ------------------------------------------------------------------

_NUMBER = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?([a-zA-Z]*)")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


def parse_number(token: str) -> float:
    """Parse a numeric literal with an optional engineering suffix."""
    m = _NUMBER.fullmatch(token.strip())
    if m is None:
        raise ValueError(f"not a number: {token!r}")
    return _apply_suffix(float(m.group(1) + (m.group(2) or "")), m.group(3))


def _apply_suffix(value: float, suffix: str) -> float:
    s = suffix.lower()
    if not s:
        return value
    if s.startswith("meg"):
        return value * 1e6
    if s.startswith("mil"):
        return value * SUFFIXES["mil"]
    if s[0] in SUFFIXES:
        return value * SUFFIXES[s[0]]
    # trailing unit letters such as "V" or "Ohm" carry no scale
    return value


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str, offset: int | None = None):
        raise ExpressionSyntaxError(message, self.pos if offset is None else offset)

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, token: str) -> bool:
        self.skip()
        return self.text.startswith(token, self.pos)

    def accept(self, token: str) -> bool:
        if self.peek(token):
            self.pos += len(token)
            return True
        return False

    def expect(self, token: str):
        if not self.accept(token):
            self.error(f"expected {token!r}")

    def parse(self) -> Expr:
        self.skip()
        if self.pos >= len(self.text):
            self.error("empty expression")
        e = self.expression()
        self.skip()
        if self.pos != len(self.text):
            self.error(f"unexpected {self.text[self.pos]!r}")
        return e

    def expression(self) -> Expr:
        e = self.term()
        while True:
            if self.accept("+"):
                e = Binary("add", e, self.term())
            elif self.peek("-"):
                self.pos += 1
                e = Binary("sub", e, self.term())
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            self.skip()
            if self.text.startswith("**", self.pos):
                return e
            if self.accept("*"):
                e = Binary("mul", e, self.unary())
            elif self.accept("/"):
                e = Binary("div", e, self.unary())
            else:
                return e

    def unary(self) -> Expr:
        if self.accept("-"):
            return Unary("neg", self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.accept("**") or self.accept("^"):
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Expr:
        self.skip()
        if self.pos >= len(self.text):
            self.error("unexpected end of expression")
        ch = self.text[self.pos]
        if ch == "(":
            self.pos += 1
            e = self.expression()
            self.expect(")")
            return e
        if ch.isdigit() or ch == ".":
            m = _NUMBER.match(self.text, self.pos)
            if m is None:
                self.error("malformed number")
            self.pos = m.end()
            return Const(_apply_suffix(float(m.group(1) + (m.group(2) or "")), m.group(3)))
        m = _IDENT.match(self.text, self.pos)
        if m is None:
            self.error(f"unexpected {ch!r}")
        name = m.group(0)
        start = self.pos
        self.pos = m.end()
        upper = name.upper()
        if upper == "TIME":
            return TIME
        if upper == "V" and self.peek("("):
            return self.voltage()
        if upper == "I" and self.peek("("):
            return self.current()
        if not self.peek("("):
            self.error(f"unknown identifier {name!r}", start)
        fname = name.lower()
        if fname not in FUNCTIONS:
            self.error(f"unknown function {name!r}", start)
        self.expect("(")
        args = [self.expression()]
        while self.accept(","):
            args.append(self.expression())
        self.expect(")")
        if len(args) != FUNCTIONS[fname]:
            self.error(
                f"{fname} takes {FUNCTIONS[fname]} argument(s), got {len(args)}", start
            )
        if fname == "clamp":
            return Clamp(*args)
        if len(args) == 1:
            return Unary(fname, args[0])
        return Binary(fname, args[0], args[1])

    def _node(self) -> int:
        self.skip()
        m = re.compile(r"\d+").match(self.text, self.pos)
        if m is None:
            self.error("expected node number")
        self.pos = m.end()
        return int(m.group(0))

    def voltage(self) -> Expr:
        self.expect("(")
        a = self._node()
        if self.accept(","):
            b = self._node()
            self.expect(")")
            return Binary("sub", V(a), V(b))
        self.expect(")")
        return V(a)

    def current(self) -> Expr:
        self.expect("(")
        end = self.text.find(")", self.pos)
        if end < 0:
            self.error("expected ')'", len(self.text))
        label = self.text[self.pos:end].strip()
        if not label:
            self.error("empty device label")
        self.pos = end + 1
        return Curr(label)


def parse_expression(text: str) -> Expr:
    """Parse expression text into a tree.

    >>> parse_expression("3*V(2)")
    Binary(op='mul', left=Const(value=3.0), right=Volt(node=2))
    """
    return _Parser(text).parse()


# -- printing -----------------------------------------------------------------

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}


def _fmt_number(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _prec(e: Expr) -> int:
    if isinstance(e, Binary) and e.op in _PREC:
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return 3
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return 3
    return 5


def to_text(e: Expr) -> str:
    """Render ``e`` in the grammar accepted by :func:`parse_expression`."""
    if isinstance(e, Const):
        if e.value < 0 or math.copysign(1.0, e.value) < 0:
            return "-" + _fmt_number(-e.value)
        return _fmt_number(e.value)
    if isinstance(e, Volt):
        return f"V({e.node})"
    if isinstance(e, Curr):
        return f"I({e.label})"
    if isinstance(e, Time):
        return "TIME"
    if isinstance(e, Clamp):
        return f"clamp({to_text(e.arg)},{to_text(e.lo)},{to_text(e.hi)})"
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = to_text(e.arg)
            return "-" + (f"({inner})" if _prec(e.arg) < 3 else inner)
        return f"{e.op}({to_text(e.arg)})"
    if e.op in _PREC:
        p = _PREC[e.op]
        left = to_text(e.left)
        if _prec(e.left) < p:
            left = f"({left})"
        right = to_text(e.right)
        # left-associative, and floating-point + and * are not associative either,
        # so an equal-precedence right operand keeps its parentheses
        if _prec(e.right) <= p:
            right = f"({right})"
        if _prec(e.right) == 3 and isinstance(e.right, Const):
            right = f"({right})"
        return f"{left}{'+-*/'['add sub mul div'.split().index(e.op)]}{right}"
    return f"{e.op}({to_text(e.left)},{to_text(e.right)})"


# -- evaluation ---------------------------------------------------------------

@dataclass
class Bindings:
    """Values for the references of an expression.

    ``guarded_divisions`` counts denominators regularized by the division
    guard during evaluations using these bindings.
    """

    voltages: Mapping[int, float] = field(default_factory=dict)
    currents: Mapping[str, float] = field(default_factory=dict)
    time: float = 0.0
    guarded_divisions: int = 0


def guard_denominator(den: float) -> float:
    if abs(den) < DIV_GUARD:
        return DIV_GUARD if den >= 0 else -DIV_GUARD
    return den


def _pow(a: float, b: float) -> float:
    try:
        return math.pow(a, b)
    except (ValueError, OverflowError):
        return math.nan


def _safe(fn, x):
    try:
        return fn(x)
    except (ValueError, OverflowError):
        return math.nan


def eval_expression(expr: Expr, bindings: Bindings) -> float:
    """Evaluate ``expr`` under ``bindings``.

    Division by a value smaller than ``DIV_GUARD`` in magnitude is
    regularized and counted in ``bindings.guarded_divisions``.
    """

    def ev(e: Expr) -> float:
        if isinstance(e, Const):
            return e.value
        if isinstance(e, Volt):
            if e.node == 0:
                return 0.0
            try:
                return float(bindings.voltages[e.node])
            except KeyError:
                raise UnboundReferenceError(f"V({e.node}) is not bound") from None
        if isinstance(e, Curr):
            try:
                return float(bindings.currents[e.label])
            except KeyError:
                raise UnboundReferenceError(f"I({e.label}) is not bound") from None
        if isinstance(e, Time):
            return bindings.time
        if isinstance(e, Clamp):
            x, lo, hi = ev(e.arg), ev(e.lo), ev(e.hi)
            out = min(max(x, lo), hi)
            operands = (x, lo, hi)
        elif isinstance(e, Unary):
            x = ev(e.arg)
            operands = (x,)
            if e.op == "neg":
                out = -x
            elif e.op == "abs":
                out = abs(x)
            elif e.op == "sqrt":
                out = _safe(math.sqrt, x)
            elif e.op == "exp":
                out = _safe(math.exp, x)
            elif e.op == "sin":
                out = math.sin(x)
            else:
                out = math.cos(x)
        else:
            a, b = ev(e.left), ev(e.right)
            operands = (a, b)
            op = e.op
            if op == "add":
                out = a + b
            elif op == "sub":
                out = a - b
            elif op == "mul":
                out = a * b
            elif op == "div":
                if abs(b) < DIV_GUARD:
                    bindings.guarded_divisions += 1
                out = a / guard_denominator(b)
            elif op == "pow":
                out = _pow(a, b)
            elif op == "min":
                out = min(a, b)
            else:
                out = max(a, b)
        if math.isnan(out) and not any(math.isnan(v) for v in operands):
            raise EvaluationFault(e)
        return out

    return ev(expr)


# -- linearity ----------------------------------------------------------------

def affine_coefficients(e: Expr) -> tuple[float, dict[Expr, float]] | None:
    """Return ``(offset, {leaf: coeff})`` if ``e`` is affine in its V/I leaves.

    Returns None for expressions that are nonlinear or depend on time.
    """
    if isinstance(e, Const):
        return e.value, {}
    if isinstance(e, (Volt, Curr)):
        return 0.0, {e: 1.0}
    if isinstance(e, Time) or isinstance(e, Clamp):
        return None
    if isinstance(e, Unary):
        if e.op != "neg":
            return None
        inner = affine_coefficients(e.arg)
        if inner is None:
            return None
        return -inner[0], {k: -v for k, v in inner[1].items()}
    if e.op in ("add", "sub"):
        a, b = affine_coefficients(e.left), affine_coefficients(e.right)
        if a is None or b is None:
            return None
        s = 1.0 if e.op == "add" else -1.0
        coeffs = dict(a[1])
        for k, v in b[1].items():
            coeffs[k] = coeffs.get(k, 0.0) + s * v
        return a[0] + s * b[0], coeffs
    if e.op == "mul":
        a, b = affine_coefficients(e.left), affine_coefficients(e.right)
        if a is None or b is None:
            return None
        if a[1] and b[1]:
            return None
        if a[1]:
            a, b = b, a
        k = a[0]
        return k * b[0], {leaf: k * v for leaf, v in b[1].items()}
    if e.op == "div":
        a, b = affine_coefficients(e.left), affine_coefficients(e.right)
        if a is None or b is None or b[1] or abs(b[0]) < DIV_GUARD:
            return None
        return a[0] / b[0], {leaf: v / b[0] for leaf, v in a[1].items()}
    return None


# -- compilation to Python ----------------------------------------------------

class _Codegen:
    """Forward-mode code generator with common-subexpression reuse."""

    def __init__(self, resolve: Callable[[Expr], int | None], derivatives: bool = True):
        self.resolve = resolve
        self.derivatives = derivatives
        self.lines: list[str] = []
        self.memo: dict[Expr, tuple[str, dict[int, str]]] = {}
        self.counter = 0
        self.uses_guard = False

    def tmp(self, code: str) -> str:
        name = f"_t{self.counter}"
        self.counter += 1
        self.lines.append(f"    {name} = {code}")
        return name

    def gen(self, e: Expr) -> tuple[str, dict[int, str]]:
        hit = self.memo.get(e)
        if hit is not None:
            return hit
        out = self._gen(e)
        self.memo[e] = out
        return out

    def _gen(self, e: Expr) -> tuple[str, dict[int, str]]:
        if isinstance(e, Const):
            return repr(e.value), {}
        if isinstance(e, Time):
            return "t", {}
        if isinstance(e, (Volt, Curr)):
            idx = self.resolve(e)
            if idx is None:
                return "0.0", {}
            return f"x[{idx}]", ({idx: "1.0"} if self.derivatives else {})
        if isinstance(e, Clamp):
            x, dx = self.gen(e.arg)
            lo, dlo = self.gen(e.lo)
            hi, dhi = self.gen(e.hi)
            v = self.tmp(f"{x} if {lo} <= {x} <= {hi} else ({lo} if {x} < {lo} else {hi})")
            # region selector: 0 inside, -1 below, 1 above
            sel = self.tmp(f"0 if {lo} <= {x} <= {hi} else (-1 if {x} < {lo} else 1)")
            d = {}
            for k in set(dx) | set(dlo) | set(dhi):
                d[k] = self.tmp(
                    f"({dx.get(k, '0.0')} if {sel} == 0 else "
                    f"({dlo.get(k, '0.0')} if {sel} < 0 else {dhi.get(k, '0.0')}))"
                )
            return v, d
        if isinstance(e, Unary):
            a, da = self.gen(e.arg)
            op = e.op
            if op == "neg":
                v = self.tmp(f"-{a}")
                return v, {k: self.tmp(f"-{d}") for k, d in da.items()}
            if op == "abs":
                v = self.tmp(f"abs({a})")
                s = self.tmp(f"(1.0 if {a} >= 0.0 else -1.0)")
                return v, {k: self.tmp(f"{s}*{d}") for k, d in da.items()}
            if op == "sqrt":
                v = self.tmp(f"_sqrt({a})")
                if da:
                    g = self.tmp(f"0.5/({v} if {v} > 1e-300 else 1e-300)")
                    return v, {k: self.tmp(f"{g}*{d}") for k, d in da.items()}
                return v, {}
            if op == "exp":
                v = self.tmp(f"_exp({a})")
                return v, {k: self.tmp(f"{v}*{d}") for k, d in da.items()}
            if op == "sin":
                v = self.tmp(f"_sin({a})")
                if da:
                    c = self.tmp(f"_cos({a})")
                    return v, {k: self.tmp(f"{c}*{d}") for k, d in da.items()}
                return v, {}
            v = self.tmp(f"_cos({a})")
            if da:
                s = self.tmp(f"-_sin({a})")
                return v, {k: self.tmp(f"{s}*{d}") for k, d in da.items()}
            return v, {}
        a, da = self.gen(e.left)
        b, db = self.gen(e.right)
        op = e.op
        keys = set(da) | set(db)
        if op in ("add", "sub"):
            sign = "+" if op == "add" else "-"
            v = self.tmp(f"{a} {sign} {b}")
            d = {}
            for k in keys:
                if k in da and k in db:
                    d[k] = self.tmp(f"{da[k]} {sign} {db[k]}")
                elif k in da:
                    d[k] = da[k]
                else:
                    d[k] = db[k] if op == "add" else self.tmp(f"-{db[k]}")
            return v, d
        if op == "mul":
            v = self.tmp(f"{a}*{b}")
            d = {}
            for k in keys:
                terms = []
                if k in da:
                    terms.append(b if da[k] == "1.0" else f"{da[k]}*{b}")
                if k in db:
                    terms.append(a if db[k] == "1.0" else f"{a}*{db[k]}")
                d[k] = self.tmp(" + ".join(terms))
            return v, d
        if op == "div":
            if isinstance(e.right, Const) and abs(e.right.value) >= DIV_GUARD:
                inv = repr(1.0 / e.right.value)
                v = self.tmp(f"{a}*{inv}")
                return v, {k: self.tmp(f"{d}*{inv}") for k, d in da.items()}
            self.uses_guard = True
            g = self.tmp(f"_guard({b})")
            v = self.tmp(f"{a}/{g}")
            d = {}
            for k in keys:
                num = []
                if k in da:
                    num.append(da[k])
                if k in db:
                    num.append(f"-{v}*{db[k]}")
                d[k] = self.tmp(f"({' + '.join(num)})/{g}")
            return v, d
        if op == "pow":
            v = self.tmp(f"_pow({a}, {b})")
            d = {}
            for k in keys:
                terms = []
                if k in da:
                    terms.append(f"{b}*_pow({a}, {b} - 1.0)*{da[k]}")
                if k in db:
                    terms.append(f"({v}*_log({a}) if {a} > 0.0 else 0.0)*{db[k]}")
                d[k] = self.tmp(" + ".join(terms))
            return v, d
        pick_left = f"{a} <= {b}" if op == "min" else f"{a} >= {b}"
        sel = self.tmp(pick_left)
        v = self.tmp(f"{a} if {sel} else {b}")
        return v, {k: self.tmp(f"{da.get(k, '0.0')} if {sel} else {db.get(k, '0.0')}") for k in keys}


@dataclass
class CompiledBatch:
    """A batch of expressions compiled into one Python function.

    ``func(x, t)`` returns ``(values, jac_values)``; ``jac_entries[k]`` is
    the ``(expression index, unknown index)`` pair of ``jac_values[k]``.
    ``values(x, t)`` skips the derivatives.  ``guard_hits`` counts
    regularized divisions across all calls.
    """

    func: Callable
    jac_entries: list[tuple[int, int]]
    source: str
    counter: list[int]
    values: Callable | None = None

    @property
    def guard_hits(self) -> int:
        return self.counter[0]


def compile_batch(exprs: list[Expr], resolve: Callable[[Expr], int | None]) -> CompiledBatch:
    """Compile ``exprs`` to a function of the unknown vector ``x`` and time ``t``.

    ``resolve`` maps ``Volt``/``Curr`` leaves to indices into ``x`` (None for
    ground).
    """
    import numpy as np

    def generate(fname: str, derivatives: bool):
        cg = _Codegen(resolve, derivatives)
        vals, entries, jac_codes = [], [], []
        for i, e in enumerate(exprs):
            v, d = cg.gen(e)
            vals.append(v)
            for k in sorted(d):
                entries.append((i, k))
                jac_codes.append(d[k])
        # scalar arithmetic on Python floats is much faster than on numpy scalars
        src = [f"def {fname}(x, t):", "    x = x.tolist() if hasattr(x, 'tolist') else x"]
        src += cg.lines
        ret = f"_np.array([{', '.join(vals)}{',' if len(vals) == 1 else ''}], dtype=float)"
        if derivatives:
            ret += f", _np.array([{', '.join(jac_codes)}{',' if len(jac_codes) == 1 else ''}], dtype=float)"
        src.append(f"    return {ret}")
        return "\n".join(src), entries

    source, entries = generate("_batch", True)
    value_source, _ = generate("_values", False)
    counter = [0]

    def _guard(den):
        if -DIV_GUARD < den < DIV_GUARD:
            counter[0] += 1
            return DIV_GUARD if den >= 0 else -DIV_GUARD
        return den

    ns = {
        "_np": np,
        "_sqrt": lambda v: math.sqrt(v) if v >= 0.0 else math.nan,
        "_exp": lambda v: math.exp(min(v, 700.0)),
        "_sin": math.sin,
        "_cos": math.cos,
        "_log": math.log,
        "_pow": _pow,
        "_guard": _guard,
    }
    exec(compile(source + "\n\n" + value_source, "<compiled-expressions>", "exec"), ns)
    return CompiledBatch(ns["_batch"], entries, source, counter, ns["_values"])
