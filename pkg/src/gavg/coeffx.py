"""Coefficient expressions and two-scale system assembly.

Expressions are written over slow variables x1..xn and fast variables y1..yn
with the usual precedence (^ binds tightest, then unary minus, then * and /,
then + and -).  Exponents are restricted to nonnegative integer literals so
sampled Lipschitz audits stay meaningful.  Evaluation is numpy-vectorized.

The hypothesis audits are sampling-based on a user-declared box: they report
"pass on this box" with witnesses, never a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import gcore
from .errors import ConfigError, EvalError, ExprError

# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

UNARY_OPS = ("neg", "sin", "cos", "tanh", "exp", "abs", "sqrt")
BINARY_OPS = ("+", "-", "*", "/", "pow", "min", "max")


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # 'x' slow, 'y' fast
    index: int  # 1-based


@dataclass(frozen=True)
class Unary:
    op: str
    arg: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


Expr = object  # Const | Var | Unary | Binary


class _Lexer:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0
        self.tokens = []
        self._run()

    def _run(self):
        s, n = self.src, len(self.src)
        i = 0
        while i < n:
            c = s[i]
            if c.isspace():
                i += 1
                continue
            if c.isdigit() or (c == "." and i + 1 < n and s[i + 1].isdigit()):
                j = i
                while j < n and (s[j].isdigit() or s[j] == "."):
                    j += 1
                if j < n and s[j] in "eE":
                    k = j + 1
                    if k < n and s[k] in "+-":
                        k += 1
                    if k < n and s[k].isdigit():
                        j = k
                        while j < n and s[j].isdigit():
                            j += 1
                try:
                    val = float(s[i:j])
                except ValueError:
                    raise ExprError(f"malformed number {s[i:j]!r}", offset=i) from None
                self.tokens.append(("num", val, i))
                i = j
                continue
            if c.isalpha() or c == "_":
                j = i
                while j < n and (s[j].isalnum() or s[j] == "_"):
                    j += 1
                self.tokens.append(("ident", s[i:j], i))
                i = j
                continue
            if c in "+-*/^(),":
                self.tokens.append((c, c, i))
                i += 1
                continue
            raise ExprError(f"unexpected character {c!r}", offset=i)
        self.tokens.append(("end", "", n))


_FUNCS = ("sin", "cos", "tanh", "exp", "abs", "sqrt")


class _Parser:
    def __init__(self, src: str, n_slow: int, n_fast: int):
        self.src = src
        self.n_slow = n_slow
        self.n_fast = n_fast
        self.tokens = _Lexer(src).tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str):
        tok = self.peek()
        if tok[0] != kind:
            raise ExprError(f"unexpected token {tok[1]!r}", offset=tok[2], expected=(kind,))
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprError(f"trailing input {tok[1]!r}", offset=tok[2], expected=("end",))
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.advance()[0]
            left = Binary(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek()[0] in ("*", "/"):
            op = self.advance()[0]
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.peek()[0] == "-":
            self.advance()
            return Unary("neg", self.unary())
        if self.peek()[0] == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        while self.peek()[0] == "^":
            off = self.advance()[2]
            tok = self.peek()
            if tok[0] != "num" or float(tok[1]) != int(tok[1]) or tok[1] < 0:
                raise ExprError(
                    "pow exponent must be a nonnegative integer literal",
                    offset=off, expected=("nonnegative integer",),
                )
            self.advance()
            base = Binary("pow", base, Const(float(int(tok[1]))))
        return base

    def atom(self) -> Expr:
        tok = self.advance()
        kind, val, off = tok
        if kind == "num":
            return Const(float(val))
        if kind == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "ident":
            if self.peek()[0] == "(":
                return self._call(val, off)
            return self._variable(val, off)
        raise ExprError(
            f"unexpected token {val!r}", offset=off,
            expected=("number", "identifier", "("),
        )

    def _call(self, name: str, off: int) -> Expr:
        self.expect("(")
        first = self.expr()
        if name in _FUNCS:
            self.expect(")")
            return Unary(name, first)
        if name in ("min", "max"):
            self.expect(",")
            second = self.expr()
            self.expect(")")
            return Binary(name, first, second)
        raise ExprError(f"unknown function {name!r}", offset=off,
                        expected=_FUNCS + ("min", "max"))

    def _variable(self, name: str, off: int) -> Expr:
        kind = name[0]
        if kind in ("x", "y") and name[1:].isdigit():
            idx = int(name[1:])
            limit = self.n_slow if kind == "x" else self.n_fast
            if 1 <= idx <= limit:
                return Var(kind, idx)
            raise ExprError(
                f"unknown identifier {name!r}: declared {'slow' if kind == 'x' else 'fast'} "
                f"dimension is {limit}", offset=off,
            )
        raise ExprError(f"unknown identifier {name!r}", offset=off)


def parse_expr(src: str, n_slow: int, n_fast: int) -> Expr:
    if not src or not src.strip():
        raise ExprError("empty expression", offset=0)
    return _Parser(src, n_slow, n_fast).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "pow": 4}


def to_src(e: Expr) -> str:
    """Print an AST back to source; parse(to_src(e)) == e."""
    return _print(e, 0)


def _print(e: Expr, parent_prec: int) -> str:
    if isinstance(e, Const):
        v = e.value
        return repr(int(v)) if v == int(v) and abs(v) < 1e15 else repr(v)
    if isinstance(e, Var):
        return f"{e.kind}{e.index}"
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = _print(e.arg, _PREC["neg"])
            s = f"-{inner}"
            return f"({s})" if parent_prec > _PREC["neg"] else s
        return f"{e.op}({_print(e.arg, 0)})"
    if isinstance(e, Binary):
        if e.op in ("min", "max"):
            return f"{e.op}({_print(e.left, 0)}, {_print(e.right, 0)})"
        if e.op == "pow":
            return f"{_print(e.left, _PREC['pow'] + 1)}^{_print(e.right, 0)}"
        prec = _PREC[e.op]
        left = _print(e.left, prec)
        right = _print(e.right, prec + 1)  # left-assoc
        s = f"{left} {e.op} {right}"
        return f"({s})" if parent_prec > prec else s
    raise TypeError(f"not an expression node: {e!r}")


def eval_expr(e: Expr, x=(), y=()):
    """Evaluate with numpy broadcasting; x/y are sequences indexed by variable."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        pool = x if e.kind == "x" else y
        return pool[e.index - 1]
    if isinstance(e, Unary):
        v = eval_expr(e.arg, x, y)
        if e.op == "neg":
            return np.negative(v)
        if e.op == "abs":
            return np.abs(v)
        return getattr(np, e.op)(v)
    if isinstance(e, Binary):
        a = eval_expr(e.left, x, y)
        b = eval_expr(e.right, x, y)
        if e.op == "+":
            return np.add(a, b)
        if e.op == "-":
            return np.subtract(a, b)
        if e.op == "*":
            return np.multiply(a, b)
        if e.op == "/":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.divide(a, b)
        if e.op == "pow":
            return np.power(a, int(b))
        if e.op == "min":
            return np.minimum(a, b)
        if e.op == "max":
            return np.maximum(a, b)
    raise TypeError(f"not an expression node: {e!r}")


def uses_variable(e: Expr, kind: str) -> bool:
    if isinstance(e, Var):
        return e.kind == kind
    if isinstance(e, Unary):
        return uses_variable(e.arg, kind)
    if isinstance(e, Binary):
        return uses_variable(e.left, kind) or uses_variable(e.right, kind)
    return False


# --------------------------------------------------------------------------
# Fields and the two-scale system (scalar: n_slow = n_fast = d = 1)
# --------------------------------------------------------------------------

FIELD_NAMES = ("b_tilde", "b_bar", "h_tilde", "h_bar", "sigma_tilde", "sigma_bar")


@dataclass(frozen=True)
class CoefficientField:
    name: str
    expr: Expr

    def __post_init__(self):
        if self.name not in FIELD_NAMES:
            raise ConfigError(f"unknown coefficient field {self.name!r}")


def eval_field(field: CoefficientField, x_slow, x_fast) -> np.ndarray:
    """Evaluate one coefficient field; any NaN/Inf is an error naming the point."""
    val = np.asarray(eval_expr(field.expr, x=(np.asarray(x_slow, dtype=float),),
                               y=(np.asarray(x_fast, dtype=float),)), dtype=float)
    val = np.broadcast_to(val, np.broadcast_shapes(np.shape(x_slow), np.shape(x_fast),
                                                   val.shape)).copy()
    if not np.all(np.isfinite(val)):
        bad = np.argwhere(~np.isfinite(val))
        idx = tuple(bad[0])
        xs = np.broadcast_to(x_slow, val.shape)[idx] if np.ndim(x_slow) else x_slow
        xf = np.broadcast_to(x_fast, val.shape)[idx] if np.ndim(x_fast) else x_fast
        raise EvalError(
            f"field {field.name} is non-finite at (x={xs}, y={xf})"
        )
    return val


@dataclass(frozen=True)
class TwoScaleSystem:
    """Slow/fast coefficient bundle with scale parameter and claimed constants."""

    g: gcore.GFunction
    b_tilde: CoefficientField
    b_bar: CoefficientField
    h_tilde: CoefficientField
    h_bar: CoefficientField
    sigma_tilde: CoefficientField
    sigma_bar: CoefficientField
    epsilon: float
    phi: Expr
    eta_claimed: float
    lip_claimed: float
    growth_claimed: float
    n_slow: int = 1
    n_fast: int = 1
    d_bm: int = 1

    def __post_init__(self):
        if (self.n_slow, self.n_fast, self.d_bm) != (1, 1, 1):
            raise ConfigError(
                "PDE-backed paths support n_slow = n_fast = d_bm = 1; got "
                f"({self.n_slow}, {self.n_fast}, {self.d_bm})"
            )
        if not (0.0 < self.epsilon < 1.0):
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.eta_claimed <= 0 or self.lip_claimed <= 0 or self.growth_claimed <= 0:
            raise ConfigError("eta, lip and growth constants must be positive")
        if self.g.dim != 1:
            raise ConfigError("scalar systems require a dim-1 generator")
        if uses_variable(self.phi, "y"):
            raise ConfigError("initial datum must depend on slow variables only")

    def with_epsilon(self, eps: float) -> "TwoScaleSystem":
        return replace(self, epsilon=float(eps))

    def fields(self) -> dict:
        return {name: getattr(self, name) for name in FIELD_NAMES}

    def slow_coupled(self) -> bool:
        """True when any fast-equation coefficient references a slow variable."""
        return any(uses_variable(getattr(self, n).expr, "x")
                   for n in ("b_bar", "h_bar", "sigma_bar"))


def make_system(g: gcore.GFunction, exprs: dict, epsilon: float, phi: str | Expr,
                eta: float, lip: float, growth: float) -> TwoScaleSystem:
    """Assemble a system from expression strings keyed by field name."""
    fields = {}
    for name in FIELD_NAMES:
        if name not in exprs:
            raise ConfigError(f"missing coefficient expression for {name}")
        e = exprs[name]
        fields[name] = CoefficientField(name, parse_expr(e, 1, 1) if isinstance(e, str) else e)
    phi_expr = parse_expr(phi, 1, 0) if isinstance(phi, str) else phi
    return TwoScaleSystem(g=g, epsilon=float(epsilon), phi=phi_expr,
                          eta_claimed=float(eta), lip_claimed=float(lip),
                          growth_claimed=float(growth), **fields)


# --------------------------------------------------------------------------
# Hypothesis audits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleBox:
    slow_lo: float
    slow_hi: float
    fast_lo: float
    fast_hi: float

    def __post_init__(self):
        if not (self.slow_lo <= self.slow_hi and self.fast_lo <= self.fast_hi):
            raise ConfigError("sample box has inverted bounds")

    @property
    def degenerate(self) -> bool:
        return (self.slow_hi - self.slow_lo) + (self.fast_hi - self.fast_lo) < 1e-6


@dataclass
class HypothesisCheck:
    status: str  # 'pass' | 'fail' | 'inconclusive'
    margin: float  # worst (smallest) slack observed; negative means violated
    witness: dict | None = None


@dataclass
class HypothesisReport:
    checks: dict  # name -> HypothesisCheck
    trials: int
    seed: int
    box: SampleBox
    measured_lip: dict  # field name -> max difference quotient observed

    @property
    def ok(self) -> bool:
        return all(c.status != "fail" for c in self.checks.values())

    def require_ok(self, what: str = "system"):
        if not self.ok:
            failed = {k: v for k, v in self.checks.items() if v.status == "fail"}
            detail = "; ".join(
                f"{k}: margin {v.margin:.3e}, witness {v.witness}" for k, v in failed.items()
            )
            raise ConfigError(f"{what} fails hypothesis audit: {detail}")

    def summary(self) -> str:
        return ", ".join(f"{k}={v.status}" for k, v in self.checks.items())


AUDIT_TOL = 1e-9


def audit_hypotheses(sys: TwoScaleSystem, box: SampleBox, trials: int,
                     seed: int) -> HypothesisReport:
    """Monte-Carlo audit of the Lipschitz, dissipativity and slow-growth
    hypotheses plus the derived fast-field growth bound, on the given box."""
    if trials < 100:
        raise ConfigError(f"audit needs trials >= 100, got {trials}")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(box.slow_lo, box.slow_hi, size=(2, trials))
    ys = rng.uniform(box.fast_lo, box.fast_hi, size=(2, trials))

    checks: dict[str, HypothesisCheck] = {}
    measured: dict[str, float] = {}

    # (H1): difference quotients of every field against the claimed constant.
    worst_h1 = math.inf
    wit_h1 = None
    for name, field in sys.fields().items():
        v0 = eval_field(field, xs[0], ys[0])
        v1 = eval_field(field, xs[1], ys[1])
        dist = np.hypot(xs[0] - xs[1], ys[0] - ys[1])
        ok = dist > 1e-12
        quot = np.abs(v0 - v1)[ok] / dist[ok]
        qmax = float(quot.max()) if quot.size else 0.0
        measured[name] = qmax
        slack = sys.lip_claimed * (1.0 + AUDIT_TOL) - qmax
        if slack < worst_h1:
            worst_h1 = slack
            k = int(np.argmax(np.abs(v0 - v1) / np.where(dist > 1e-12, dist, np.inf)))
            wit_h1 = {"field": name, "p": (xs[0][k], ys[0][k]), "q": (xs[1][k], ys[1][k]),
                      "quotient": qmax}
    checks["h1_lipschitz"] = _verdict(worst_h1, wit_h1, box)

    # (H2): dissipativity of the fast coefficients at shared slow argument.
    dybar = ys[0] - ys[1]
    dsig = (eval_field(sys.sigma_bar, xs[0], ys[0])
            - eval_field(sys.sigma_bar, xs[0], ys[1]))
    dh = (eval_field(sys.h_bar, xs[0], ys[0])
          - eval_field(sys.h_bar, xs[0], ys[1]))
    db = (eval_field(sys.b_bar, xs[0], ys[0])
          - eval_field(sys.b_bar, xs[0], ys[1]))
    gval = gcore.scalarize_array(sys.g, dsig * dsig + 2.0 * dybar * dh)
    lhs = gval + dybar * db
    slack_arr = (-sys.eta_claimed * dybar**2 + AUDIT_TOL) - lhs
    k = int(np.argmin(slack_arr))
    wit_h2 = {"x": xs[0][k], "y": ys[0][k], "y2": ys[1][k], "lhs": float(lhs[k]),
              "bound": float(-sys.eta_claimed * dybar[k] ** 2)}
    checks["h2_dissipativity"] = _verdict(float(slack_arr.min()), wit_h2, box)

    # (H3): growth of the slow coefficients in the slow variable only.
    worst_h3 = math.inf
    wit_h3 = None
    for name in ("b_tilde", "h_tilde", "sigma_tilde"):
        v = eval_field(getattr(sys, name), xs[0], ys[0])
        slack_arr = sys.growth_claimed * (1.0 + np.abs(xs[0])) + AUDIT_TOL - np.abs(v)
        m = float(slack_arr.min())
        if m < worst_h3:
            worst_h3 = m
            k = int(np.argmin(slack_arr))
            wit_h3 = {"field": name, "x": xs[0][k], "y": ys[0][k], "value": float(v[k])}
    checks["h3_growth"] = _verdict(worst_h3, wit_h3, box)

    # Derived growth of the fast coefficients at fast origin (used by the
    # ergodic machinery): |field(x, 0)| <= lip * (1 + |x|).
    worst_fg = math.inf
    wit_fg = None
    for name in ("b_bar", "h_bar", "sigma_bar"):
        v = eval_field(getattr(sys, name), xs[0], np.zeros_like(xs[0]))
        slack_arr = sys.lip_claimed * (1.0 + np.abs(xs[0])) + AUDIT_TOL - np.abs(v)
        m = float(slack_arr.min())
        if m < worst_fg:
            worst_fg = m
            k = int(np.argmin(slack_arr))
            wit_fg = {"field": name, "x": xs[0][k], "value": float(v[k])}
    checks["fast_growth"] = _verdict(worst_fg, wit_fg, box)

    return HypothesisReport(checks=checks, trials=trials, seed=seed, box=box,
                            measured_lip=measured)


def _verdict(margin: float, witness: dict | None, box: SampleBox) -> HypothesisCheck:
    if box.degenerate:
        return HypothesisCheck("inconclusive", margin, witness)
    if margin < 0.0:
        return HypothesisCheck("fail", margin, witness)
    return HypothesisCheck("pass", margin, None)
