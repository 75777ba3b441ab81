"""Small arithmetic expression language for transition rates and payoffs.

Grammar (infix, case-sensitive):

    sum     := product (('+' | '-') product)*
    product := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?            # right-associative
    atom    := NUMBER | IDENT | IDENT '(' args ')' | '(' sum ')'
    cond    := sum ('<' | '<=' | '=' | '>=' | '>') sum   # only inside if(...)

Functions: exp, log, min, max, abs, if(cond, a, b).  Variables are whatever
the surrounding model declares (typically t, m1..md, u).  There are no loops
or user-defined functions, so evaluation is total apart from the guarded
domain errors (division by zero, log of a nonpositive value, bad powers).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ExpressionEvalError, ModelParseError

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Unary",
    "Bin",
    "Call",
    "Cmp",
    "If",
    "parse_expression",
    "serialize",
    "variables",
    "eval_expr",
    "eval_expr_deriv",
    "compile_expression",
]


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    arg: "Expression"


@dataclass(frozen=True)
class Bin:
    op: str  # one of + - * / ^
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Call:
    name: str  # exp | log | min | max | abs
    args: tuple


@dataclass(frozen=True)
class Cmp:
    op: str  # < <= = >= >
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class If:
    cond: Cmp
    yes: "Expression"
    no: "Expression"


Expression = Union[Num, Var, Unary, Bin, Call, If]

FUNCTIONS = {"exp": 1, "log": 1, "abs": 1, "min": 2, "max": 2}


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<num>\d+\.\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?|\d+([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<cmp><=|>=|==|<|>|=)
  | (?P<op>[-+*/^(),])
  | (?P<ws>\s+)
""",
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str  # num | ident | cmp | op | end
    text: str
    line: int
    column: int


def _tokenize(text: str, line0: int = 1, col0: int = 1):
    tokens = []
    line, col = line0, col0
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ModelParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, tok, line, col))
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    tokens.append(_Token("end", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        tok = self.next()
        if tok.text != text:
            raise ModelParseError(
                f"expected {text!r}, found {tok.text!r}" if tok.text else f"expected {text!r}, found end of input",
                tok.line,
                tok.column,
            )
        return tok

    # grammar ---------------------------------------------------------------

    def parse_sum(self):
        node = self.parse_product()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            rhs = self.parse_product()
            node = Bin(op, node, rhs)
        return node

    def parse_product(self):
        node = self.parse_unary()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            rhs = self.parse_unary()
            node = Bin(op, node, rhs)
        return node

    def parse_unary(self):
        if self.peek().text == "-":
            self.next()
            return Unary(self.parse_unary())
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        if self.peek().text == "^":
            self.next()
            return Bin("^", base, self.parse_unary())
        return base

    def parse_atom(self):
        tok = self.next()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "ident":
            if self.peek().text == "(":
                return self.parse_call(tok)
            return Var(tok.text)
        if tok.text == "(":
            node = self.parse_sum()
            self.expect(")")
            return node
        raise ModelParseError(
            f"expected a value, found {tok.text!r}" if tok.text else "unexpected end of expression",
            tok.line,
            tok.column,
        )

    def parse_call(self, name_tok):
        name = name_tok.text
        self.expect("(")
        if name == "if":
            cond = self.parse_cond()
            self.expect(",")
            yes = self.parse_sum()
            self.expect(",")
            no = self.parse_sum()
            self.expect(")")
            return If(cond, yes, no)
        if name not in FUNCTIONS:
            raise ModelParseError(f"unknown function {name!r}", name_tok.line, name_tok.column)
        args = [self.parse_sum()]
        while self.peek().text == ",":
            self.next()
            args.append(self.parse_sum())
        self.expect(")")
        lo = FUNCTIONS[name]
        if name in ("min", "max"):
            if len(args) < 2:
                raise ModelParseError(f"{name} needs at least 2 arguments", name_tok.line, name_tok.column)
        elif len(args) != lo:
            raise ModelParseError(f"{name} takes exactly {lo} argument(s)", name_tok.line, name_tok.column)
        return Call(name, tuple(args))

    def parse_cond(self):
        left = self.parse_sum()
        tok = self.next()
        if tok.kind != "cmp":
            raise ModelParseError(
                f"expected a comparison operator inside if(...), found {tok.text!r}", tok.line, tok.column
            )
        op = "=" if tok.text == "==" else tok.text
        right = self.parse_sum()
        return Cmp(op, left, right)


def parse_expression(text: str, line: int = 1, column: int = 1) -> Expression:
    """Parse a single expression; ``line``/``column`` offset error positions."""
    parser = _Parser(_tokenize(text, line, column))
    node = parser.parse_sum()
    tail = parser.peek()
    if tail.kind != "end":
        raise ModelParseError(f"unexpected trailing input {tail.text!r}", tail.line, tail.column)
    return node


# ---------------------------------------------------------------------------
# Serialization (parse ∘ serialize is the identity on ASTs)


def serialize(node) -> str:
    if isinstance(node, Num):
        v = node.value
        if v == int(v) and abs(v) < 1e16:
            return str(int(v))
        return repr(v)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"(-{serialize(node.arg)})"
    if isinstance(node, Bin):
        return f"({serialize(node.left)} {node.op} {serialize(node.right)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(serialize(a) for a in node.args)})"
    if isinstance(node, Cmp):
        return f"{serialize(node.left)} {node.op} {serialize(node.right)}"
    if isinstance(node, If):
        return f"if({serialize(node.cond)}, {serialize(node.yes)}, {serialize(node.no)})"
    raise TypeError(f"not an expression node: {node!r}")


def variables(node) -> set:
    """Names of all variables referenced by the expression."""
    if isinstance(node, Num):
        return set()
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Unary):
        return variables(node.arg)
    if isinstance(node, (Bin, Cmp)):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Call):
        out = set()
        for a in node.args:
            out |= variables(a)
        return out
    if isinstance(node, If):
        return variables(node.cond) | variables(node.yes) | variables(node.no)
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Strict evaluation.  Environment values may be floats or equal-length 1-d
# arrays; `if` evaluates branches lazily (on the masked sub-environment) so
# guards never fire for operands the conditional discards.


def _slice_env(env, mask):
    return {k: (v[mask] if isinstance(v, np.ndarray) and v.ndim > 0 else v) for k, v in env.items()}


def _env_len(env):
    for v in env.values():
        if isinstance(v, np.ndarray) and v.ndim > 0:
            return v.shape[0]
    return None


_CMP_FN = {
    "<": np.less,
    "<=": np.less_equal,
    "=": np.equal,
    ">=": np.greater_equal,
    ">": np.greater,
}


def _ev(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise ExpressionEvalError(f"unbound variable '{node.name}'") from None
    if isinstance(node, Unary):
        return -_ev(node.arg, env)
    if isinstance(node, Bin):
        a = _ev(node.left, env)
        if node.op == "+":
            return a + _ev(node.right, env)
        if node.op == "-":
            return a - _ev(node.right, env)
        if node.op == "*":
            return a * _ev(node.right, env)
        if node.op == "/":
            b = _ev(node.right, env)
            if np.any(np.asarray(b) == 0.0):
                raise ExpressionEvalError("division by zero", serialize(node))
            return a / b
        if node.op == "^":
            b = _ev(node.right, env)
            return _safe_pow(a, b, node)
        raise TypeError(node.op)
    if isinstance(node, Call):
        vals = [_ev(a, env) for a in node.args]
        if node.name == "exp":
            return np.exp(vals[0])
        if node.name == "log":
            if np.any(np.asarray(vals[0]) <= 0.0):
                raise ExpressionEvalError("log of a nonpositive value", serialize(node))
            return np.log(vals[0])
        if node.name == "abs":
            return np.abs(vals[0])
        if node.name == "min":
            out = vals[0]
            for v in vals[1:]:
                out = np.minimum(out, v)
            return out
        if node.name == "max":
            out = vals[0]
            for v in vals[1:]:
                out = np.maximum(out, v)
            return out
        raise TypeError(node.name)
    if isinstance(node, If):
        cond = _CMP_FN[node.cond.op](_ev(node.cond.left, env), _ev(node.cond.right, env))
        if np.ndim(cond) == 0:
            return _ev(node.yes if cond else node.no, env)
        n = cond.shape[0]
        out = np.empty(n, dtype=float)
        mask = np.asarray(cond, dtype=bool)
        if mask.any():
            out[mask] = _ev(node.yes, _slice_env(env, mask))
        if (~mask).any():
            out[~mask] = _ev(node.no, _slice_env(env, ~mask))
        return out
    raise TypeError(f"not an expression node: {node!r}")


def _safe_pow(a, b, node):
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any((a_arr == 0.0) & (b_arr < 0.0)):
        raise ExpressionEvalError("zero raised to a negative power", serialize(node))
    if np.any((a_arr < 0.0) & (b_arr != np.floor(b_arr))):
        raise ExpressionEvalError("fractional power of a negative base", serialize(node))
    return np.power(a, b)


def eval_expr(node, env) -> float:
    """Evaluate under a {name: value} environment.

    Values may be scalars or equal-length 1-d arrays (the result then has that
    length).  Raises :class:`ExpressionEvalError` naming the offending
    subexpression on domain errors.
    """
    out = _ev(node, env)
    if isinstance(out, np.ndarray):
        return out.astype(float, copy=False)
    return float(out)


# ---------------------------------------------------------------------------
# Forward-mode directional derivative with respect to one variable.  This is
# numeric evaluation of calculus rules on the tree, not symbolic
# differentiation; kinks (abs/min/max/if boundaries) take the same
# selection the value evaluation takes.


def _evd(node, env, wrt):
    if isinstance(node, Num):
        return node.value, 0.0
    if isinstance(node, Var):
        try:
            v = env[node.name]
        except KeyError:
            raise ExpressionEvalError(f"unbound variable '{node.name}'") from None
        return v, (1.0 if node.name == wrt else 0.0)
    if isinstance(node, Unary):
        v, d = _evd(node.arg, env, wrt)
        return -v, -d
    if isinstance(node, Bin):
        a, da = _evd(node.left, env, wrt)
        b, db = _evd(node.right, env, wrt)
        if node.op == "+":
            return a + b, da + db
        if node.op == "-":
            return a - b, da - db
        if node.op == "*":
            return a * b, da * b + a * db
        if node.op == "/":
            if np.any(np.asarray(b) == 0.0):
                raise ExpressionEvalError("division by zero", serialize(node))
            return a / b, (da * b - a * db) / (b * b)
        if node.op == "^":
            v = _safe_pow(a, b, node)
            if np.all(np.asarray(db) == 0.0):
                if np.all(np.asarray(b) == 0.0) or np.all(np.asarray(da) == 0.0):
                    return v, np.zeros_like(v) if np.ndim(v) else 0.0
                # constant exponent: d(a^b) = b a^(b-1) da, valid at a = 0 for b >= 1
                return v, b * _safe_pow(a, np.asarray(b) - 1.0, node) * da
            if np.any(np.asarray(a) <= 0.0):
                raise ExpressionEvalError("derivative of power needs a positive base", serialize(node))
            return v, v * (db * np.log(a) + b * da / a)
        raise TypeError(node.op)
    if isinstance(node, Call):
        pairs = [_evd(a, env, wrt) for a in node.args]
        if node.name == "exp":
            v = np.exp(pairs[0][0])
            return v, v * pairs[0][1]
        if node.name == "log":
            a, da = pairs[0]
            if np.any(np.asarray(a) <= 0.0):
                raise ExpressionEvalError("log of a nonpositive value", serialize(node))
            return np.log(a), da / a
        if node.name == "abs":
            a, da = pairs[0]
            return np.abs(a), np.sign(a) * da
        if node.name in ("min", "max"):
            v, d = pairs[0]
            for b, db in pairs[1:]:
                if node.name == "min":
                    take_first = np.less_equal(v, b)
                else:
                    take_first = np.greater_equal(v, b)
                v = np.where(take_first, v, b)
                d = np.where(take_first, d, db)
            return v, d
        raise TypeError(node.name)
    if isinstance(node, If):
        cond = _CMP_FN[node.cond.op](_ev(node.cond.left, env), _ev(node.cond.right, env))
        if np.ndim(cond) == 0:
            return _evd(node.yes if cond else node.no, env, wrt)
        n = cond.shape[0]
        v = np.empty(n, dtype=float)
        d = np.empty(n, dtype=float)
        mask = np.asarray(cond, dtype=bool)
        if mask.any():
            vy, dy = _evd(node.yes, _slice_env(env, mask), wrt)
            v[mask], d[mask] = vy, dy
        if (~mask).any():
            vn, dn = _evd(node.no, _slice_env(env, ~mask), wrt)
            v[~mask], d[~mask] = vn, dn
        return v, d
    raise TypeError(f"not an expression node: {node!r}")


def eval_expr_deriv(node, env, wrt: str):
    """Return (value, d value / d env[wrt]) under the same conventions as
    :func:`eval_expr`."""
    v, d = _evd(node, env, wrt)
    if isinstance(v, np.ndarray):
        n = v.shape[0]
        d = np.broadcast_to(np.asarray(d, dtype=float), (n,))
        return v.astype(float, copy=False), np.array(d, dtype=float)
    return float(v), float(d)


# ---------------------------------------------------------------------------
# Code generation for hot loops.  The compiled function takes (t, m, u) where
# m indexes 0-based state components and any argument may be an array; `if`
# lowers to an eager np.where, so it must only be used on inputs already known
# to be in the expression's domain (validated models along valid flows).


def _gen(node):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        name = node.name
        if name == "t":
            return "t"
        if name == "u":
            return "u"
        if name.startswith("m") and name[1:].isdigit():
            return f"m[{int(name[1:]) - 1}]"
        raise ExpressionEvalError(f"cannot compile variable '{name}'")
    if isinstance(node, Unary):
        return f"(-{_gen(node.arg)})"
    if isinstance(node, Bin):
        if node.op == "^":
            return f"({_gen(node.left)} ** {_gen(node.right)})"
        return f"({_gen(node.left)} {node.op} {_gen(node.right)})"
    if isinstance(node, Call):
        args = [_gen(a) for a in node.args]
        if node.name == "exp":
            return f"np.exp({args[0]})"
        if node.name == "log":
            return f"np.log({args[0]})"
        if node.name == "abs":
            return f"np.abs({args[0]})"
        if node.name in ("min", "max"):
            fn = "np.minimum" if node.name == "min" else "np.maximum"
            out = args[0]
            for a in args[1:]:
                out = f"{fn}({out}, {a})"
            return out
        raise TypeError(node.name)
    if isinstance(node, Cmp):
        op = "==" if node.op == "=" else node.op
        return f"({_gen(node.left)} {op} {_gen(node.right)})"
    if isinstance(node, If):
        return f"np.where({_gen(node.cond)}, {_gen(node.yes)}, {_gen(node.no)})"
    raise TypeError(f"not an expression node: {node!r}")


def compile_expression(node):
    """Compile to ``f(t, m, u) -> float or ndarray`` with numpy semantics.

    Domain guards are not enforced here (masked-out np.where lanes may touch
    invalid operands); use :func:`eval_expr` wherever errors must surface.
    """
    src = "lambda t, m, u: (" + _gen(node) + ")"
    raw = eval(src, {"np": np})  # source is generated from the validated AST only

    def fn(t, m, u):
        with np.errstate(all="ignore"):
            return raw(t, m, u)

    return fn
