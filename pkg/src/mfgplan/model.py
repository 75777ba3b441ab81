"""Game models: action grids, rate/payoff expressions, parsing, validation.

A model couples a finite state space {1..d}, a horizon T, a finite action
grid (the discretization of a compact action set), a d x d matrix of
transition-rate expressions Q in (t, m, u), and a d-vector of running-payoff
expressions g.  Models are immutable after parsing and safe to share across
threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

from . import expressions as ex
from .errors import KolmogorovViolationError, ModelParseError

__all__ = [
    "ActionGrid",
    "ModelSpec",
    "parse_model",
    "serialize_model",
    "eval_Q",
    "eval_g",
    "eval_sigma",
    "validate_model",
    "ValidationReport",
    "builtin_model",
    "builtin_model_names",
    "builtin_example_section4",
    "SECTION4_M0",
    "SECTION4_MT",
    "section4_utilde",
]

ROWSUM_TOL = 1e-12
OFFDIAG_TOL = -1e-12


@dataclass(frozen=True, eq=False)
class ActionGrid:
    """Finite set of scalar actions, either an explicit list or a uniform
    discretization of an interval [a, b] with K points (endpoints included)."""

    points: np.ndarray
    source: str  # "explicit" | "interval"
    interval: Optional[tuple] = None  # (a, b, K) when source == "interval"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size == 0:
            raise ModelParseError("action grid must be a nonempty list of scalars")
        if np.unique(pts).size != pts.size:
            raise ModelParseError("action grid points must be distinct")

    @classmethod
    def from_interval(cls, a: float, b: float, k: int) -> "ActionGrid":
        if k < 2:
            raise ModelParseError("interval action grid needs K >= 2")
        if not b > a:
            raise ModelParseError("interval action grid needs b > a")
        return cls(np.linspace(a, b, k), "interval", (float(a), float(b), int(k)))

    def __len__(self):
        return self.points.size

    def refine(self) -> "ActionGrid":
        """Nested refinement: midpoints inserted between consecutive points."""
        pts = self.points
        mids = 0.5 * (pts[:-1] + pts[1:])
        merged = np.sort(np.concatenate([pts, mids]))
        return ActionGrid(merged, "explicit")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable game description.

    ``Q[i][j]`` and ``g[i]`` are expression trees in (t, m1..md, u); ``sigma``
    (optional) gives the classical terminal payoff as expressions in m.  When
    the running payoff is declared in split form, ``g_action`` holds the
    g0(t, u) part and ``g_mean`` the g1(t, m) part, with g = g0 + g1.
    """

    d: int
    T: float
    actions: ActionGrid
    Q: tuple
    g: tuple
    sigma: Optional[tuple] = None
    g_action: Optional[tuple] = None
    g_mean: Optional[tuple] = None
    name: str = ""

    @property
    def has_split_payoff(self) -> bool:
        return self.g_action is not None

    def q_entry_uses(self, varname: str) -> bool:
        return any(varname in ex.variables(e) for row in self.Q for e in row)

    def g_entry_uses(self, varname: str) -> bool:
        return any(varname in ex.variables(e) for e in self.g)

    @property
    def q_depends_on_m(self) -> bool:
        return any(self.q_entry_uses(f"m{j}") for j in range(1, self.d + 1))

    @property
    def g_depends_on_m(self) -> bool:
        return any(self.g_entry_uses(f"m{j}") for j in range(1, self.d + 1))

    def env(self, t, m, u):
        out = {"t": t, "u": u}
        for j in range(self.d):
            out[f"m{j + 1}"] = m[j]
        return out


# ---------------------------------------------------------------------------
# Evaluation


def eval_Q(model: ModelSpec, t: float, m, u) -> np.ndarray:
    """Evaluate the rate matrix at (t, m, u) and enforce the Kolmogorov
    contract: |row sum| <= 1e-12 and off-diagonals >= -1e-12."""
    env = model.env(t, np.asarray(m, dtype=float), u)
    d = model.d
    out = np.empty((d, d), dtype=float)
    for i in range(d):
        for j in range(d):
            out[i, j] = ex.eval_expr(model.Q[i][j], env)
    witness = f"at t={t}, m={np.asarray(m).tolist()}, u={u}"
    for i in range(d):
        s = out[i].sum()
        if abs(s) > ROWSUM_TOL:
            raise KolmogorovViolationError(f"row {i + 1} sums to {s:.3e} (tolerance 1e-12) {witness}")
        for j in range(d):
            if i != j and out[i, j] < OFFDIAG_TOL:
                raise KolmogorovViolationError(
                    f"off-diagonal entry Q[{i + 1}][{j + 1}] = {out[i, j]:.3e} is negative {witness}"
                )
    return out


def eval_g(model: ModelSpec, t: float, m, u) -> np.ndarray:
    """Evaluate the running-payoff vector at (t, m, u)."""
    env = model.env(t, np.asarray(m, dtype=float), u)
    return np.array([ex.eval_expr(e, env) for e in model.g], dtype=float)


def eval_sigma(model: ModelSpec, m) -> np.ndarray:
    """Evaluate the terminal payoff sigma(m); requires the model to declare it."""
    if model.sigma is None:
        raise ModelParseError("model declares no terminal payoff sigma")
    env = {f"m{j + 1}": np.asarray(m, dtype=float)[j] for j in range(model.d)}
    return np.array([ex.eval_expr(e, env) for e in model.sigma], dtype=float)


# ---------------------------------------------------------------------------
# Model file parsing

_KEY_RE = re.compile(
    r"""^(?:
      (?P<scalar>d|T)
    | (?P<actions>actions)
    | Q\[(?P<qi>\d+)\]\[(?P<qj>\d+)\]
    | (?P<gkind>g0|g1|g|sigma)\[(?P<gi>\d+)\]
    )$""",
    re.VERBOSE,
)

_ACTION_LIST_RE = re.compile(r"^\[(?P<body>[^\]]*)\]$")
_ACTION_INTERVAL_RE = re.compile(r"^interval\(\s*(?P<a>[^,]+),\s*(?P<b>[^,]+),\s*(?P<k>[^,)]+)\)$")


def _allowed_vars(kind: str, d: int) -> set:
    ms = {f"m{j}" for j in range(1, d + 1)}
    if kind == "Q" or kind == "g":
        return {"t", "u"} | ms
    if kind == "g0":
        return {"t", "u"}
    if kind == "g1":
        return {"t"} | ms
    if kind == "sigma":
        return ms
    raise ValueError(kind)


def _check_vars(node, kind: str, d: int, line: int):
    for name in sorted(ex.variables(node)):
        if re.fullmatch(r"u\d+", name):
            raise ModelParseError(
                f"tuple-valued action variable '{name}' is reserved but not implemented", line, 1
            )
        if name not in _allowed_vars(kind, d):
            raise ModelParseError(f"unknown variable '{name}' in {kind} entry", line, 1)


def parse_model(text: str, name: str = "") -> ModelSpec:
    """Parse model file contents (see the README for the line grammar)."""
    d = None
    horizon = None
    actions = None
    q_entries = {}  # (i, j) -> (expr or "auto", line)
    g_entries = {"g": {}, "g0": {}, "g1": {}, "sigma": {}}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelParseError("expected 'key = value'", lineno, 1)
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        col = raw.index("=") + 2
        m = _KEY_RE.match(key)
        if m is None:
            raise ModelParseError(f"unrecognized entry {key!r}", lineno, 1)
        if m.group("scalar"):
            if m.group("scalar") == "d":
                if d is not None:
                    raise ModelParseError("duplicate 'd'", lineno, 1)
                try:
                    d = int(value)
                except ValueError:
                    raise ModelParseError(f"'d' must be an integer, got {value!r}", lineno, col) from None
                if d < 1:
                    raise ModelParseError("'d' must be >= 1", lineno, col)
            else:
                if horizon is not None:
                    raise ModelParseError("duplicate 'T'", lineno, 1)
                try:
                    horizon = float(value)
                except ValueError:
                    raise ModelParseError(f"'T' must be a number, got {value!r}", lineno, col) from None
                if not horizon > 0:
                    raise ModelParseError("'T' must be positive", lineno, col)
        elif m.group("actions"):
            if actions is not None:
                raise ModelParseError("duplicate 'actions'", lineno, 1)
            actions = _parse_actions(value, lineno, col)
        elif m.group("qi"):
            i, j = int(m.group("qi")), int(m.group("qj"))
            if (i, j) in q_entries:
                raise ModelParseError(f"duplicate entry Q[{i}][{j}]", lineno, 1)
            if value == "auto":
                if i != j:
                    raise ModelParseError("'auto' is only allowed on diagonal entries", lineno, col)
                q_entries[(i, j)] = ("auto", lineno)
            else:
                q_entries[(i, j)] = (ex.parse_expression(value, lineno, col), lineno)
        else:
            kind, gi = m.group("gkind"), int(m.group("gi"))
            if gi in g_entries[kind]:
                raise ModelParseError(f"duplicate entry {kind}[{gi}]", lineno, 1)
            g_entries[kind][gi] = (ex.parse_expression(value, lineno, col), lineno)

    if d is None:
        raise ModelParseError("missing 'd = <int>'")
    if horizon is None:
        raise ModelParseError("missing 'T = <real>'")
    if actions is None:
        raise ModelParseError("missing 'actions = ...'")
    if g_entries["g"] and (g_entries["g0"] or g_entries["g1"]):
        raise ModelParseError("give either g[i] or the split form g0[i]/g1[i], not both")

    zero = ex.Num(0.0)

    # assemble Q with bounds checks, then resolve auto diagonals
    q = [[zero for _ in range(d)] for _ in range(d)]
    for (i, j), (entry, lineno) in q_entries.items():
        if not (1 <= i <= d and 1 <= j <= d):
            raise ModelParseError(f"Q[{i}][{j}] is outside the declared {d}x{d} matrix", lineno, 1)
        if entry != "auto":
            _check_vars(entry, "Q", d, lineno)
            q[i - 1][j - 1] = entry
    for (i, j), (entry, lineno) in q_entries.items():
        if entry == "auto":
            offdiag = [q[i - 1][c] for c in range(d) if c != i - 1 and q[i - 1][c] != zero]
            if not offdiag:
                q[i - 1][j - 1] = zero
            else:
                total = offdiag[0]
                for e in offdiag[1:]:
                    total = ex.Bin("+", total, e)
                q[i - 1][j - 1] = ex.Unary(total)

    def build_vector(kind):
        out = [zero] * d
        for gi, (entry, lineno) in g_entries[kind].items():
            if not (1 <= gi <= d):
                raise ModelParseError(f"{kind}[{gi}] is outside the declared length-{d} vector", lineno, 1)
            _check_vars(entry, kind, d, lineno)
            out[gi - 1] = entry
        return tuple(out)

    g_action = g_mean = None
    if g_entries["g0"] or g_entries["g1"]:
        g_action = build_vector("g0")
        g_mean = build_vector("g1")
        g = tuple(
            a if b == zero else (b if a == zero else ex.Bin("+", a, b)) for a, b in zip(g_action, g_mean)
        )
    else:
        g = build_vector("g")

    sigma = build_vector("sigma") if g_entries["sigma"] else None

    return ModelSpec(
        d=d, T=horizon, actions=actions, Q=tuple(tuple(row) for row in q), g=g,
        sigma=sigma, g_action=g_action, g_mean=g_mean, name=name,
    )


def _parse_actions(value: str, lineno: int, col: int) -> ActionGrid:
    m = _ACTION_LIST_RE.match(value)
    if m:
        body = m.group("body").strip()
        if not body:
            raise ModelParseError("action list must not be empty", lineno, col)
        try:
            pts = [float(p.strip()) for p in body.split(",")]
        except ValueError:
            raise ModelParseError(f"bad action list {value!r}", lineno, col) from None
        return ActionGrid(np.array(pts, dtype=float), "explicit")
    m = _ACTION_INTERVAL_RE.match(value)
    if m:
        try:
            a, b, k = float(m.group("a")), float(m.group("b")), int(m.group("k"))
        except ValueError:
            raise ModelParseError(f"bad interval spec {value!r}", lineno, col) from None
        return ActionGrid.from_interval(a, b, k)
    raise ModelParseError(f"actions must be '[v1, v2, ...]' or 'interval(a, b, K)', got {value!r}", lineno, col)


def serialize_model(model: ModelSpec) -> str:
    """Emit model file text that parses back to an identical ModelSpec."""
    lines = [f"d = {model.d}", f"T = {model.T!r}"]
    if model.actions.source == "interval":
        a, b, k = model.actions.interval
        lines.append(f"actions = interval({a!r}, {b!r}, {k})")
    else:
        lines.append("actions = [" + ", ".join(repr(p) for p in model.actions.points.tolist()) + "]")
    zero = ex.Num(0.0)
    for i in range(model.d):
        for j in range(model.d):
            if model.Q[i][j] != zero:
                lines.append(f"Q[{i + 1}][{j + 1}] = {ex.serialize(model.Q[i][j])}")
    if model.has_split_payoff:
        for i, e in enumerate(model.g_action):
            if e != zero:
                lines.append(f"g0[{i + 1}] = {ex.serialize(e)}")
        for i, e in enumerate(model.g_mean):
            if e != zero:
                lines.append(f"g1[{i + 1}] = {ex.serialize(e)}")
        if all(e == zero for e in model.g_action) and all(e == zero for e in model.g_mean):
            lines.append("g0[1] = 0")
    else:
        for i, e in enumerate(model.g):
            if e != zero:
                lines.append(f"g[{i + 1}] = {ex.serialize(e)}")
    if model.sigma is not None:
        wrote = False
        for i, e in enumerate(model.sigma):
            if e != zero:
                lines.append(f"sigma[{i + 1}] = {ex.serialize(e)}")
                wrote = True
        if not wrote:
            lines.append("sigma[1] = 0")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationReport:
    ok: bool
    n_samples: int
    seed: int
    max_rowsum_deviation: float
    min_offdiagonal: float
    lipschitz_estimate: float  # advisory: max finite-difference ratio in m
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {
            "ok": self.ok,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "max_rowsum_deviation": self.max_rowsum_deviation,
            "min_offdiagonal": self.min_offdiagonal,
            "lipschitz_estimate": self.lipschitz_estimate,
            "failures": self.failures,
        }


def validate_model(model: ModelSpec, n_samples: int = 1000, seed: int = 0) -> ValidationReport:
    """Sample (t, m, u) quasi-uniformly and check the Kolmogorov contract.

    The Lipschitz figure is the largest finite-difference ratio of Q in m over
    nearby simplex pairs; it is advisory only (a discontinuity shows up as a
    ratio that grows with sample density, not as a failure).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d = model.d
    k = len(model.actions)
    sampler = qmc.Halton(d=2 * d + 2, scramble=True, seed=seed)
    x = np.clip(sampler.random(n_samples), 1e-12, 1 - 1e-12)

    ts = x[:, 0] * model.T
    m1 = -np.log(x[:, 1 : d + 1])
    m1 /= m1.sum(axis=1, keepdims=True)
    m2 = -np.log(x[:, d + 1 : 2 * d + 1])
    m2 /= m2.sum(axis=1, keepdims=True)
    us = model.actions.points[np.minimum((x[:, -1] * k).astype(int), k - 1)]

    max_dev = 0.0
    min_off = math.inf if d > 1 else 0.0
    lip = 0.0
    failures = []
    theta = 1e-3  # perturbation scale for the finite-difference ratio
    for s in range(n_samples):
        t, m, u = float(ts[s]), m1[s], float(us[s])
        env = model.env(t, m, u)
        qmat = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                qmat[i, j] = ex.eval_expr(model.Q[i][j], env)
        dev = float(np.abs(qmat.sum(axis=1)).max())
        max_dev = max(max_dev, dev)
        if d > 1:
            off = qmat[~np.eye(d, dtype=bool)]
            min_off = min(min_off, float(off.min()))
        if dev > ROWSUM_TOL:
            failures.append(f"row-sum deviation {dev:.3e} at t={t:.6g}, m={m.tolist()}, u={u:.6g}")
        if d > 1 and float(off.min()) < OFFDIAG_TOL:
            failures.append(f"negative off-diagonal {float(off.min()):.3e} at t={t:.6g}, m={m.tolist()}, u={u:.6g}")

        m_near = (1.0 - theta) * m + theta * m2[s]
        dm = float(np.abs(m - m_near).max())
        if dm > 1e-15:
            env2 = model.env(t, m_near, u)
            q2 = np.empty((d, d))
            for i in range(d):
                for j in range(d):
                    q2[i, j] = ex.eval_expr(model.Q[i][j], env2)
            lip = max(lip, float(np.abs(qmat - q2).max()) / dm)

    return ValidationReport(
        ok=not failures,
        n_samples=n_samples,
        seed=seed,
        max_rowsum_deviation=max_dev,
        min_offdiagonal=float(min_off),
        lipschitz_estimate=lip,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Built-in models

_SECTION4_RHO = "if(t < 1/3, 1, if(t < 2/3, -3*t + 2, 0))"

_BUILTIN_TEXTS = {
    # Three-state steering counterexample: one controlled transition 1 -> 2,
    # a decaying relay 2 -> 3, quadratic action cost in state 1.  The target
    # below is reachable by exactly one control, yet no terminal payoff makes
    # that control optimal, so planning toward it has no classical solution.
    "section4": f"""
d = 3
T = 1
actions = interval(0, 1, 101)
Q[1][1] = auto
Q[1][2] = u
Q[2][2] = auto
Q[2][3] = {_SECTION4_RHO}
g0[1] = -u^2
""",
    # Same dynamics with the action cost halved; its optimal feedback is the
    # difference of values clamped to [0, 1].
    "section4-half": f"""
d = 3
T = 1
actions = interval(0, 1, 101)
Q[1][1] = auto
Q[1][2] = u
Q[2][2] = auto
Q[2][3] = {_SECTION4_RHO}
g0[1] = -(u^2)/2
""",
    # Two states, absorbing second state, bang-bang actions; terminal reward
    # for ending absorbed.  Everything about it has a closed form.
    "twostate": """
d = 2
T = 1
actions = [0, 1]
Q[1][1] = auto
Q[1][2] = u
sigma[1] = 0
sigma[2] = 1
""",
    # Symmetric controlled exchange with quadratic action costs and a
    # strictly monotone crowd-aversion payoff (each state dislikes its own
    # occupancy), declared in split form.
    "monotone2": """
d = 2
T = 1
actions = interval(0, 1, 21)
Q[1][1] = auto
Q[1][2] = u
Q[2][1] = u
Q[2][2] = auto
g0[1] = -(u^2)/2
g0[2] = -(u^2)/2
g1[1] = -m1
g1[2] = -m2
sigma[1] = -m1
sigma[2] = -m2
""",
    # Rates coupled to the crowd (still Kolmogorov for every m in the
    # simplex) and a payoff mixing actions with occupancies; exercises the
    # fully measure-dependent code paths.
    "coupled2": """
d = 2
T = 1
actions = interval(0, 1, 11)
Q[1][1] = auto
Q[1][2] = u*(1 + m2)/2
Q[2][1] = (1 - m1/2)/2
Q[2][2] = auto
g[1] = -(u^2)/2 - m2*u/4
g[2] = m1/2 - u^2/4
""",
}

_BUILTIN_CACHE = {}


def builtin_model_names():
    return sorted(_BUILTIN_TEXTS)


def builtin_model(name: str) -> ModelSpec:
    """Return a built-in model by name (parsed once, then cached)."""
    if name not in _BUILTIN_TEXTS:
        raise ModelParseError(f"unknown built-in model {name!r}; available: {', '.join(builtin_model_names())}")
    if name not in _BUILTIN_CACHE:
        _BUILTIN_CACHE[name] = parse_model(_BUILTIN_TEXTS[name], name=name)
    return _BUILTIN_CACHE[name]


def builtin_example_section4(half: bool = False) -> ModelSpec:
    """The bundled three-state counterexample (action cost -u^2, or -u^2/2
    with ``half=True``)."""
    return builtin_model("section4-half" if half else "section4")


SECTION4_M0 = np.array([1.0, 0.0, 0.0])
# Endpoint of the unique steering control: hold u = 0 while the relay rate is
# positive, then u = 1; the first component decays by exactly e^{-1/3}.
SECTION4_MT = np.array([math.exp(-1.0 / 3.0), 1.0 - math.exp(-1.0 / 3.0), 0.0])


def section4_utilde(t: float) -> float:
    """The unique control steering SECTION4_M0 to SECTION4_MT."""
    return 1.0 if t >= 2.0 / 3.0 else 0.0
