"""Crowd and fictitious-player dynamics on a uniform time grid.

``forward_nonlinear`` integrates dm/dt = m Q(t, m, nu(t)) with classical RK4,
holding the randomized strategy constant on each step; ``forward_linear``
integrates the same equation for a fictitious player's occupancy along a
frozen crowd flow (interpolated linearly inside steps).  Both preserve total
mass to roundoff and apply the shared negativity policy: components below
-1e-9 are clipped to zero and the flow renormalized (counted as a clip
event), components below -1e-6 abort.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import expressions as ex
from ._tables import FlowTables, _static_tables, check_rate_tables, compiled_model
from .errors import GridMismatchError, IntegrationOverflowError, ModelParseError
from .grids import TimeGrid, check_simplex
from .model import ModelSpec

__all__ = [
    "TimeGrid",
    "RandomizedStrategy",
    "DistributionFlow",
    "ValueFlow",
    "relax_Q",
    "relax_g",
    "forward_nonlinear",
    "forward_linear",
    "dirac_strategy",
    "uniform_strategy",
    "section4_utilde_strategy",
    "named_control_strategy",
    "named_control_names",
    "write_flow_csv",
    "read_distribution_csv",
    "read_value_csv",
    "write_strategy_csv",
    "read_strategy_csv",
]

HARD_NEGATIVE = -1e-6
CLIP_NEGATIVE = -1e-9
WEIGHT_TOL = 1e-12


# ---------------------------------------------------------------------------
# Strategies


@dataclass(eq=False)
class RandomizedStrategy:
    """Piecewise-constant randomized feedback strategy.

    ``weights[i, n, :]`` is the probability vector over the action grid used
    by state i+1 throughout [t_n, t_{n+1}).
    """

    grid: TimeGrid
    actions: np.ndarray  # the action grid points, shape (K,)
    weights: np.ndarray  # (d, N, K)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        d, n, k = self.weights.shape
        if n != self.grid.N or k != self.actions.size:
            raise GridMismatchError(
                f"weights shaped {self.weights.shape} do not match N={self.grid.N}, K={self.actions.size}"
            )
        if self.weights.min(initial=0.0) < -WEIGHT_TOL:
            raise ValueError(f"strategy weight {self.weights.min():.3e} is negative")
        sums = self.weights.sum(axis=2)
        if np.abs(sums - 1.0).max() > WEIGHT_TOL:
            raise ValueError("strategy weights must sum to 1 per state and step (within 1e-12)")

    @property
    def d(self):
        return self.weights.shape[0]

    def require_compatible(self, model: ModelSpec):
        if self.d != model.d:
            raise GridMismatchError(f"strategy has {self.d} states, model has {model.d}")
        if self.actions.size != len(model.actions) or np.abs(self.actions - model.actions.points).max() > 0:
            raise GridMismatchError("strategy action grid differs from the model's action grid")


def dirac_strategy(model: ModelSpec, grid: TimeGrid, action) -> RandomizedStrategy:
    """Strategy concentrated on one grid action.

    ``action`` may be a scalar value, a (d,) vector (per state), or a (d, N)
    array (per state and step); values must lie exactly on the action grid.
    """
    pts = model.actions.points
    vals = np.broadcast_to(np.asarray(action, dtype=float), (model.d, grid.N))
    idx = np.searchsorted(pts, vals)
    idx = np.clip(idx, 0, pts.size - 1)
    near = np.where(np.abs(pts[np.maximum(idx - 1, 0)] - vals) < np.abs(pts[idx] - vals), idx - 1, idx)
    if np.abs(pts[near] - vals).max() > 1e-12:
        bad = vals.flat[int(np.argmax(np.abs(pts[near] - vals)))]
        raise ValueError(f"action value {bad!r} is not a grid point")
    w = np.zeros((model.d, grid.N, pts.size))
    np.put_along_axis(w, near[:, :, None], 1.0, axis=2)
    return RandomizedStrategy(grid, pts, w)


def uniform_strategy(model: ModelSpec, grid: TimeGrid) -> RandomizedStrategy:
    k = len(model.actions)
    w = np.full((model.d, grid.N, k), 1.0 / k)
    return RandomizedStrategy(grid, model.actions.points, w)


def section4_utilde_strategy(model: ModelSpec, grid: TimeGrid) -> RandomizedStrategy:
    """Grid projection of the bundled counterexample's steering control
    (0 before t = 2/3, 1 after): each step gets the exact time-average mix of
    the two endpoint actions, so integrated flows match the continuous control
    to integrator precision."""
    pts = model.actions.points
    hits0 = np.nonzero(np.abs(pts - 0.0) < 1e-12)[0]
    hits1 = np.nonzero(np.abs(pts - 1.0) < 1e-12)[0]
    if hits0.size == 0 or hits1.size == 0:
        raise ValueError("this control needs actions 0 and 1 on the grid")
    i0, i1 = int(hits0[0]), int(hits1[0])
    nodes = grid.nodes
    switch = 2.0 / 3.0
    frac = np.clip((nodes[1:] - np.maximum(nodes[:-1], switch)) / grid.dt, 0.0, 1.0)
    w = np.zeros((model.d, grid.N, pts.size))
    w[:, :, i1] = frac
    w[:, :, i0] = 1.0 - frac
    return RandomizedStrategy(grid, pts, w)


_NAMED_CONTROLS = {"section4-utilde": section4_utilde_strategy}


def named_control_names():
    return sorted(_NAMED_CONTROLS)


def named_control_strategy(name: str, model: ModelSpec, grid: TimeGrid) -> RandomizedStrategy:
    if name not in _NAMED_CONTROLS:
        raise ModelParseError(f"unknown named control {name!r}; available: {', '.join(named_control_names())}")
    return _NAMED_CONTROLS[name](model, grid)


# ---------------------------------------------------------------------------
# Flows


@dataclass(eq=False)
class DistributionFlow:
    """Simplex-valued node values of an integrated occupancy flow."""

    grid: TimeGrid
    values: np.ndarray  # (N+1, d)
    clip_events: int = 0
    min_component: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.N + 1:
            raise GridMismatchError("flow length does not match its grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("distribution flow has non-finite entries")
        if self.values.min() < -1e-9:
            raise ValueError(f"distribution flow entry {self.values.min():.3e} below -1e-9")
        dev = np.abs(self.values.sum(axis=1) - 1.0).max()
        if dev > 1e-9:
            raise ValueError(f"distribution flow mass deviates from 1 by {dev:.3e}")

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    @property
    def clipped(self) -> bool:
        return self.clip_events > 0


@dataclass(eq=False)
class ValueFlow:
    """Real d-vector node values (value functions along the grid)."""

    grid: TimeGrid
    values: np.ndarray  # (N+1, d)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.N + 1:
            raise GridMismatchError("flow length does not match its grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value flow has non-finite entries")

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]


# ---------------------------------------------------------------------------
# Relaxed rates and payoffs (strict, support-masked evaluation)


def _support_relax(model: ModelSpec, t, m, nu, entries, out_shape):
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (model.d, len(model.actions)):
        raise GridMismatchError(f"nu must be shaped ({model.d}, {len(model.actions)})")
    if nu.min() < -WEIGHT_TOL or np.abs(nu.sum(axis=1) - 1.0).max() > WEIGHT_TOL:
        raise ValueError("each nu_i must be a probability vector over the action grid")
    m = np.asarray(m, dtype=float)
    out = np.zeros(out_shape)
    for i in range(model.d):
        support = np.nonzero(nu[i] > 0.0)[0]
        if support.size == 0:
            continue
        u_sup = model.actions.points[support]
        env = model.env(t, m, u_sup)
        for key, node in entries(i):
            vals = ex.eval_expr(node, env)
            out[key] = float(np.dot(nu[i, support], np.broadcast_to(vals, (support.size,))))
    return out


def relax_Q(model: ModelSpec, t: float, m, nu) -> np.ndarray:
    """Rate matrix averaged row-wise under per-state action distributions:
    row i of the result is the nu_i-average of row i of Q(t, m, .)."""
    zero = ex.Num(0.0)

    def entries(i):
        return [((i, j), model.Q[i][j]) for j in range(model.d) if model.Q[i][j] != zero]

    out = _support_relax(model, t, m, nu, entries, (model.d, model.d))
    check_rate_tables(out[None, :, :])
    return out


def relax_g(model: ModelSpec, t: float, m, nu) -> np.ndarray:
    """Running payoff averaged under per-state action distributions."""
    zero = ex.Num(0.0)

    def entries(i):
        return [(i, model.g[i])] if model.g[i] != zero else []

    return _support_relax(model, t, m, nu, entries, (model.d,))


# ---------------------------------------------------------------------------
# Integration


def _apply_negativity_policy(x, where, clip_state):
    lo = float(x.min())
    clip_state[1] = min(clip_state[1], lo)
    if lo < HARD_NEGATIVE:
        raise IntegrationOverflowError(
            f"occupancy component {lo:.3e} fell below -1e-6 at {where}; the model dynamics look wrong"
        )
    if lo < CLIP_NEGATIVE:
        np.clip(x, 0.0, None, out=x)
        x /= x.sum()
        clip_state[0] += 1
    return x


def forward_nonlinear(model: ModelSpec, m0, nu: RandomizedStrategy) -> DistributionFlow:
    """Integrate the crowd flow dm/dt = m Q(t, m, nu(t)), m(0) = m0."""
    nu.require_compatible(model)
    grid = nu.grid
    m = np.array(check_simplex(m0, what="m0"), dtype=float)
    cm = compiled_model(model)
    static_q, _ = _static_tables(model, grid)
    dt = grid.dt
    half = grid.half_nodes
    out = np.empty((grid.N + 1, model.d))
    out[0] = m
    clip_state = [0, float(m.min())]

    def rhs_static(slot, x, w):
        a = np.einsum("ik,kij->ij", w, static_q[slot])
        return x @ a

    def rhs_dynamic(tval, x, w):
        q = cm.q_table(tval, list(x), shape_prefix=())
        check_rate_tables(q[None], times=np.array([tval]))
        a = np.einsum("ik,kij->ij", w, q)
        return x @ a

    for n in range(grid.N):
        w = nu.weights[:, n, :]
        if static_q is not None:
            k1 = rhs_static(2 * n, m, w)
            k2 = rhs_static(2 * n + 1, m + 0.5 * dt * k1, w)
            k3 = rhs_static(2 * n + 1, m + 0.5 * dt * k2, w)
            k4 = rhs_static(2 * n + 2, m + dt * k3, w)
        else:
            k1 = rhs_dynamic(half[2 * n], m, w)
            k2 = rhs_dynamic(half[2 * n + 1], m + 0.5 * dt * k1, w)
            k3 = rhs_dynamic(half[2 * n + 1], m + 0.5 * dt * k2, w)
            k4 = rhs_dynamic(half[2 * n + 2], m + dt * k3, w)
        m = m + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        m = _apply_negativity_policy(m, f"node {n + 1} (t={half[2 * n + 2]:.6g})", clip_state)
        out[n + 1] = m
    return DistributionFlow(grid, out, clip_events=clip_state[0], min_component=clip_state[1])


def _forward_linear_with_tables(mu0, tables: FlowTables, nu: RandomizedStrategy):
    grid = tables.grid
    mu = np.array(mu0, dtype=float)
    dt = grid.dt
    out = np.empty((grid.N + 1, mu.size))
    out[0] = mu
    clip_state = [0, float(mu.min())]
    for n in range(grid.N):
        w = nu.weights[:, n, :]
        a0 = tables.relaxed_Q(2 * n, w)
        a1 = tables.relaxed_Q(2 * n + 1, w)
        a2 = tables.relaxed_Q(2 * n + 2, w)
        k1 = mu @ a0
        k2 = (mu + 0.5 * dt * k1) @ a1
        k3 = (mu + 0.5 * dt * k2) @ a1
        k4 = (mu + dt * k3) @ a2
        mu = mu + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        mu = _apply_negativity_policy(mu, f"node {n + 1}", clip_state)
        out[n + 1] = mu
    return DistributionFlow(grid, out, clip_events=clip_state[0], min_component=clip_state[1])


def forward_linear(
    model: ModelSpec, mu0, m_flow: DistributionFlow, nu: RandomizedStrategy
) -> DistributionFlow:
    """Integrate a fictitious player's occupancy along a frozen crowd flow:
    d mu/dt = mu Q(t, m(t), nu(t)), mu(0) = mu0."""
    nu.require_compatible(model)
    nu.grid.require_same(m_flow.grid, "strategy and crowd-flow grids")
    mu0 = check_simplex(mu0, what="mu0")
    tables = FlowTables(model, nu.grid, m_flow.values)
    return _forward_linear_with_tables(mu0, tables, nu)


# ---------------------------------------------------------------------------
# CSV interchange (17 significant digits; header `t, x1..xd`)


def write_flow_csv(flow, path):
    values = flow.values
    d = values.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write("t," + ",".join(f"x{i + 1}" for i in range(d)) + "\n")
        for t, row in zip(flow.grid.nodes, values):
            fh.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _read_flow_values(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0].strip() != "t":
            raise ModelParseError(f"{path}: expected a flow CSV with header 't, x1, ...'")
        rows = [[float(c) for c in row] for row in reader if row]
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != len(header):
        raise ModelParseError(f"{path}: malformed flow CSV")
    ts = arr[:, 0]
    n = arr.shape[0] - 1
    grid = TimeGrid(n, float(ts[-1]))
    if np.abs(ts - grid.nodes).max() > 1e-9 * max(1.0, grid.T):
        raise ModelParseError(f"{path}: time column is not a uniform grid from 0 to T")
    return grid, arr[:, 1:]


def read_distribution_csv(path) -> DistributionFlow:
    grid, values = _read_flow_values(path)
    return DistributionFlow(grid, values)


def read_value_csv(path) -> ValueFlow:
    grid, values = _read_flow_values(path)
    return ValueFlow(grid, values)


def write_strategy_csv(nu: RandomizedStrategy, path):
    """Rows `state, step, action_index, weight` (1-based state, 0-based step
    and action index); zero weights are omitted."""
    with open(path, "w", newline="") as fh:
        fh.write("state,step,action_index,weight\n")
        d, n, k = nu.weights.shape
        for i in range(d):
            for step in range(n):
                for a in np.nonzero(nu.weights[i, step] > 0.0)[0]:
                    fh.write(f"{i + 1},{step},{a},{nu.weights[i, step, a]:.17g}\n")


def read_strategy_csv(path, model: ModelSpec, grid: Optional[TimeGrid] = None) -> RandomizedStrategy:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["state", "step", "action_index", "weight"]:
            raise ModelParseError(f"{path}: expected header 'state,step,action_index,weight'")
        rows = []
        for row in reader:
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
            except (ValueError, IndexError):
                raise ModelParseError(f"{path}: malformed strategy row {row!r}") from None
    if not rows:
        raise ModelParseError(f"{path}: empty strategy file")
    n_steps = max(r[1] for r in rows) + 1
    if grid is None:
        grid = TimeGrid(n_steps, model.T)
    k = len(model.actions)
    w = np.zeros((model.d, grid.N, k))
    for state, step, a, weight in rows:
        if not (1 <= state <= model.d) or not (0 <= step < grid.N) or not (0 <= a < k):
            raise ModelParseError(f"{path}: strategy row ({state},{step},{a}) out of range")
        w[state - 1, step, a] += weight
    return RandomizedStrategy(grid, model.actions.points, w)
