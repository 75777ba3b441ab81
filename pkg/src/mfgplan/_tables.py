"""Internal: fast evaluation of model expressions on grids.

Everything downstream of an integrated crowd flow (Bellman integration,
fictitious-player dynamics, payoff quadrature, chain simulation, the planning
transcription) consumes the rate matrix and running payoff tabulated over
(time slot, grid action).  Slots live on the half grid: slot s = 0..2N sits at
time s T / (2N); even slots are nodes, odd slots are step midpoints (where
Runge-Kutta stages evaluate, with the crowd interpolated linearly).

Tables are built from compiled expressions (one vectorized numpy evaluation
per nonzero entry over all slots and actions) and carry no domain guards; the
assembled rate tables are checked numerically for the Kolmogorov property
instead, which also catches non-finite values.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import expressions as ex
from .errors import KolmogorovViolationError
from .grids import TimeGrid
from .model import ModelSpec

ROWSUM_TOL = 1e-12
OFFDIAG_TOL = -1e-12

_ZERO = ex.Num(0.0)


class CompiledModel:
    """Per-model compiled expression entries plus m-dependence metadata."""

    def __init__(self, model: ModelSpec):
        self.model = model
        d = model.d
        self.q_entries = [
            (i, j, model.Q[i][j], ex.compile_expression(model.Q[i][j]))
            for i in range(d)
            for j in range(d)
            if model.Q[i][j] != _ZERO
        ]
        self.g_entries = [
            (i, model.g[i], ex.compile_expression(model.g[i])) for i in range(d) if model.g[i] != _ZERO
        ]
        self.q_depends_on_m = model.q_depends_on_m
        self.g_depends_on_m = model.g_depends_on_m
        self.m_names = [f"m{j + 1}" for j in range(d)]

    # -- raw evaluation over the action grid --------------------------------

    def _call(self, fn, t, m_cols, shape):
        u = self.model.actions.points
        vals = fn(np.asarray(t), m_cols, u)
        return np.broadcast_to(np.asarray(vals, dtype=float), shape)

    def q_table(self, t, m_cols, shape_prefix=()):
        """Rates over (…, K, d, d); ``t`` and the entries of ``m_cols`` must
        broadcast against the action axis, e.g. t of shape (S, 1) for slots."""
        d = self.model.d
        k = len(self.model.actions)
        out = np.zeros(shape_prefix + (k, d, d), dtype=float)
        for i, j, _, fn in self.q_entries:
            out[..., i, j] = self._call(fn, t, m_cols, shape_prefix + (k,))
        return out

    def g_table(self, t, m_cols, shape_prefix=()):
        d = self.model.d
        k = len(self.model.actions)
        out = np.zeros(shape_prefix + (k, d), dtype=float)
        for i, _, fn in self.g_entries:
            out[..., i] = self._call(fn, t, m_cols, shape_prefix + (k,))
        return out

    # -- directional derivatives in m (strict interpreter, flattened) -------

    def _flat_env(self, t_vec, m_mat):
        """Environment of flat (S*K,) arrays pairing every time/crowd sample
        with every grid action."""
        t_vec = np.atleast_1d(np.asarray(t_vec, dtype=float))
        m_mat = np.atleast_2d(np.asarray(m_mat, dtype=float))
        k = len(self.model.actions)
        env = {"t": np.repeat(t_vec, k), "u": np.tile(self.model.actions.points, t_vec.size)}
        for j, name in enumerate(self.m_names):
            env[name] = np.repeat(m_mat[:, j], k)
        return env, (t_vec.size, k)

    def q_table_dm(self, t_vec, m_mat):
        """d/dm_w of the rate table over samples: (d_w, S, K, d, d); zero when
        rates do not reference the crowd."""
        d = self.model.d
        env, shape = self._flat_env(t_vec, m_mat)
        out = np.zeros((d,) + shape + (d, d), dtype=float)
        if not self.q_depends_on_m:
            return out
        for w, wname in enumerate(self.m_names):
            for i, j, node, _ in self.q_entries:
                if wname not in ex.variables(node):
                    continue
                _, dv = ex.eval_expr_deriv(node, env, wname)
                out[w, :, :, i, j] = np.reshape(dv, shape)
        return out

    def g_table_dm(self, t_vec, m_mat):
        """d/dm_w of the payoff table over samples: (d_w, S, K, d)."""
        d = self.model.d
        env, shape = self._flat_env(t_vec, m_mat)
        out = np.zeros((d,) + shape + (d,), dtype=float)
        if not self.g_depends_on_m:
            return out
        for w, wname in enumerate(self.m_names):
            for i, node, _ in self.g_entries:
                if wname not in ex.variables(node):
                    continue
                _, dv = ex.eval_expr_deriv(node, env, wname)
                out[w, :, :, i] = np.reshape(dv, shape)
        return out


_COMPILED = {}


def compiled_model(model: ModelSpec) -> CompiledModel:
    key = id(model)
    hit = _COMPILED.get(key)
    if hit is None or hit.model is not model:
        hit = CompiledModel(model)
        _COMPILED[key] = hit
    return hit


def check_rate_tables(q: np.ndarray, times=None):
    """Verify the Kolmogorov property of a (…, K, d, d) rate table."""
    if not np.all(np.isfinite(q)):
        raise KolmogorovViolationError("rate table has non-finite entries (expression domain error)")
    rowsum = q.sum(axis=-1)
    dev = np.abs(rowsum).max()
    if dev > ROWSUM_TOL:
        idx = np.unravel_index(np.argmax(np.abs(rowsum)), rowsum.shape)
        where = f" (worst at index {idx}" + (f", t={times[idx[0]]:.6g})" if times is not None else ")")
        raise KolmogorovViolationError(f"rate rows sum to {dev:.3e}, above the 1e-12 tolerance{where}")
    d = q.shape[-1]
    off = q[..., ~np.eye(d, dtype=bool)]
    if off.size and off.min() < OFFDIAG_TOL:
        raise KolmogorovViolationError(f"negative off-diagonal rate {off.min():.3e}")


def slot_values(node_values: np.ndarray) -> np.ndarray:
    """Expand node values (N+1, d) to slot values (2N+1, d) with linear
    interpolation at the midpoints."""
    n = node_values.shape[0] - 1
    out = np.empty((2 * n + 1,) + node_values.shape[1:], dtype=float)
    out[0::2] = node_values
    out[1::2] = 0.5 * (node_values[:-1] + node_values[1:])
    return out


@lru_cache(maxsize=64)
def _static_tables(model: ModelSpec, grid: TimeGrid):
    cm = compiled_model(model)
    t = grid.half_nodes[:, None]
    dummy = [np.zeros((1, 1))] * model.d
    q = cm.q_table(t, dummy, shape_prefix=(2 * grid.N + 1,)) if not cm.q_depends_on_m else None
    g = cm.g_table(t, dummy, shape_prefix=(2 * grid.N + 1,)) if not cm.g_depends_on_m else None
    if q is not None:
        check_rate_tables(q, times=grid.half_nodes)
    return q, g


class FlowTables:
    """Rate/payoff tables along a fixed crowd flow, per slot and action.

    ``q`` has shape (2N+1, K, d, d) and ``g`` (2N+1, K, d).  When the model
    does not reference the crowd, the arrays are shared across flows.
    """

    def __init__(self, model: ModelSpec, grid: TimeGrid, m_node_values: np.ndarray):
        self.model = model
        self.grid = grid
        self.cm = compiled_model(model)
        self.m_slots = slot_values(np.asarray(m_node_values, dtype=float))
        nslots = 2 * grid.N + 1
        static_q, static_g = _static_tables(model, grid)
        t = grid.half_nodes[:, None]
        m_cols = [self.m_slots[:, j][:, None] for j in range(model.d)]
        if static_q is not None:
            self.q = static_q
        else:
            self.q = self.cm.q_table(t, m_cols, shape_prefix=(nslots,))
            check_rate_tables(self.q, times=grid.half_nodes)
        self.g = static_g if static_g is not None else self.cm.g_table(t, m_cols, shape_prefix=(nslots,))

    def relaxed_Q(self, slot: int, weights: np.ndarray) -> np.ndarray:
        """Average the rate rows under per-state action weights (d, K)."""
        return np.einsum("ik,kij->ij", weights, self.q[slot])

    def relaxed_g(self, slot: int, weights: np.ndarray) -> np.ndarray:
        return np.einsum("ik,ki->i", weights, self.g[slot])

    def g_dm(self):
        """d g / d m_w per slot: (d_w, 2N+1, K, d); zeros when g is m-free."""
        return self.cm.g_table_dm(self.grid.half_nodes, self.m_slots)

    def q_dm(self):
        return self.cm.q_table_dm(self.grid.half_nodes, self.m_slots)
