"""Coordinate-wise Hamiltonian over the action grid, backward Bellman
integration, and fictitious-player payoff evaluation.

The Hamiltonian is the exact per-state maximum over grid actions of
(rate row) . phi + running payoff; no interpolation between actions.  Ties in
the argmax are resolved toward the smallest action wherever a single action
is needed (grids are stored ascending, so "first maximal index" is that
choice).
"""

from __future__ import annotations

import math

import numpy as np

from . import expressions as ex
from ._tables import FlowTables
from .dynamics import (
    DistributionFlow,
    RandomizedStrategy,
    ValueFlow,
    _forward_linear_with_tables,
)
from .errors import IntegrationOverflowError
from .grids import check_simplex
from .model import ModelSpec

__all__ = [
    "hamiltonian",
    "argmax_set",
    "backward_bellman",
    "payoff",
    "argmax_strategy",
]

OVERFLOW_LIMIT = 1e12


def _maximand_table(model: ModelSpec, t: float, m, phi) -> np.ndarray:
    """z[k, i] = sum_j Q_ij(t, m, u_k) phi_j + g_i(t, m, u_k), evaluated
    strictly over the whole action grid."""
    m = np.asarray(m, dtype=float)
    phi = np.asarray(phi, dtype=float)
    u = model.actions.points
    env = model.env(t, m, u)
    k, d = u.size, model.d
    z = np.zeros((k, d))
    zero = ex.Num(0.0)
    for i in range(d):
        for j in range(d):
            if model.Q[i][j] != zero:
                z[:, i] += np.broadcast_to(ex.eval_expr(model.Q[i][j], env), (k,)) * phi[j]
        if model.g[i] != zero:
            z[:, i] += np.broadcast_to(ex.eval_expr(model.g[i], env), (k,))
    return z


def hamiltonian(model: ModelSpec, t: float, m, phi) -> np.ndarray:
    """Per-state maximum of the maximand over the action grid."""
    return _maximand_table(model, t, m, phi).max(axis=0)


def argmax_set(model: ModelSpec, t: float, m, phi, tol: float = 0.0):
    """All grid actions within ``tol`` of each state's maximum, sorted by
    action value; always nonempty per state."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    z = _maximand_table(model, t, m, phi)
    h = z.max(axis=0)
    return [model.actions.points[z[:, i] >= h[i] - tol] for i in range(model.d)]


def _bellman_rhs(q_slot, g_slot, phi):
    z = q_slot @ phi + g_slot  # (K, d)
    return -z.max(axis=0)


def backward_bellman(model: ModelSpec, m_flow: DistributionFlow, phi_T) -> ValueFlow:
    """Integrate d phi/dt = -H(t, m(t), phi) backward from phi(T) = phi_T
    with RK4, the crowd interpolated linearly at step midpoints."""
    phi = np.asarray(phi_T, dtype=float).copy()
    if phi.shape != (model.d,):
        raise ValueError(f"phi_T must be a length-{model.d} vector")
    grid = m_flow.grid
    tables = FlowTables(model, grid, m_flow.values)
    dt = grid.dt
    out = np.empty((grid.N + 1, model.d))
    out[grid.N] = phi
    for n in range(grid.N - 1, -1, -1):
        l1 = _bellman_rhs(tables.q[2 * n + 2], tables.g[2 * n + 2], phi)
        l2 = _bellman_rhs(tables.q[2 * n + 1], tables.g[2 * n + 1], phi - 0.5 * dt * l1)
        l3 = _bellman_rhs(tables.q[2 * n + 1], tables.g[2 * n + 1], phi - 0.5 * dt * l2)
        l4 = _bellman_rhs(tables.q[2 * n], tables.g[2 * n], phi - dt * l3)
        phi = phi - (dt / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        if np.abs(phi).max() > OVERFLOW_LIMIT:
            raise IntegrationOverflowError(
                f"|phi| exceeded 1e12 at node {n} (t={grid.nodes[n]:.6g}) during backward integration"
            )
        out[n] = phi
    return ValueFlow(grid, out)


def quadrature_weights(n_nodes: int) -> np.ndarray:
    """Trapezoid weights over the nodes (to be scaled by dt)."""
    c = np.ones(n_nodes)
    c[0] = c[-1] = 0.5
    return c


def payoff(model: ModelSpec, mu0, nu: RandomizedStrategy, m_flow: DistributionFlow, sigma_vec) -> float:
    """Fictitious-player reward: mu(T) . sigma + integral of mu(t) . g(t, m, nu)
    (trapezoid on the node values), with mu integrated along the crowd flow."""
    nu.require_compatible(model)
    nu.grid.require_same(m_flow.grid, "strategy and crowd-flow grids")
    mu0 = check_simplex(mu0, what="mu0")
    sigma_vec = np.asarray(sigma_vec, dtype=float)
    if sigma_vec.shape != (model.d,):
        raise ValueError(f"sigma_vec must be a length-{model.d} vector")
    grid = nu.grid
    tables = FlowTables(model, grid, m_flow.values)
    mu_flow = _forward_linear_with_tables(mu0, tables, nu)
    gbar = np.empty((grid.N + 1, model.d))
    for n in range(grid.N + 1):
        w = nu.weights[:, min(n, grid.N - 1), :]
        gbar[n] = tables.relaxed_g(2 * n, w)
    c = quadrature_weights(grid.N + 1)
    running = grid.dt * float(np.dot(c, np.einsum("nd,nd->n", mu_flow.values, gbar)))
    return running + float(mu_flow.values[-1] @ sigma_vec)


def argmax_strategy(model: ModelSpec, m_flow: DistributionFlow, phi_flow: ValueFlow) -> RandomizedStrategy:
    """Dirac strategy at the per-node maximizer (smallest action on ties);
    step n uses the maximizer at node t_n along the given flows."""
    m_flow.grid.require_same(phi_flow.grid, "crowd and value grids")
    grid = m_flow.grid
    tables = FlowTables(model, grid, m_flow.values)
    k = len(model.actions)
    w = np.zeros((model.d, grid.N, k))
    for n in range(grid.N):
        z = tables.q[2 * n] @ phi_flow.values[n] + tables.g[2 * n]  # (K, d)
        idx = z.argmax(axis=0)
        w[np.arange(model.d), n, idx] = 1.0
    return RandomizedStrategy(grid, model.actions.points, w)
