"""Continuous-time Markov chain simulation by uniformization.

This is the independent Monte Carlo oracle for the ODE flows and payoffs:
paths of the time-inhomogeneous chain with the relaxed generator
Q(t, m(t), nu(t)) are sampled by thinning against a dominating rate recomputed
per time step (1.05 x the largest exit rate over states and supported
actions, rates frozen at the step midpoint).  Actions are resampled at every
virtual jump epoch, matching the averaged-generator semantics of randomized
strategies.

Paths are simulated in fixed-size blocks of 32768; block b draws from an
independent stream seeded by (seed, b), and block results are reduced in
block order, so results are bit-identical for a given seed regardless of the
worker count.  Within a block the running payoff accrues the strategy-averaged
payoff rate of the occupied state over exact sojourn times.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._tables import FlowTables
from .dynamics import DistributionFlow, RandomizedStrategy
from .errors import IntegrationOverflowError
from .grids import check_simplex
from .model import ModelSpec

__all__ = ["PathSample", "simulate_paths", "SimulationResult", "sample_path_records", "write_path_dump"]

BLOCK_SIZE = 32768
RATE_GUARD = 1e6  # largest tolerated dominating-rate x step-length product


@dataclass
class PathSample:
    """One trajectory: strictly increasing jump times, the visited states
    (cadlag, states[0] at t=0), and the realized running payoff."""

    jump_times: np.ndarray
    states: np.ndarray  # len(jump_times) + 1 entries
    running_payoff: float


@dataclass
class SimulationResult:
    empirical: DistributionFlow
    payoff_mean: float
    payoff_se: float
    n_paths: int
    seed: int


def _step_rates(tables: FlowTables, nu: RandomizedStrategy, n: int):
    """Midpoint-frozen rate table (K, d, d), averaged payoff rates (d,), and
    the dominating rate for step n."""
    q_mid = tables.q[2 * n + 1]
    g_mid = tables.g[2 * n + 1]
    w = nu.weights[:, n, :]
    gbar = np.einsum("ik,ki->i", w, g_mid)
    d = w.shape[0]
    exit_rates = -q_mid[:, np.arange(d), np.arange(d)]  # (K, d)
    supported = (w.T > 0.0)  # (K, d)
    lam = float(np.max(exit_rates, where=supported, initial=0.0))
    return q_mid, gbar, max(lam, 0.0) * 1.05


def _simulate_block(model, tables, nu, mu0, size, seed, block_index, sigma_vec):
    rng = np.random.default_rng([seed, block_index])
    grid = tables.grid
    d = model.d
    dt = grid.dt
    cum_mu0 = np.cumsum(mu0)
    states = np.minimum((rng.random(size)[:, None] > cum_mu0[None, :]).sum(axis=1), d - 1)
    counts = np.zeros((grid.N + 1, d), dtype=np.int64)
    counts[0] = np.bincount(states, minlength=d)
    pay = np.zeros(size)

    for n in range(grid.N):
        q_mid, gbar, lam = _step_rates(tables, nu, n)
        if lam * dt > RATE_GUARD:
            raise IntegrationOverflowError(
                f"dominating rate {lam:.3e} on step {n} is too large to thin against"
            )
        if lam <= 0.0:
            pay += dt * gbar[states]
            counts[n + 1] = counts[n]
            continue
        cum_w = np.cumsum(nu.weights[:, n, :], axis=1)  # (d, K)
        rem = np.full(size, dt)
        active = np.arange(size)
        while active.size:
            draws = rng.exponential(1.0 / lam, size=active.size)
            sojourn = np.minimum(draws, rem[active])
            pay[active] += sojourn * gbar[states[active]]
            rem[active] -= sojourn
            jumped = active[draws < rem[active] + sojourn]
            if jumped.size:
                s = states[jumped]
                r1 = rng.random(jumped.size)
                k = np.minimum((r1[:, None] > cum_w[s]).sum(axis=1), cum_w.shape[1] - 1)
                p = q_mid[k, s, :] / lam
                p[np.arange(jumped.size), s] = 1.0 + q_mid[k, s, s] / lam
                cum_p = np.cumsum(p, axis=1)
                r2 = rng.random(jumped.size)
                states[jumped] = np.minimum((r2[:, None] > cum_p).sum(axis=1), d - 1)
            active = active[rem[active] > 0.0]
        counts[n + 1] = np.bincount(states, minlength=d)

    if sigma_vec is not None:
        pay += sigma_vec[states]
    return counts, float(pay.sum()), float(np.dot(pay, pay))


def simulate_paths(
    model: ModelSpec,
    m_flow: DistributionFlow,
    nu: RandomizedStrategy,
    mu0,
    n_paths: int,
    seed: int = 0,
    sigma_vec=None,
    workers: int = 1,
) -> SimulationResult:
    """Simulate ``n_paths`` trajectories; return the empirical occupancy at
    every grid node plus the sample mean/standard error of the realized payoff
    (running part, plus ``sigma_vec[X(T)]`` when given)."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    nu.require_compatible(model)
    nu.grid.require_same(m_flow.grid, "strategy and crowd-flow grids")
    mu0 = check_simplex(mu0, what="mu0")
    if sigma_vec is not None:
        sigma_vec = np.asarray(sigma_vec, dtype=float)
        if sigma_vec.shape != (model.d,):
            raise ValueError(f"sigma_vec must be a length-{model.d} vector")
    tables = FlowTables(model, nu.grid, m_flow.values)

    sizes = []
    offset = 0
    while offset < n_paths:
        sizes.append(min(BLOCK_SIZE, n_paths - offset))
        offset += sizes[-1]

    def run(b):
        return _simulate_block(model, tables, nu, mu0, sizes[b], seed, b, sigma_vec)

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(sizes))))
    else:
        results = [run(b) for b in range(len(sizes))]

    counts = np.zeros((m_flow.grid.N + 1, model.d), dtype=np.int64)
    s1 = 0.0
    s2 = 0.0
    for c, bs1, bs2 in results:  # fixed block order keeps the reduction deterministic
        counts += c
        s1 += bs1
        s2 += bs2
    mean = s1 / n_paths
    if n_paths > 1:
        var = max(0.0, (s2 - n_paths * mean * mean) / (n_paths - 1))
        se = float(np.sqrt(var / n_paths))
    else:
        se = float("inf")
    empirical = DistributionFlow(m_flow.grid, counts.astype(float) / n_paths)
    return SimulationResult(empirical, float(mean), se, n_paths, seed)


def sample_path_records(
    model: ModelSpec,
    m_flow: DistributionFlow,
    nu: RandomizedStrategy,
    mu0,
    n_paths: int,
    seed: int = 0,
) -> list:
    """Full per-path records (for dumps and inspection; one stream per path,
    seeded by (seed, path index))."""
    nu.require_compatible(model)
    nu.grid.require_same(m_flow.grid, "strategy and crowd-flow grids")
    mu0 = check_simplex(mu0, what="mu0")
    tables = FlowTables(model, nu.grid, m_flow.values)
    grid = nu.grid
    d = model.d
    dt = grid.dt
    cum_mu0 = np.cumsum(mu0)
    step_cache = [_step_rates(tables, nu, n) for n in range(grid.N)]
    out = []
    for p in range(n_paths):
        rng = np.random.default_rng([seed, p])
        state = int(np.searchsorted(cum_mu0, rng.random(), side="right"))
        state = min(state, d - 1)
        times = []
        states = [state]
        payoff = 0.0
        for n in range(grid.N):
            q_mid, gbar, lam = step_cache[n]
            t0 = grid.nodes[n]
            rem = dt
            if lam <= 0.0:
                payoff += dt * gbar[state]
                continue
            cum_w = np.cumsum(nu.weights[:, n, :], axis=1)
            while rem > 0.0:
                e = rng.exponential(1.0 / lam)
                sojourn = min(e, rem)
                payoff += sojourn * gbar[state]
                rem -= sojourn
                if e < rem + sojourn:
                    k = int(np.searchsorted(cum_w[state], rng.random(), side="right"))
                    k = min(k, cum_w.shape[1] - 1)
                    p_row = q_mid[k, state, :] / lam
                    p_row[state] = 1.0 + q_mid[k, state, state] / lam
                    new_state = int(np.searchsorted(np.cumsum(p_row), rng.random(), side="right"))
                    new_state = min(new_state, d - 1)
                    if new_state != state:
                        times.append(t0 + (dt - rem))
                        states.append(new_state)
                        state = new_state
        out.append(PathSample(np.asarray(times), np.asarray(states, dtype=int), payoff))
    return out


def write_path_dump(paths, path):
    """CSV dump: one row ``path_id, jump_time, new_state`` per jump."""
    with open(path, "w", newline="") as fh:
        fh.write("path_id,jump_time,new_state\n")
        for pid, rec in enumerate(paths):
            for t, s in zip(rec.jump_times, rec.states[1:]):
                fh.write(f"{pid},{t:.17g},{int(s) + 1}\n")
