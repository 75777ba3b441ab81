"""Verification tools: classical-solution certification, the damped
best-response fixed point for the standard game system, payoff structure
checks (crowd monotonicity, action-value concavity over a declared box),
seed-dispersion probes, and an exhaustive pure-strategy oracle for the
fictitious player's value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import expressions as ex
from ._tables import FlowTables, compiled_model
from .dynamics import (
    DistributionFlow,
    RandomizedStrategy,
    ValueFlow,
    forward_nonlinear,
)
from .errors import EnumerationBoundError, ModelParseError
from .grids import TimeGrid, check_simplex, sample_simplex
from .hamiltonian import argmax_strategy, backward_bellman, quadrature_weights
from .model import ModelSpec, eval_sigma
from .planning import Decision, OptimizerSettings, PlanningProblem, regret_J, solve_constrained, strategy_metric

__all__ = [
    "check_classical",
    "ClassicalReport",
    "solve_mfg_fixedpoint",
    "MfgFixedPoint",
    "build_consistent_decision",
    "monotonicity_check",
    "concavity_check",
    "StructureVerdict",
    "uniqueness_probe",
    "DispersionReport",
    "brute_force_value",
]

SUPPORT_EPS = 1e-10


# ---------------------------------------------------------------------------
# Classical certification


@dataclass
class ClassicalReport:
    passed: bool
    boundary_ok: bool
    argmax_ok: bool
    terminal_gap: float
    max_violation: float
    worst_node: Optional[int]
    worst_time: Optional[float]
    worst_state: Optional[int]  # 1-based
    worst_action: Optional[float]
    tol: float

    def to_dict(self):
        return {
            "classical": "pass" if self.passed else "fail",
            "boundary_ok": self.boundary_ok,
            "argmax_ok": self.argmax_ok,
            "terminal_gap": self.terminal_gap,
            "max_violation": self.max_violation,
            "worst_node": self.worst_node,
            "worst_time": self.worst_time,
            "worst_state": self.worst_state,
            "worst_action": self.worst_action,
            "tol": self.tol,
        }


def check_classical(
    model: ModelSpec, candidate: Decision, problem: PlanningProblem, tol: float = 1e-4
) -> ClassicalReport:
    """Certify a candidate: the crowd flow it generates must hit mT within
    ``tol`` and, at every node, each state's strategy support must lie inside
    the maximand's argmax set at tolerance ``tol``.

    The worst violation is the largest maximand deficit over supported
    actions (earliest node on ties).
    """
    nu = candidate.strategy
    nu.require_compatible(model)
    nu.grid.require_same(problem.grid, "candidate and problem grids")
    grid = problem.grid
    m_flow = forward_nonlinear(model, problem.m0, nu)
    phi_flow = backward_bellman(model, m_flow, candidate.phi_T)
    tables = FlowTables(model, grid, m_flow.values)

    terminal_gap = float(np.linalg.norm(m_flow.terminal - problem.mT))
    boundary_ok = terminal_gap <= tol

    worst = (-np.inf, None, None, None)  # (gap, node, state, action)
    max_violation = 0.0
    argmax_ok = True
    for n in range(grid.N):
        z = tables.q[2 * n] @ phi_flow.values[n] + tables.g[2 * n]  # (K, d)
        h = z.max(axis=0)
        deficit = h[None, :] - z  # (K, d), >= 0
        support = nu.weights[:, n, :].T > SUPPORT_EPS  # (K, d)
        viol = np.where(support, deficit, 0.0)
        node_worst = float(viol.max())
        max_violation = max(max_violation, node_worst)
        if node_worst > tol:
            argmax_ok = False
            if node_worst > worst[0] + 1e-15:
                k, i = np.unravel_index(np.argmax(viol), viol.shape)
                worst = (node_worst, n, int(i) + 1, float(model.actions.points[k]))
    passed = boundary_ok and argmax_ok
    return ClassicalReport(
        passed=passed,
        boundary_ok=boundary_ok,
        argmax_ok=argmax_ok,
        terminal_gap=terminal_gap,
        max_violation=max_violation,
        worst_node=worst[1],
        worst_time=(None if worst[1] is None else float(grid.nodes[worst[1]])),
        worst_state=worst[2],
        worst_action=worst[3],
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Damped best-response fixed point for the standard (non-planning) system


@dataclass
class MfgFixedPoint:
    m_flow: DistributionFlow
    phi_flow: ValueFlow
    strategy: RandomizedStrategy
    residuals: list
    converged: bool


def solve_mfg_fixedpoint(
    model: ModelSpec,
    m0,
    grid: TimeGrid,
    damping: float = 0.5,
    max_iters: int = 100,
    resid_tol: float = 1e-8,
) -> MfgFixedPoint:
    """Damped best-response iteration for the coupled forward/backward system
    with terminal payoff sigma(m(T)): value flow and argmax strategy against
    the current crowd, crowd re-integrated under that strategy, convex
    damping in between.  Divergence is reported, not raised."""
    if model.sigma is None:
        raise ModelParseError("the fixed-point solver needs the model to declare sigma")
    if not (0.0 < damping <= 1.0):
        raise ValueError("damping must lie in (0, 1]")
    m0 = check_simplex(m0, what="m0")
    m_vals = np.tile(m0, (grid.N + 1, 1))
    residuals = []
    converged = False
    phi_flow = None
    nu = None
    for _ in range(max_iters):
        m_flow = DistributionFlow(grid, m_vals)
        phi_flow = backward_bellman(model, m_flow, eval_sigma(model, m_vals[-1]))
        nu = argmax_strategy(model, m_flow, phi_flow)
        m_hat = forward_nonlinear(model, m0, nu)
        new_vals = (1.0 - damping) * m_vals + damping * m_hat.values
        resid = float(np.abs(new_vals - m_vals).max())
        residuals.append(resid)
        m_vals = new_vals
        if resid <= resid_tol:
            converged = True
            break
    return MfgFixedPoint(
        m_flow=DistributionFlow(grid, m_vals),
        phi_flow=phi_flow,
        strategy=nu,
        residuals=residuals,
        converged=converged,
    )


def build_consistent_decision(
    model: ModelSpec,
    m0,
    grid: TimeGrid,
    phi_T,
    damping: float = 1.0,
    max_iters: int = 200,
    resid_tol: float = 1e-13,
):
    """Construct an argmax-consistent decision for a FIXED terminal payoff by
    the same damped iteration (no sigma involved).  Returns (decision, m_flow,
    phi_flow, residuals); the reached crowd endpoint defines a planning target
    for which the decision is a classical solution."""
    m0 = check_simplex(m0, what="m0")
    phi_T = np.asarray(phi_T, dtype=float)
    m_vals = np.tile(m0, (grid.N + 1, 1))
    residuals = []
    nu = None
    for _ in range(max_iters):
        m_flow = DistributionFlow(grid, m_vals)
        phi_flow = backward_bellman(model, m_flow, phi_T)
        nu = argmax_strategy(model, m_flow, phi_flow)
        m_hat = forward_nonlinear(model, m0, nu)
        new_vals = (1.0 - damping) * m_vals + damping * m_hat.values
        resid = float(np.abs(new_vals - m_vals).max())
        residuals.append(resid)
        m_vals = new_vals
        if resid <= resid_tol:
            break
    m_flow = forward_nonlinear(model, m0, nu)
    phi_flow = backward_bellman(model, m_flow, phi_T)
    nu = argmax_strategy(model, m_flow, phi_flow)
    m_flow = forward_nonlinear(model, m0, nu)
    return Decision(nu, phi_T), m_flow, backward_bellman(model, m_flow, phi_T), residuals


# ---------------------------------------------------------------------------
# Structure checks


@dataclass
class StructureVerdict:
    verdict: str  # "strict" | "weak" | "fail"
    n_samples: int
    seed: int
    margin: float  # fitted curvature/monotonicity coefficient (see checkers)
    witness: Optional[dict] = None
    notes: str = ""

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "margin": self.margin,
            "witness": self.witness,
            "notes": self.notes,
        }


def _require_split(model: ModelSpec):
    if not model.has_split_payoff:
        raise ModelParseError(
            "this check needs the payoff declared in split form (g0[i] = action part, g1[i] = crowd part)"
        )


def monotonicity_check(model: ModelSpec, n_samples: int = 1000, seed: int = 0) -> StructureVerdict:
    """Crowd monotonicity of the split payoff's crowd part: the inner product
    (m1 - m2) . (g1(t, m1) - g1(t, m2)) over random pairs.  Strict needs every
    sample below -1e-12; weak allows equality to 1e-12; anything positive
    fails with a witness."""
    _require_split(model)
    rng = np.random.default_rng(seed)
    d = model.d
    worst = -np.inf
    witness = None
    strict = True
    for _ in range(n_samples):
        t = rng.random() * model.T
        m1 = sample_simplex(rng, 1, d)[0]
        m2 = sample_simplex(rng, 1, d)[0]
        if np.abs(m1 - m2).max() < 1e-12:
            continue
        g1a = _eval_gmean(model, t, m1)
        g1b = _eval_gmean(model, t, m2)
        inner = float((m1 - m2) @ (g1a - g1b))
        if inner > worst:
            worst = inner
            witness = {"t": t, "m1": m1.tolist(), "m2": m2.tolist(), "inner": inner}
        if inner >= -1e-12:
            strict = False
        if inner > 1e-12:
            return StructureVerdict("fail", n_samples, seed, worst, witness)
    if strict:
        return StructureVerdict("strict", n_samples, seed, worst, None)
    return StructureVerdict("weak", n_samples, seed, worst, witness)


def _eval_gmean(model: ModelSpec, t, m):
    env = {"t": t}
    for j in range(model.d):
        env[f"m{j + 1}"] = m[j]
    return np.array([ex.eval_expr(e, env) for e in model.g_mean], dtype=float)


def concavity_check(
    model: ModelSpec,
    n_samples: int = 1000,
    seed: int = 0,
    phi_box=(-1.0, 1.0),
) -> StructureVerdict:
    """Midpoint concavity of the action-part value
    H0_i(t, phi) = max_u [ Q(t, u) row_i . phi + g0_i(t, u) ]
    over pairs drawn from the declared phi-box.

    H0 is a pointwise maximum of functions affine in phi, hence convex; it
    can only be concave where it is affine, so honest verdicts over a box are
    "weak" (affine there) or "fail" (strictly convex somewhere), and the
    fitted margin (the most negative midpoint gap per squared pair distance)
    quantifies the curvature found.  "strict" would need every gap positive
    and is reported if that ever happens.
    """
    _require_split(model)
    if model.q_depends_on_m:
        raise ModelParseError("this check needs transition rates that do not reference the crowd")
    rng = np.random.default_rng(seed)
    d = model.d
    cm = compiled_model(model)
    lo, hi = float(phi_box[0]), float(phi_box[1])
    if not hi > lo:
        raise ValueError("phi_box must be an increasing pair")
    g0_fns = [ex.compile_expression(e) for e in model.g_action]

    def h0(t, phi):
        q = cm.q_table(t, [0.0] * d)  # (K, d, d); rates are crowd-free
        z = q @ phi  # (K, d)
        u = model.actions.points
        for i, fn in enumerate(g0_fns):
            z[:, i] += np.broadcast_to(np.asarray(fn(t, [0.0] * d, u), dtype=float), (u.size,))
        return z.max(axis=0)

    min_ratio = np.inf
    worst_gap = np.inf
    witness = None
    for _ in range(n_samples):
        t = rng.random() * model.T
        pa = lo + (hi - lo) * rng.random(d)
        pb = lo + (hi - lo) * rng.random(d)
        dist2 = float(((pa - pb) ** 2).sum())
        if dist2 < 1e-20:
            continue
        gap = h0(t, 0.5 * (pa + pb)) - 0.5 * (h0(t, pa) + h0(t, pb))
        g = float(gap.min())
        ratio = g / dist2
        if ratio < min_ratio:
            min_ratio = ratio
            if g < worst_gap:
                worst_gap = g
                witness = {"t": t, "phi_a": pa.tolist(), "phi_b": pb.tolist(), "min_gap": g}
    if not np.isfinite(min_ratio):
        return StructureVerdict("weak", n_samples, seed, 0.0, None, notes="no usable pairs")
    if min_ratio > 1e-12:
        return StructureVerdict("strict", n_samples, seed, min_ratio, None)
    if worst_gap >= -1e-12:
        return StructureVerdict("weak", n_samples, seed, min_ratio, None, notes="affine over the box")
    return StructureVerdict(
        "fail", n_samples, seed, min_ratio, witness,
        notes="midpoint value falls below the average: convex curvature inside the box",
    )


# ---------------------------------------------------------------------------
# Seed dispersion


@dataclass
class DispersionReport:
    n_seeds: int
    m_dispersion: float  # max pairwise sup-node max-abs distance
    phi_dispersion: float
    strategy_dispersion: float  # max pairwise strategy metric
    J_values: list
    gaps: list

    def to_dict(self):
        return {
            "n_seeds": self.n_seeds,
            "m_dispersion": self.m_dispersion,
            "phi_dispersion": self.phi_dispersion,
            "strategy_dispersion": self.strategy_dispersion,
            "J_values": self.J_values,
            "gaps": self.gaps,
        }


def uniqueness_probe(
    model: ModelSpec,
    problem: PlanningProblem,
    alpha: float,
    n_seeds: int = 5,
    opts: Optional[OptimizerSettings] = None,
) -> DispersionReport:
    """Solve the ball-constrained problem from independent seeds and report
    how far apart the returned flows and strategies are."""
    opts = opts or OptimizerSettings()
    runs = []
    for s in range(n_seeds):
        runs.append(solve_constrained(model, problem, alpha, replace(opts, seed=opts.seed + 1000 * s)))
    m_disp = phi_disp = nu_disp = 0.0
    for a in range(n_seeds):
        for b in range(a + 1, n_seeds):
            m_disp = max(m_disp, float(np.abs(runs[a].m_flow.values - runs[b].m_flow.values).max()))
            phi_disp = max(phi_disp, float(np.abs(runs[a].phi_flow.values - runs[b].phi_flow.values).max()))
            nu_disp = max(
                nu_disp,
                strategy_metric(runs[a].decision.strategy, runs[b].decision.strategy, opts.metric_terms),
            )
    return DispersionReport(
        n_seeds=n_seeds,
        m_dispersion=m_disp,
        phi_dispersion=phi_disp,
        strategy_dispersion=nu_disp,
        J_values=[r.J for r in runs],
        gaps=[r.terminal_gap for r in runs],
    )


# ---------------------------------------------------------------------------
# Exhaustive oracle


def brute_force_value(
    model: ModelSpec,
    mu0,
    m_flow: DistributionFlow,
    sigma_vec,
    coarse_steps: int = 4,
    coarse_actions: int = 2,
):
    """Enumerate every pure feedback strategy that is piecewise constant on a
    coarse partition (each state independently assigns one of
    ``coarse_actions`` subsampled grid actions per coarse interval), evaluate
    the fictitious player's payoff for each on the fine grid, and return
    (best payoff, best strategy as a fine-grid Dirac strategy).

    This is the independent check of the dynamic-programming value: the
    returned maximum can only approach mu0 . phi(0) from below.
    """
    mu0 = check_simplex(mu0, what="mu0")
    sigma_vec = np.asarray(sigma_vec, dtype=float)
    d = model.d
    if coarse_steps > 8 or coarse_actions > 5 or d > 3:
        raise EnumerationBoundError("enumeration limits: coarse_steps <= 8, coarse_actions <= 5, d <= 3")
    k = len(model.actions)
    n_act = min(coarse_actions, k)
    combos = n_act ** (d * coarse_steps)
    if combos > 10 ** 8:
        raise EnumerationBoundError(f"{combos} pure strategies exceed the 1e8 enumeration guard")
    act_idx = np.unique(np.round(np.linspace(0, k - 1, n_act)).astype(int))
    n_act = act_idx.size

    grid = m_flow.grid
    n = grid.N
    tables = FlowTables(model, grid, m_flow.values)
    cell = np.minimum(np.arange(n) * coarse_steps // n, coarse_steps - 1)  # fine step -> coarse cell
    dt = grid.dt
    cq = quadrature_weights(n + 1)

    best_val = -np.inf
    best_combo = None
    digits_pow = n_act ** np.arange(d * coarse_steps, dtype=np.int64)
    chunk = 8192
    for start in range(0, combos, chunk):
        ids = np.arange(start, min(start + chunk, combos), dtype=np.int64)
        digits = (ids[:, None] // digits_pow[None, :]) % n_act  # (B, d*S_c)
        assign = act_idx[digits.reshape(ids.size, d, coarse_steps)]  # grid action index per (b, i, cell)
        b = ids.size
        mu = np.tile(mu0, (b, 1))
        running = np.zeros(b)
        rows_i = np.arange(d)
        for step in range(n):
            sel = assign[:, :, cell[step]]  # (B, d)
            a0 = tables.q[2 * step][sel, rows_i[None, :], :]
            a1 = tables.q[2 * step + 1][sel, rows_i[None, :], :]
            a2 = tables.q[2 * step + 2][sel, rows_i[None, :], :]
            gbar = tables.g[2 * step][sel, rows_i[None, :]]  # (B, d)
            running += dt * cq[step] * np.einsum("bi,bi->b", mu, gbar)
            k1 = np.matmul(mu[:, None, :], a0)[:, 0, :]
            k2 = np.matmul((mu + 0.5 * dt * k1)[:, None, :], a1)[:, 0, :]
            k3 = np.matmul((mu + 0.5 * dt * k2)[:, None, :], a1)[:, 0, :]
            k4 = np.matmul((mu + dt * k3)[:, None, :], a2)[:, 0, :]
            mu = mu + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        sel = assign[:, :, cell[n - 1]]
        gbar = tables.g[2 * n][sel, rows_i[None, :]]
        running += dt * cq[n] * np.einsum("bi,bi->b", mu, gbar)
        vals = running + mu @ sigma_vec
        top = int(np.argmax(vals))
        if vals[top] > best_val:
            best_val = float(vals[top])
            best_combo = assign[top]

    w = np.zeros((d, n, k))
    for i in range(d):
        w[i, np.arange(n), best_combo[i, cell]] = 1.0
    best_strategy = RandomizedStrategy(grid, model.actions.points, w)
    return best_val, best_strategy
