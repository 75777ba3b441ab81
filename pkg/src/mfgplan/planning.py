"""Planning as regret minimization.

``regret_J`` evaluates the regret functional of a decision (strategy +
terminal payoff) against a planning problem; ``solve_constrained`` minimizes
it subject to the terminal-distribution equality and a ball bound on the
terminal payoff (augmented Lagrangian outer loop, projected gradient descent
with exact discrete adjoints inside, batched multi-start); and
``minimal_regret_sequence`` drives an increasing schedule of ball radii,
warm-starting each radius from the last, which is the computational stand-in
for a minimal-regret solution: the regrets of the per-radius minimizers and
the metric gaps between consecutive strategies are the convergence
diagnostics.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from . import expressions as ex
from ._tables import FlowTables
from ._transcribe import TranscriptionEngine
from .dynamics import (
    DistributionFlow,
    RandomizedStrategy,
    ValueFlow,
    _forward_linear_with_tables,
    forward_nonlinear,
)
from .errors import GradientCheckError, GridMismatchError, InfeasibleError, ModelParseError
from .grids import TimeGrid, check_simplex, project_simplex
from .hamiltonian import argmax_strategy, backward_bellman, quadrature_weights
from .model import ModelSpec

__all__ = [
    "PlanningProblem",
    "Decision",
    "RegretResult",
    "AlphaSchedule",
    "OptimizerSettings",
    "regret_J",
    "solve_constrained",
    "minimal_regret_sequence",
    "RegretSequence",
    "strategy_metric",
    "parse_problem_file",
]


# ---------------------------------------------------------------------------
# Types


@dataclass(eq=False)
class PlanningProblem:
    """Boundary data for planning: start at m0, end at mT, with the
    fictitious player's weighting distribution mu0 (strictly positive)."""

    m0: np.ndarray
    mT: np.ndarray
    mu0: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.m0 = check_simplex(self.m0, what="m0")
        self.mT = check_simplex(self.mT, what="mT")
        self.mu0 = check_simplex(self.mu0, what="mu0")
        if self.mu0.min() <= 0.0:
            raise ValueError("mu0 must have strictly positive entries")

    @property
    def d(self):
        return self.m0.size


@dataclass(eq=False)
class Decision:
    """The control pair: a randomized strategy and a terminal payoff vector."""

    strategy: RandomizedStrategy
    phi_T: np.ndarray

    def __post_init__(self):
        self.phi_T = np.asarray(self.phi_T, dtype=float)
        if self.phi_T.shape != (self.strategy.d,) or not np.all(np.isfinite(self.phi_T)):
            raise ValueError("phi_T must be a finite vector matching the strategy's state count")


@dataclass(eq=False)
class RegretResult:
    decision: Decision
    m_flow: DistributionFlow
    mu_flow: DistributionFlow
    phi_flow: ValueFlow
    J: float
    terminal_gap: float
    alpha: float
    diagnostics: Optional[dict] = None

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "J": self.J,
            "terminal_gap": self.terminal_gap,
            "phi_T": self.decision.phi_T.tolist(),
        }


@dataclass(frozen=True)
class AlphaSchedule:
    """Strictly increasing positive ball radii for the terminal payoff."""

    radii: tuple

    def __post_init__(self):
        r = tuple(float(a) for a in self.radii)
        object.__setattr__(self, "radii", r)
        if not r:
            raise ValueError("the radius schedule must not be empty")
        if r[0] <= 0 or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("radii must be positive and strictly increasing")


DEFAULT_SCHEDULE = AlphaSchedule((1.0, 2.0, 4.0, 8.0, 16.0, 32.0))


@dataclass
class OptimizerSettings:
    n_starts: int = 8
    max_outer_iters: int = 8
    max_inner_iters: int = 150
    feasibility_tol: float = 1e-4
    opt_tol: float = 1e-6
    cluster_tol: float = 1e-3
    seed: int = 0
    step0: float = 1.0
    step_shrink: float = 0.5
    step_grow: float = 1.3
    armijo: float = 1e-4
    max_backtracks: int = 30
    inner_tol: float = 1e-7
    rho0: float = 10.0
    rho_growth: float = 8.0
    rho_max: float = 1e9
    gradient_check: bool = True
    gradient_check_tol: float = 1e-4
    metric_terms: int = 32
    workers: int = 1

    @classmethod
    def from_file(cls, path) -> "OptimizerSettings":
        """Read `key = value` lines (comments start with #)."""
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ModelParseError("expected 'key = value'", lineno, 1)
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in types:
                    raise ModelParseError(f"unknown optimizer setting {key!r}", lineno, 1)
                kind = types[key]
                try:
                    if kind == "int":
                        values[key] = int(value)
                    elif kind == "float":
                        values[key] = float(value)
                    elif kind == "bool":
                        values[key] = value.lower() in ("1", "true", "yes", "on")
                    else:
                        values[key] = value
                except ValueError:
                    raise ModelParseError(f"bad value for {key}: {value!r}", lineno, 1) from None
        return cls(**values)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_problem_file(text: str, d: int, grid: TimeGrid) -> PlanningProblem:
    """Problem spec text: lines `m0 = ...`, `mT = ...`, `mu0 = ...` with
    comma-separated scalar expressions (e.g. `1 - exp(-1/3)`)."""
    vectors = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelParseError("expected 'key = value'", lineno, 1)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ("m0", "mT", "mu0"):
            raise ModelParseError(f"unknown problem entry {key!r}", lineno, 1)
        parts = [p for p in value.split(",") if p.strip()]
        try:
            vec = np.array([ex.eval_expr(ex.parse_expression(p.strip(), lineno), {}) for p in parts])
        except ModelParseError:
            raise
        if vec.size != d:
            raise ModelParseError(f"{key} must have {d} components, got {vec.size}", lineno, 1)
        vectors[key] = vec
    missing = {"m0", "mT", "mu0"} - set(vectors)
    if missing:
        raise ModelParseError(f"problem spec is missing: {', '.join(sorted(missing))}")
    return PlanningProblem(vectors["m0"], vectors["mT"], vectors["mu0"], grid)


# ---------------------------------------------------------------------------
# Regret functional


def regret_J(model: ModelSpec, problem: PlanningProblem, decision: Decision) -> RegretResult:
    """Integrate the three flows of a decision and evaluate its regret:
    J = mu0 . phi(0) - mu(T) . phi_T - integral of mu . g, which is zero
    exactly when the decision is a consistent optimal response."""
    nu = decision.strategy
    nu.require_compatible(model)
    nu.grid.require_same(problem.grid, "decision and problem grids")
    m_flow = forward_nonlinear(model, problem.m0, nu)
    phi_flow = backward_bellman(model, m_flow, decision.phi_T)
    tables = FlowTables(model, problem.grid, m_flow.values)
    mu_flow = _forward_linear_with_tables(problem.mu0, tables, nu)
    grid = problem.grid
    gbar = np.empty((grid.N + 1, model.d))
    for n in range(grid.N + 1):
        w = nu.weights[:, min(n, grid.N - 1), :]
        gbar[n] = tables.relaxed_g(2 * n, w)
    c = quadrature_weights(grid.N + 1)
    quad = grid.dt * float(np.dot(c, np.einsum("nd,nd->n", mu_flow.values, gbar)))
    J = float(problem.mu0 @ phi_flow.initial) - float(mu_flow.terminal @ decision.phi_T) - quad
    gap = float(np.linalg.norm(m_flow.terminal - problem.mT))
    return RegretResult(
        decision=decision,
        m_flow=m_flow,
        mu_flow=mu_flow,
        phi_flow=phi_flow,
        J=J,
        terminal_gap=gap,
        alpha=float(np.linalg.norm(decision.phi_T)),
    )


# ---------------------------------------------------------------------------
# Strategy metric (weighted Fourier moments of the time-action measures)


def _metric_family(n_nodes: int, horizon: float, actions: tuple, terms: int):
    """Per-term tables P[l][n, k]: the trapezoid-in-time weight of test
    function l at (node n, action k), so the integral of psi_l against a
    piecewise-constant strategy is sum_{n,k} w[n,k] (P[l][n,k]+P[l][n+1,k])."""
    ts = np.linspace(0.0, horizon, n_nodes)
    u = np.asarray(actions)
    span = u.max() - u.min()
    un = (u - u.min()) / span if span > 0 else np.zeros_like(u)
    tables = []
    s = 0
    while len(tables) < terms:
        for a in range(s + 1):
            b = s - a
            tn = 2.0 * math.pi * a * ts / horizon
            up = 2.0 * math.pi * b * un
            for tf, uf in ((np.cos, np.cos), (np.cos, np.sin), (np.sin, np.cos), (np.sin, np.sin)):
                if (tf is np.sin and a == 0) or (uf is np.sin and b == 0):
                    continue
                tables.append(np.outer(tf(tn), uf(up)))
                if len(tables) == terms:
                    break
            if len(tables) == terms:
                break
        s += 1
    return tables


@lru_cache(maxsize=32)
def _metric_tables(n_steps: int, horizon: float, actions: tuple, terms: int):
    # step-summed trapezoid weights: integral over step n of psi(t, u_k) dt
    # approximated by dt/2 (psi(t_n, u_k) + psi(t_{n+1}, u_k))
    family = _metric_family(n_steps + 1, horizon, actions, terms)
    dt = horizon / n_steps
    return [0.5 * dt * (tab[:-1] + tab[1:]) for tab in family]


def strategy_metric(nu1: RandomizedStrategy, nu2: RandomizedStrategy, terms: int = 32) -> float:
    """Distance between randomized strategies: geometrically weighted absolute
    differences of test-function integrals against each state's time-action
    measure.  The fixed test family is the diagonal enumeration of
    cos/sin products in normalized time and action."""
    if terms < 1:
        raise ValueError("terms must be >= 1")
    nu1.grid.require_same(nu2.grid, "strategy grids")
    if nu1.actions.size != nu2.actions.size or np.abs(nu1.actions - nu2.actions).max() > 0:
        raise GridMismatchError("strategies use different action grids")
    if nu1.d != nu2.d:
        raise GridMismatchError("strategies have different state counts")
    tables = _metric_tables(nu1.grid.N, nu1.grid.T, tuple(nu1.actions.tolist()), terms)
    diff = nu1.weights - nu2.weights  # (d, N, K)
    total = 0.0
    for l, tab in enumerate(tables, start=1):
        moments = np.einsum("ink,nk->i", diff, tab)
        total += (2.0 ** -l) * float(np.abs(moments).sum())
    return total


# ---------------------------------------------------------------------------
# Constrained solve


def _project_ball(phi: np.ndarray, alpha: float) -> np.ndarray:
    nrm = np.linalg.norm(phi, axis=-1, keepdims=True)
    scale = np.where(nrm > alpha, alpha / np.maximum(nrm, 1e-300), 1.0)
    return phi * scale


def _random_start(rng: np.random.Generator, d: int, n: int, k: int, alpha: float, spiky: bool):
    conc = 0.25 if spiky else 1.0
    w = rng.dirichlet(np.full(k, conc), size=(d, n)) if k > 1 else np.ones((d, n, 1))
    direction = rng.normal(size=d)
    direction /= max(np.linalg.norm(direction), 1e-12)
    radius = alpha * rng.random() ** (1.0 / d)
    return w, radius * direction


def _gradient_check(eng: TranscriptionEngine, opts: OptimizerSettings, alpha: float, rng):
    """Compare one adjoint directional derivative of J against central finite
    differences at a random interior decision; reroll near argmax ties."""
    d, n, k = eng.d, eng.N, eng.K
    for _ in range(24):
        w, phi = _random_start(rng, d, n, k, alpha, spiky=False)
        W = w[None]
        phiT = phi[None]
        res = eng.evaluate(W, phiT, need_grad=True, need_tie=True)
        if res.tie_margin[0] < 1e-7:
            continue
        dW = rng.normal(size=W.shape)
        dphi = rng.normal(size=phiT.shape)
        h = 1e-6
        jp = eng.evaluate(W + h * dW, phiT + h * dphi).J[0]
        jm = eng.evaluate(W - h * dW, phiT - h * dphi).J[0]
        fd = (jp - jm) / (2.0 * h)
        adj = float((res.grad_W * dW).sum() + (res.grad_phiT * dphi).sum())
        scale = max(abs(fd), abs(adj), 1e-8)
        if abs(adj - fd) / scale > opts.gradient_check_tol:
            raise GradientCheckError(
                f"adjoint {adj:.10e} vs finite difference {fd:.10e} "
                f"(relative error {abs(adj - fd) / scale:.2e})"
            )
        return
    raise GradientCheckError("could not find a tie-free point for the gradient check")


def _solve_batch(eng: TranscriptionEngine, alpha: float, opts: OptimizerSettings, starts, trace=None):
    """Augmented-Lagrangian outer loop with spectral (Barzilai-Borwein)
    projected-gradient inner iterations and a nonmonotone line search,
    batched over starts.  Returns per-start (W, phiT, J, gap)."""
    S = len(starts)
    d = eng.d
    W = np.stack([project_simplex(w) for w, _ in starts])
    phiT = np.stack([_project_ball(np.asarray(p, dtype=float), alpha) for _, p in starts])
    lam = np.zeros((S, d))
    rho = np.full(S, opts.rho0)
    # per-block spectral steps: each weight moves the endpoint by O(dt), the
    # terminal payoff by O(1), so the two blocks need their own scales
    eta_w = np.full(S, opts.step0 * eng.N)
    eta_p = np.full(S, opts.step0)
    prev_gap = np.full(S, np.inf)
    prev_J = np.full(S, np.inf)
    memory = 5  # nonmonotone window

    for outer in range(opts.max_outer_iters):
        active = np.arange(S)
        hist = np.full((S, memory), np.inf)
        prev_active = None
        prev_W = None
        prev_phi = None
        prev_gw = None
        prev_gp = None
        it = 0
        while active.size and it < opts.max_inner_iters:
            it += 1
            a = active
            res = eng.evaluate(W[a], phiT[a], lam[a], rho[a], need_grad=True)
            base_L = res.L
            gw, gp = res.grad_W, res.grad_phiT
            hist[a, (it - 1) % memory] = base_L
            ref_L = np.nanmax(np.where(np.isinf(hist[a]), np.nan, hist[a]), axis=1)
            ref_L = np.where(np.isnan(ref_L), base_L, ref_L)
            # spectral steps from the previous gradient pair, per block
            if prev_W is not None:
                common, ia, ib = np.intersect1d(a, prev_active, return_indices=True)
                if common.size:
                    dW = W[common] - prev_W[ib]
                    dgw = gw[ia] - prev_gw[ib]
                    num_w = (dW * dgw).sum(axis=(1, 2, 3))
                    den_w = (dgw * dgw).sum(axis=(1, 2, 3))
                    ok_w = (num_w > 0) & (den_w > 0)
                    eta_w[common] = np.clip(
                        np.where(ok_w, num_w / np.maximum(den_w, 1e-300), eta_w[common]), 1e-8, 1e6
                    )
                    dphi = phiT[common] - prev_phi[ib]
                    dgp = gp[ia] - prev_gp[ib]
                    num_p = (dphi * dgp).sum(axis=1)
                    den_p = (dgp * dgp).sum(axis=1)
                    ok_p = (num_p > 0) & (den_p > 0)
                    eta_p[common] = np.clip(
                        np.where(ok_p, num_p / np.maximum(den_p, 1e-300), eta_p[common]), 1e-8, 1e4
                    )
            prev_active = a.copy()
            prev_W = W[a].copy()
            prev_phi = phiT[a].copy()
            prev_gw = gw.copy()
            prev_gp = gp.copy()

            cand_W = W[a].copy()
            cand_phi = phiT[a].copy()
            accepted = np.zeros(a.size, dtype=bool)
            moved = np.zeros(a.size, dtype=bool)
            gm2 = np.zeros(a.size)
            shrink = np.ones(a.size)
            for _bt in range(opts.max_backtracks):
                rem = np.flatnonzero(~accepted)
                if rem.size == 0:
                    break
                ew = eta_w[a[rem]] * shrink[rem]
                ep = eta_p[a[rem]] * shrink[rem]
                trial_W = project_simplex(W[a[rem]] - ew[:, None, None, None] * gw[rem])
                trial_phi = _project_ball(phiT[a[rem]] - ep[:, None] * gp[rem], alpha)
                trial_L = eng.evaluate(trial_W, trial_phi, lam[a[rem]], rho[a[rem]]).L
                dw2 = ((trial_W - W[a[rem]]) ** 2).sum(axis=(1, 2, 3))
                dp2 = ((trial_phi - phiT[a[rem]]) ** 2).sum(axis=1)
                decrease = dw2 / ew + dp2 / ep
                ok = trial_L <= ref_L[rem] - opts.armijo * decrease
                stalled = (shrink[rem] < 1e-12) | (dw2 + dp2 < 1e-30)
                take = ok & ~stalled
                gidx = rem[take]
                cand_W[gidx] = trial_W[take]
                cand_phi[gidx] = trial_phi[take]
                moved[gidx] = True
                gm2[gidx] = decrease[take]
                accepted[gidx] = True
                accepted[rem[stalled]] = True  # cannot move this start any further
                shrink[rem[~(take | stalled)]] *= opts.step_shrink
            W[a] = cand_W
            phiT[a] = cand_phi
            eta_w[a] *= np.where(moved, shrink, 1.0)
            eta_p[a] *= np.where(moved, shrink, 1.0)
            # starts whose scaled projected-gradient step is tiny leave the loop
            active = a[moved & (gm2 > opts.inner_tol**2)]
        # ---- multiplier / penalty update ------------------------------------
        res = eng.evaluate(W, phiT, lam, rho)
        c_vec = res.gap_vec
        gap = res.gap
        improved = gap <= np.maximum(opts.feasibility_tol, 0.25 * prev_gap)
        lam = lam + np.where(improved[:, None], rho[:, None] * c_vec, 0.0)
        rho = np.where(improved, rho, np.minimum(rho * opts.rho_growth, opts.rho_max))
        eta_w = np.maximum(eta_w, 1e-3)
        eta_p = np.maximum(eta_p, 1e-3)
        done = (gap <= opts.feasibility_tol) & (np.abs(res.J - prev_J) <= max(opts.opt_tol, 1e-9))
        if trace is not None:
            trace.append(
                {"outer": outer, "inner_iters": it, "gap": gap.tolist(), "J": res.J.tolist()}
            )
        prev_gap = gap
        prev_J = res.J
        if outer >= 1 and bool(done.all()):
            break
    final = eng.evaluate(W, phiT)
    return W, phiT, final.J, final.gap


def solve_constrained(
    model: ModelSpec,
    problem: PlanningProblem,
    alpha: float,
    opts: Optional[OptimizerSettings] = None,
    warm_starts=(),
) -> RegretResult:
    """Approximately minimize the regret over decisions subject to
    m(T) = mT (within ``feasibility_tol``) and |phi_T| <= alpha.

    Deterministic given ``opts.seed``; raises :class:`InfeasibleError` when no
    start reaches the terminal tolerance.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    opts = opts or OptimizerSettings()
    grid = problem.grid
    eng = TranscriptionEngine(model, grid, problem.m0, problem.mT, problem.mu0)
    d, n, k = eng.d, eng.N, eng.K

    if opts.gradient_check:
        _gradient_check(eng, opts, alpha, np.random.default_rng([opts.seed, 987654321]))

    starts = []
    for decision in warm_starts:
        decision.strategy.require_compatible(model)
        decision.strategy.grid.require_same(grid, "warm start and problem grids")
        starts.append((decision.strategy.weights.copy(), _project_ball(decision.phi_T, alpha)))
    # two canonical deterministic starts (uniform mixture, lowest-action
    # Dirac), then seeded random mixtures
    if len(starts) < opts.n_starts:
        starts.append((np.full((d, n, k), 1.0 / k), np.zeros(d)))
    if len(starts) < opts.n_starts:
        w0 = np.zeros((d, n, k))
        w0[:, :, 0] = 1.0
        starts.append((w0, np.zeros(d)))
    for s_i in range(len(starts), opts.n_starts):
        rng = np.random.default_rng([opts.seed, s_i])
        starts.append(_random_start(rng, d, n, k, alpha, spiky=bool(s_i % 2)))

    trace = []
    W, phiT, J, gap = _solve_batch(eng, alpha, opts, starts, trace=trace)

    # Bellman polish: replace each start's strategy by the exact argmax
    # response to its own value flow and keep it when it is feasible and
    # strictly better (on solvable problems this snaps J to the grid floor).
    pol_W = np.empty_like(W)
    for s_i in range(len(starts)):
        nu_s = RandomizedStrategy(grid, model.actions.points, project_simplex(W[s_i]))
        m_flow = forward_nonlinear(model, problem.m0, nu_s)
        phi_flow = backward_bellman(model, m_flow, phiT[s_i])
        pol_W[s_i] = argmax_strategy(model, m_flow, phi_flow).weights
    pol = eng.evaluate(pol_W, phiT)
    use_pol = (pol.gap <= opts.feasibility_tol) & (pol.J < J)
    W = np.where(use_pol[:, None, None, None], pol_W, W)
    J = np.where(use_pol, pol.J, J)
    gap = np.where(use_pol, pol.gap, gap)

    feasible = gap <= opts.feasibility_tol
    if not feasible.any():
        raise InfeasibleError(
            f"no start reached terminal gap <= {opts.feasibility_tol:.3e}; best gap {gap.min():.3e}",
            best_gap=float(gap.min()),
        )
    order = sorted(range(len(starts)), key=lambda s: (not feasible[s], J[s], s))
    win = order[0]
    decision = Decision(
        strategy=RandomizedStrategy(grid, model.actions.points, project_simplex(W[win])),
        phi_T=phiT[win],
    )
    result = regret_J(model, problem, decision)
    result.alpha = float(alpha)
    result.diagnostics = {
        "selected_start": win,
        "per_start_J": [float(x) for x in J],
        "per_start_gap": [float(x) for x in gap],
        "polished": [bool(x) for x in use_pol],
        "n_starts": len(starts),
        "trace": trace,
    }
    return result


# ---------------------------------------------------------------------------
# Radius schedule driver


@dataclass
class RegretSequence:
    alphas: list
    results: list  # RegretResult or None per alpha (None = infeasible at that radius)
    metric_gaps: list  # distance between consecutive returned strategies
    infeasible: list  # alphas where no start reached the terminal tolerance
    cluster_tol: float

    @property
    def converged(self) -> bool:
        return bool(self.metric_gaps) and self.metric_gaps[-1] <= self.cluster_tol

    def summary(self) -> dict:
        return {
            "alphas": self.alphas,
            "J": [r.J if r is not None else None for r in self.results],
            "terminal_gap": [r.terminal_gap if r is not None else None for r in self.results],
            "metric_gaps": self.metric_gaps,
            "infeasible_alphas": self.infeasible,
            "converged": self.converged,
            "cluster_tol": self.cluster_tol,
        }


def minimal_regret_sequence(
    model: ModelSpec,
    problem: PlanningProblem,
    schedule: AlphaSchedule = DEFAULT_SCHEDULE,
    opts: Optional[OptimizerSettings] = None,
) -> RegretSequence:
    """Solve the ball-constrained problem along the radius schedule,
    warm-starting each radius from the previous minimizer.  The final strategy
    is the numerical stand-in for the limiting solution; a Cauchy tail of the
    metric gaps (below ``cluster_tol``) is the convergence diagnostic."""
    opts = opts or OptimizerSettings()
    results = []
    gaps = []
    infeasible = []
    prev = None
    for a_i, alpha in enumerate(schedule.radii):
        warm = [prev.decision] if prev is not None else []
        run_opts = replace(opts, seed=opts.seed + a_i, gradient_check=opts.gradient_check and a_i == 0)
        try:
            res = solve_constrained(model, problem, alpha, run_opts, warm_starts=warm)
        except InfeasibleError:
            infeasible.append(alpha)
            results.append(None)
            continue
        if prev is not None:
            gaps.append(strategy_metric(prev.decision.strategy, res.decision.strategy, opts.metric_terms))
        results.append(res)
        prev = res
    return RegretSequence(
        alphas=list(schedule.radii),
        results=results,
        metric_gaps=gaps,
        infeasible=infeasible,
        cluster_tol=opts.cluster_tol,
    )
