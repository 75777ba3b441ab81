"""Uniform time grids and probability-simplex helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError

__all__ = ["TimeGrid", "project_simplex", "check_simplex", "sample_simplex"]


@dataclass(frozen=True)
class TimeGrid:
    """N uniform steps on [0, T]; nodes t_n = n T / N for n = 0..N."""

    N: int
    T: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("a time grid needs at least one step")
        if not self.T > 0:
            raise ValueError("the horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def half_nodes(self) -> np.ndarray:
        """Times at slots s = 0..2N, slot s sitting at s T / (2N); even slots
        are nodes, odd slots are step midpoints."""
        return np.linspace(0.0, self.T, 2 * self.N + 1)

    def require_same(self, other: "TimeGrid", what: str = "time grids"):
        if self != other:
            raise GridMismatchError(f"{what} differ: {self} vs {other}")


def check_simplex(v, tol: float = 1e-9, what: str = "distribution"):
    """Validate one probability vector (1-d) within ``tol``."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be a 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} has non-finite entries")
    if arr.min(initial=0.0) < -tol:
        raise ValueError(f"{what} has negative entry {arr.min():.3e}")
    s = arr.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"{what} sums to {s!r}, not 1")
    return arr


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of the last axis onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    u = np.sort(v, axis=-1)[..., ::-1]
    css = np.cumsum(u, axis=-1)
    j = np.arange(1, n + 1, dtype=float)
    cond = u + (1.0 - css) / j > 0.0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    lam = (1.0 - np.take_along_axis(css, rho[..., None], axis=-1)) / (rho[..., None] + 1.0)
    return np.maximum(v + lam, 0.0)


def sample_simplex(rng: np.random.Generator, size, d: int) -> np.ndarray:
    """Uniform (Dirichlet(1)) samples on the d-simplex."""
    if np.isscalar(size):
        size = (size,)
    e = rng.exponential(size=tuple(size) + (d,))
    return e / e.sum(axis=-1, keepdims=True)
