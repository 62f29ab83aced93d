"""Bulk spectral density from the solved Stieltjes transform, and histogram comparison.

The density is recovered by evaluating m(lambda + i*eps) down a decreasing
eps schedule and Richardson-extrapolating the last two levels (the Poisson
smoothing bias is linear in eps in the bulk).  When p > n the bulk covariance
has an exact atom of mass 1 - alpha/beta at zero; its Stieltjes contribution
-atom/z is removed analytically before inversion, since numerical inversion
next to an atom is hopeless.

One caveat: with p > d and a nearly linear activation (order->=2 residual
close to zero, e.g. erf), the p - d lifted zero modes of the weight Gram form
a very narrow peak at the residual scale; resolving its mass to 1e-3 needs a
locally refined grid and an eps below the peak width.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .detequiv import DetEquivProblem, FixedPointState, solve_fixed_point, solve_grid, stieltjes_from_state

DEFAULT_EPS_SCHEDULE = (1e-2, 5e-3, 2.5e-3)


def stieltjes(
    problem: DetEquivProblem,
    z: complex,
    warm_start: FixedPointState | None = None,
    tol: float = 1e-10,
) -> complex:
    """m(z) of the bulk feature covariance from a converged fixed point."""
    state = solve_fixed_point(problem, z, warm_start=warm_start, tol=tol)
    return stieltjes_from_state(problem, state)


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    eps_schedule: tuple
    converged: np.ndarray
    atom_mass: float
    im_levels: np.ndarray | None = None  # Im m / pi at every eps level (atom removed)

    @property
    def mass(self) -> float:
        """Trapezoidal bulk mass over the grid (excludes the origin atom)."""
        return float(np.trapezoid(self.density, self.grid))

    @property
    def total_mass(self) -> float:
        return self.mass + self.atom_mass

    def cdf(self, x: np.ndarray, left_limit: bool = False) -> np.ndarray:
        """Theory CDF at points x: origin atom plus integrated bulk density.

        left_limit=True evaluates F(x-) (drops the atom exactly at 0), needed
        for Kolmogorov-Smirnov comparisons against samples with tied zeros.
        """
        cum = np.concatenate([[0.0], np.cumsum(np.diff(self.grid) * 0.5 * (self.density[1:] + self.density[:-1]))])
        vals = np.interp(x, self.grid, cum, left=0.0, right=cum[-1])
        atom = self.atom_mass * ((x > 0.0) if left_limit else (x >= 0.0))
        return atom + vals


def density_grid(
    problem: DetEquivProblem,
    lam_min: float,
    lam_max: float,
    points: int,
    eps_schedule: Sequence[float] = DEFAULT_EPS_SCHEDULE,
    tol: float = 1e-10,
    cache_get: Callable | None = None,
    cache_put: Callable | None = None,
) -> DensityCurve:
    """Bulk density on a uniform grid by eps-laddered Stieltjes inversion.

    Each eps level sweeps the grid left to right with warm starts; each grid
    point is additionally warm-started from its own state at the previous
    (larger) eps.  Per-point failures mark the point and leave the sweep alive.
    """
    if lam_max <= lam_min:
        raise ValueError("need lam_max > lam_min")
    eps_schedule = tuple(sorted((float(e) for e in eps_schedule), reverse=True))
    if len(eps_schedule) < 2:
        raise ValueError("eps schedule needs at least two decreasing levels")
    if eps_schedule[-1] < 1e-4:
        raise ValueError("eps below 1e-4 is outside the supported inversion range")
    grid = np.linspace(lam_min, lam_max, points)
    atom = problem.atom_mass()

    im_parts = np.full((len(eps_schedule), points), np.nan)
    prev_states: list = [None] * points
    for ei, eps in enumerate(eps_schedule):
        carry: FixedPointState | None = None
        for gi, lam in enumerate(grid):
            z = complex(lam, eps)
            warm = prev_states[gi] or carry
            cached = cache_get(z) if cache_get else None
            try:
                state = cached or solve_fixed_point(problem, z, warm_start=warm, tol=tol)
            except Exception:
                carry = None
                continue
            if cached is None and cache_put:
                cache_put(state)
            carry = state
            prev_states[gi] = state
            m = stieltjes_from_state(problem, state)
            if atom > 0.0:
                m = m + atom / z  # remove the analytic origin atom
            im_parts[ei, gi] = m.imag

    converged = ~np.isnan(im_parts[-1]) & ~np.isnan(im_parts[-2])
    # linear two-point Richardson in eps on the last two levels
    e1, e2 = eps_schedule[-2], eps_schedule[-1]
    rho1, rho2 = im_parts[-2] / np.pi, im_parts[-1] / np.pi
    density = rho2 + (rho2 - rho1) * e2 / (e1 - e2)
    density = np.where(converged, density, 0.0)
    if np.nanmin(density) < -1e-2:
        raise RuntimeError(f"strongly negative extrapolated density {np.nanmin(density):.3e}")
    density = np.clip(density, 0.0, None)
    return DensityCurve(
        grid=grid,
        density=density,
        eps_schedule=eps_schedule,
        converged=converged,
        atom_mass=atom,
        im_levels=im_parts / np.pi,
    )


def support_edges(curve: DensityCurve, threshold: float = 1e-4) -> list:
    """Maximal grid intervals where the density exceeds `threshold`."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    above = curve.density > threshold
    edges = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = curve.grid[i]
        elif not flag and start is not None:
            edges.append((start, curve.grid[i - 1]))
            start = None
    if start is not None:
        edges.append((start, curve.grid[-1]))
    return edges


def support_width(curve: DensityCurve, threshold: float = 1e-4) -> float:
    edges = support_edges(curve, threshold)
    if not edges:
        return 0.0
    return edges[-1][1] - edges[0][0]


def ks_distance(eigenvalues: np.ndarray, curve: DensityCurve) -> float:
    """Kolmogorov-Smirnov distance between an eigenvalue sample and the theory law.

    The theory CDF carries the origin atom analytically; the empirical CDF
    carries the exact zero modes, so the two jumps cancel to O(k/p).
    """
    n = len(eigenvalues)
    vals, counts = np.unique(np.asarray(eigenvalues), return_counts=True)
    cum = np.cumsum(counts)
    F_emp = cum / n                      # F_emp(v)
    F_emp_left = (cum - counts) / n      # F_emp(v-)
    d_right = np.abs(F_emp - curve.cdf(vals))
    d_left = np.abs(F_emp_left - curve.cdf(vals, left_limit=True))
    tail = abs(1.0 - curve.total_mass)   # gap past the last grid point
    return float(max(np.max(d_right), np.max(d_left), tail))


def auto_grid(eigenvalues: np.ndarray, points: int = 300, pad: float = 1.15) -> tuple:
    """Grid bounds covering an empirical bulk (positive part), padded past the edge."""
    pos = eigenvalues[eigenvalues > 1e-10]
    if len(pos) == 0:
        return 1e-3, 1.0, points
    return max(1e-3, 0.5 * pos.min()), pad * pos.max(), points
