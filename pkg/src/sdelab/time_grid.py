"""Discretization grids on [0, T] and the grid-gap integral.

Two grid families are supported: the uniform grid ``t_i = i T / N`` and the
power-refined grid ``t_i = (i/N)^beta T`` with ``beta > 1``, which
concentrates nodes near the origin.  ``step_gap_integral`` evaluates

    integral over [0, T] of  min((s - tau_s)^2 / s + 1/N^2,  s - tau_s) ds,

where ``tau_s`` is the last grid node at or before ``s``.  This quantity
controls the grid-dependent part of the Euler weak-error bound: it behaves
like ``ln N / N^2`` on uniform grids and like ``1/N^2`` on power grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Ordered nodes 0 = t_0 < ... < t_N = T of one grid family."""

    horizon: float
    node_count: int
    nodes: np.ndarray
    kind: str
    beta: Optional[float] = None

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size != self.node_count + 1:
            raise ValueError("nodes must be a vector of length N+1")
        if nodes[0] != 0.0 or nodes[-1] != self.horizon:
            raise ValueError("grid must start at 0 and end at the horizon")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @property
    def max_step(self) -> float:
        return float(np.diff(self.nodes).max())


def build_uniform(horizon: float, node_count: int) -> TimeGrid:
    """Uniform grid t_i = i*T/N; nodes computed per index, not cumulatively."""
    if node_count < 1:
        raise ValueError(f"node_count must be >= 1, got {node_count}")
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    nodes = np.arange(node_count + 1, dtype=float) * horizon / node_count
    nodes[-1] = horizon
    return TimeGrid(horizon, node_count, nodes, "uniform")


def build_power(horizon: float, node_count: int, beta: float) -> TimeGrid:
    """Power grid t_i = (i/N)^beta * T with beta > 1.

    The largest step is the final one and is at most ``beta * T / N``; this is
    verified at construction.
    """
    if node_count < 1:
        raise ValueError(f"node_count must be >= 1, got {node_count}")
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    if not beta > 1:
        raise ValueError(f"beta must be > 1, got {beta}")
    idx = np.arange(node_count + 1, dtype=float)
    nodes = (idx / node_count) ** beta * horizon
    nodes[-1] = horizon
    grid = TimeGrid(horizon, node_count, nodes, "power", beta)
    bound = beta * horizon / node_count
    if grid.max_step > bound * (1 + 1e-12):
        raise AssertionError(
            f"power grid max step {grid.max_step} exceeds beta*T/N = {bound}"
        )
    return grid


def last_node_before(
    grid: TimeGrid, t: float, open_right: bool = False
) -> tuple[int, float]:
    """Index k and node tau with t_k <= t < t_{k+1} (left-closed at nodes).

    At ``t == T`` the default returns ``(N, T)``; with ``open_right=True`` it
    returns ``(N-1, t_{N-1})``, the convention used inside step integrals
    where the last interval is treated as half-open.
    """
    if not 0 <= t <= grid.horizon:
        raise ValueError(f"time {t} outside [0, {grid.horizon}]")
    k = int(np.searchsorted(grid.nodes, t, side="right")) - 1
    if open_right and k == grid.node_count:
        k -= 1
    return k, float(grid.nodes[k])


def _gap_integrand(t_k: float, inv_n2: float):
    """Integrand u -> min(u^2/(t_k+u) + 1/N^2, u) on one step, u = s - t_k."""

    def f(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(u > 0, u * u / (t_k + u) + inv_n2, 0.0)
        return np.minimum(left, u)

    return f


def _adaptive_simpson(f, a: float, b: float, tol: float, depth: int = 50) -> float:
    """Adaptive Simpson with absolute-error budget tol on [a, b]."""
    fa, fm, fb = f(a), f((a + b) / 2), f(b)
    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    return _simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)


def _simpson_step(f, a, b, fa, fm, fb, whole, tol, depth) -> float:
    m = (a + b) / 2
    lm, rm = (a + m) / 2, (m + b) / 2
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6 * (fa + 4 * flm + fm)
    right = (b - m) / 6 * (fm + 4 * frm + fb)
    err = left + right - whole
    if depth <= 0 or abs(err) <= 15 * tol:
        return left + right + err / 15
    return _simpson_step(
        f, a, m, fa, flm, fm, left, tol / 2, depth - 1
    ) + _simpson_step(f, m, b, fm, frm, fb, right, tol / 2, depth - 1)


def step_gap_integral(grid: TimeGrid) -> float:
    """Integral of min((s-tau_s)^2/s + 1/N^2, s-tau_s) over [0, T].

    Computed per grid interval by adaptive Simpson with a total absolute
    tolerance of ``1e-12 * T``.  Each interval is split at the analytic
    crossing point of the two min branches so the quadrature only ever sees
    smooth integrands.
    """
    n = grid.node_count
    inv_n2 = 1.0 / (n * n)
    tol_total = 1e-12 * grid.horizon
    total = 0.0
    for k in range(n):
        t_k = float(grid.nodes[k])
        h = float(grid.nodes[k + 1]) - t_k
        f = _gap_integrand(t_k, inv_n2)
        tol = tol_total * h / grid.horizon
        # Branch u dominates until u* = t_k / (N^2 t_k - 1) when t_k > 1/N^2;
        # otherwise the integrand equals u on the whole step.
        if t_k > inv_n2:
            u_star = t_k / (n * n * t_k - 1.0)
            if u_star < h:
                total += u_star * u_star / 2
                total += _adaptive_simpson(f, u_star, h, tol)
            else:
                total += h * h / 2
        else:
            total += h * h / 2
    return total
