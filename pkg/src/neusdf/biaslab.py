"""Local bias analysis of the weight maximum near a surface crossing.

Along a ray near a crossing at t*, the SDF is modelled to second order as
``f(t* + d) = mu d + tau d^2 / 2`` (``mu < 0`` for an entering ray).  The
weight maximum sits at ``t* + delta_t`` where ``delta_t`` solves the
stationarity equation of the chosen weight.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import renderer, sdensity
from .field import Field, Ray, sphere_trace, ray_sphere_clip

RESIDUAL_TOL = 1e-10
MAX_BRACKET_SCALE = 64.0
CSV_COLUMNS = ("s", "delta_t_ours", "delta_t_naive", "residual_ours", "residual_naive")


class BracketError(RuntimeError):
    def __init__(self, kind, mu, tau, s, bracket):
        super().__init__(f"no sign change for {kind} residual (mu={mu}, tau={tau}, s={s}) "
                         f"in bracket [{bracket[0]:.3e}, {bracket[1]:.3e}]")
        self.bracket = bracket


@dataclass(frozen=True)
class BiasProbe:
    mu: float
    tau: float
    s: float
    delta_t: float
    residual: float
    kind: str


def _exponent(mu, tau, s, d):
    return s * (mu * d + 0.5 * tau * d * d)


def residual_ours(d, mu: float, tau: float, s: float):
    """tau (1 + e^-x) - (mu + tau d)^2 s (1 - e^-x), with x = s(mu d + tau d^2 / 2)."""
    x = _exponent(mu, tau, s, d)
    e = np.exp(-x)
    return tau * (1.0 + e) + (mu + tau * d) ** 2 * s * np.expm1(-x)


def residual_naive(d, mu: float, tau: float, s: float):
    """(mu + tau d)(-(1 - e^-2x)) - e^-x, with x as above."""
    x = _exponent(mu, tau, s, d)
    return (mu + tau * d) * np.expm1(-2.0 * x) - np.exp(-x)


_RESIDUALS = {"ours": residual_ours, "naive": residual_naive}


def _bisect(fn, lo, hi):
    flo = fn(lo)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        fm = fn(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    # pick the endpoint with the smaller residual
    return lo if abs(fn(lo)) <= abs(fn(hi)) else hi


def solve_bias(kind: str, mu: float, tau: float, s: float) -> BiasProbe:
    """Root of the stationarity equation nearest zero, by bracketed bisection.

    The bracket half-width starts at ``0.5 / |mu s|`` and doubles until a
    sign change appears on either side of zero (up to a factor of 64).
    """
    if kind not in _RESIDUALS:
        raise ValueError(f"kind must be 'ours' or 'naive', got {kind!r}")
    if not mu < 0:
        raise ValueError("mu must be negative (ray entering the surface)")
    if not s > 0:
        raise ValueError("s must be positive")
    res = _RESIDUALS[kind]

    def fn(d):
        return float(res(d, mu, tau, s))

    if fn(0.0) == 0.0:
        return BiasProbe(mu, tau, s, 0.0, 0.0, kind)
    base = 0.5 / abs(mu * s)
    k = 1.0
    f0 = fn(0.0)
    while k <= MAX_BRACKET_SCALE:
        a = base * k
        candidates = []
        if np.sign(fn(a)) != np.sign(f0):
            candidates.append(_bisect(fn, 0.0, a))
        if np.sign(fn(-a)) != np.sign(f0):
            candidates.append(_bisect(fn, -a, 0.0))
        if candidates:
            d = min(candidates, key=abs)
            return BiasProbe(mu, tau, s, float(d), abs(fn(d)), kind)
        k *= 2.0
    a = base * MAX_BRACKET_SCALE
    raise BracketError(kind, mu, tau, s, (-a, a))


def solve_bias_ours(mu: float, tau: float, s: float) -> float:
    return solve_bias("ours", mu, tau, s).delta_t


def solve_bias_naive(mu: float, tau: float, s: float) -> float:
    return solve_bias("naive", mu, tau, s).delta_t


def naive_planar_offset(mu: float, s: float) -> float:
    """Closed form of the naive offset for tau = 0.

    With u = exp(-s mu d) the naive equation reduces to |mu| u^2 + u - |mu| = 0.
    """
    m = abs(mu)
    u = (-1.0 + np.sqrt(1.0 + 4.0 * m * m)) / (2.0 * m)
    return float(np.log(u) / (-s * mu))


def fit_loglog_slope(s_values, deltas) -> float:
    """Least-squares slope of ln|delta| against ln s, skipping exact zeros."""
    s_values = np.asarray(s_values, dtype=np.float64)
    deltas = np.abs(np.asarray(deltas, dtype=np.float64))
    keep = deltas > 0
    if np.count_nonzero(keep) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(s_values[keep]), np.log(deltas[keep]), 1)
    return float(slope)


@dataclass
class ConvergenceReport:
    mu: float
    tau: float
    rows: list[tuple[float, float, float, float, float]]
    slope_ours: float
    slope_naive: float

    def write_csv(self, path, append: bool = False) -> None:
        write_rows_csv(path, self.rows, append=append)


def write_rows_csv(path, rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def convergence_report(mu: float, tau: float, s_grid) -> ConvergenceReport:
    s_grid = np.asarray(sorted(float(s) for s in s_grid))
    if s_grid.size < 5:
        raise ValueError("s grid needs at least 5 points")
    if s_grid[-1] / s_grid[0] < 100.0 * (1 - 1e-12):
        raise ValueError("s grid must span at least two decades")
    rows = []
    for s in s_grid:
        ours = solve_bias("ours", mu, tau, s)
        naive = solve_bias("naive", mu, tau, s)
        rows.append((float(s), ours.delta_t, naive.delta_t, ours.residual, naive.residual))
    arr = np.asarray(rows)
    return ConvergenceReport(mu, tau, rows, fit_loglog_slope(arr[:, 0], arr[:, 1]),
                             fit_loglog_slope(arr[:, 0], arr[:, 2]))


def naive_slope_at_star(field: Field, ray: Ray, s, kind: str = "naive",
                        h: float | None = None) -> float:
    """Central-difference slope of the continuous weight at the first crossing."""
    s = sdensity._s(s)
    t_near, t_far, hit = ray_sphere_clip(ray.origin, ray.direction, field.bounding_radius)
    if not hit:
        raise ValueError("ray misses the bounding sphere")
    surf = sphere_trace(field, ray, float(t_near), float(t_far))
    if not surf.hit:
        raise ValueError("ray has no surface crossing")
    if h is None:
        h = 1e-3 / s
    ts = np.array([surf.t - h, surf.t, surf.t + h])
    w = renderer.weight_curve(field, ray, s, kind, ts).w
    return float((w[2] - w[0]) / (2.0 * h))
