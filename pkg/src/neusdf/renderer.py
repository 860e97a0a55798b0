"""Continuous weight oracles and the discrete SDF volume renderer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import sdensity
from .field import Field, Ray, ray_sphere_clip

N_COARSE = 64
N_IMPORTANCE = 16
UPSAMPLE_ROUNDS = 4
BASE_INV_STD = 32.0
PHI_FLOOR = 1e-12
EMPTY_WEIGHT = 1e-8
QUAD_TOL = 1e-8

ColorFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
WEIGHT_KINDS = ("naive", "normalized", "ours")


@dataclass(frozen=True)
class RaySampleSet:
    section_ts: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.section_ts, dtype=np.float64)
        if ts.ndim != 1 or ts.size < 2:
            raise ValueError("need at least two section points")
        if not np.all(np.diff(ts) > 0):
            raise ValueError("section points must be strictly increasing")
        object.__setattr__(self, "section_ts", ts)

    @property
    def mid_ts(self) -> np.ndarray:
        return 0.5 * (self.section_ts[1:] + self.section_ts[:-1])

    @property
    def section_lengths(self) -> np.ndarray:
        return np.diff(self.section_ts)

    def __len__(self):
        return self.section_ts.size - 1


@dataclass(frozen=True)
class WeightCurve:
    ts: np.ndarray
    w: np.ndarray
    kind: str

    def argmax_t(self) -> float:
        # np.argmax returns the first maximum, i.e. the smallest t on ties
        return float(self.ts[int(np.argmax(self.w))])

    def integral(self) -> float:
        return float(np.trapezoid(self.w, self.ts))


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray
    opacity: float
    weights: np.ndarray
    expected_depth: float
    samples: RaySampleSet | None


# --------------------------------------------------------------------------
# quadrature
# --------------------------------------------------------------------------


def adaptive_trapezoid(func: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                       tol: float = QUAD_TOL, max_depth: int = 40,
                       initial: int = 16) -> float:
    """Trapezoidal rule with adaptive bisection to an absolute tolerance.

    Each interval's error is estimated as |T_halves - T_whole| / 3 and it is
    accepted once that falls below its share of ``tol`` (by length).
    """
    if b <= a:
        return 0.0
    edges = np.linspace(a, b, initial + 1)
    lo, hi = edges[:-1], edges[1:]
    flo, fhi = func(lo), func(hi)
    total = 0.0
    width = b - a
    for depth in range(max_depth + 1):
        mid = 0.5 * (lo + hi)
        fmid = func(mid)
        h = hi - lo
        whole = 0.5 * h * (flo + fhi)
        halves = 0.25 * h * (flo + 2.0 * fmid + fhi)
        err = np.abs(halves - whole) / 3.0
        ok = err <= tol * h / width
        if depth == max_depth:
            ok[:] = True
        total += float(np.sum(halves[ok]))
        keep = ~ok
        if not np.any(keep):
            break
        lo, hi, mid = lo[keep], hi[keep], mid[keep]
        flo, fhi, fmid = flo[keep], fhi[keep], fmid[keep]
        lo, hi = np.concatenate([lo, mid]), np.concatenate([mid, hi])
        flo, fhi = np.concatenate([flo, fmid]), np.concatenate([fmid, fhi])
    return total


def _cumulative_trapezoid(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


def _density_fn(field: Field, ray: Ray, s: float, kind: str):
    if kind == "ours":
        return lambda t: sdensity.opaque_density(field, ray, t, s)
    return lambda t: sdensity.naive_density(field, ray, t, s)


def weight_curve(field: Field, ray: Ray, s, kind: str, ts) -> WeightCurve:
    """Continuous weight w(t) sampled on ``ts`` (oracle grade, not differentiable).

    The transmittance integral starts where the ray enters the bounding
    sphere.  ``ts`` must lie within the clipped segment.
    """
    if kind not in WEIGHT_KINDS:
        raise ValueError(f"kind must be one of {WEIGHT_KINDS}")
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 1 or ts.size < 2:
        raise ValueError("weight grid needs at least two points")
    if not np.all(np.diff(ts) > 0):
        raise ValueError("weight grid must be strictly increasing")
    s = sdensity._s(s)
    t_near, t_far, hit = ray_sphere_clip(ray.origin, ray.direction, field.bounding_radius)
    if not hit:
        raise ValueError("ray misses the bounding sphere")
    t_near, t_far = float(t_near), float(t_far)
    eps = 1e-9 * max(1.0, t_far)
    if ts[0] < t_near - eps or ts[-1] > t_far + eps:
        raise ValueError("weight grid must lie inside the bounding-sphere clip")

    if kind == "normalized":
        phi = sdensity.naive_density(field, ray, ts, s)
        total = adaptive_trapezoid(lambda t: sdensity.naive_density(field, ray, t, s),
                                   t_near, t_far)
        return WeightCurve(ts, phi / total, kind)

    density = _density_fn(field, ray, s, kind)
    d = density(ts)
    head = adaptive_trapezoid(density, t_near, float(ts[0]))
    tau = head + _cumulative_trapezoid(d, ts)
    return WeightCurve(ts, np.exp(-tau) * d, kind)


def transmittance(field: Field, ray: Ray, s, kind: str, t: float) -> float:
    """T(t) by adaptive quadrature from the bounding-sphere entry."""
    t_near, _, hit = ray_sphere_clip(ray.origin, ray.direction, field.bounding_radius)
    if not hit:
        raise ValueError("ray misses the bounding sphere")
    tau = adaptive_trapezoid(_density_fn(field, ray, sdensity._s(s), kind), float(t_near), t)
    return float(np.exp(-tau))


# --------------------------------------------------------------------------
# discrete opacity and compositing
# --------------------------------------------------------------------------


def alpha_from_sdf(f_sections: np.ndarray, s) -> np.ndarray:
    """Discrete opacity from SDF values at consecutive section points (last axis).

    Evaluated as ``1 - exp(log Phi(f_next) - log Phi(f_prev))`` so sections deep
    inside an object, where Phi underflows, keep their exact opacity.
    """
    log_phi = sdensity.log_sigmoid(f_sections, s)
    ratio = log_phi[..., 1:] - log_phi[..., :-1]
    return np.maximum(-np.expm1(np.minimum(ratio, 0.0)), 0.0)


def discrete_alpha(field: Field, ray: Ray, samples: RaySampleSet, s) -> np.ndarray:
    return alpha_from_sdf(field.sdf(ray.at(samples.section_ts)), s)


def quadrature_alpha(field: Field, ray: Ray, t0: float, t1: float, s,
                     tol: float = QUAD_TOL) -> float:
    """1 - exp(-integral of the opaque density over [t0, t1])."""
    if not t0 < t1:
        raise ValueError("t0 must be smaller than t1")
    s = sdensity._s(s)
    tau = adaptive_trapezoid(lambda t: sdensity.opaque_density(field, ray, t, s), t0, t1, tol)
    return float(-np.expm1(-tau))


def composite(alphas, colors):
    """Front-to-back alpha compositing along the last sample axis.

    Returns ``(color, opacity, weights)``.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape[:-1] != alphas.shape:
        raise ValueError("alphas and colors must describe the same samples")
    survive = np.cumprod(1.0 - alphas, axis=-1)
    trans = np.concatenate([np.ones_like(alphas[..., :1]), survive[..., :-1]], axis=-1)
    weights = trans * alphas
    return np.sum(weights[..., None] * colors, axis=-2), np.sum(weights, axis=-1), weights


# --------------------------------------------------------------------------
# hierarchical sampling
# --------------------------------------------------------------------------


def _sample_pdf(ts: np.ndarray, weights: np.ndarray, n: int, rng: np.random.Generator,
                near: np.ndarray, far: np.ndarray) -> np.ndarray:
    """Inverse-transform samples from a piecewise-constant pdf over sections."""
    r = ts.shape[0]
    u = (np.arange(n) + rng.uniform(size=(r, n))) / n
    total = weights.sum(axis=-1, keepdims=True)
    empty = total[:, 0] < EMPTY_WEIGHT
    pdf = weights / np.where(total > 0, total, 1.0)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    idx = np.sum(cdf[:, None, 1:-1] <= u[:, :, None], axis=-1)
    rows = np.arange(r)[:, None]
    c0 = cdf[rows, idx]
    p = pdf[rows, idx]
    frac = np.where(p > 0, (u - c0) / np.where(p > 0, p, 1.0), 0.5)
    t0 = ts[rows, idx]
    t1 = ts[rows, idx + 1]
    out = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
    if np.any(empty):
        uniform = near[:, None] + u * (far - near)[:, None]
        out[empty] = uniform[empty]
    return out


def hierarchical_sample_batch(sdf_fn: Callable[[np.ndarray], np.ndarray],
                              origins: np.ndarray, directions: np.ndarray,
                              near: np.ndarray, far: np.ndarray, rng: np.random.Generator,
                              n_coarse: int = N_COARSE, n_importance: int = N_IMPORTANCE,
                              rounds: int = UPSAMPLE_ROUNDS,
                              base_s: float = BASE_INV_STD,
                              history: list | None = None) -> np.ndarray:
    """Coarse uniform sections then ``rounds`` of importance sampling.

    Round ``i`` (1-based) weighs sections with the fixed inverse standard
    deviation ``base_s * 2**i``.  Returns sorted section parameters of shape
    ``(rays, n_coarse + 1 + rounds * n_importance)``.  Each round's proposals
    are appended to ``history`` when given.
    """
    r = origins.shape[0]
    grid = np.linspace(0.0, 1.0, n_coarse + 1)
    ts = near[:, None] + grid[None, :] * (far - near)[:, None]
    f = sdf_fn((origins[:, None, :] + ts[..., None] * directions[:, None, :]).reshape(-1, 3))
    f = f.reshape(r, -1)
    for i in range(1, rounds + 1):
        alpha = alpha_from_sdf(f, base_s * 2.0 ** i)
        trans = np.cumprod(np.concatenate([np.ones((r, 1)), 1.0 - alpha[:, :-1]], axis=-1),
                           axis=-1)
        new_t = _sample_pdf(ts, trans * alpha, n_importance, rng, near, far)
        if history is not None:
            history.append(new_t)
        new_f = sdf_fn((origins[:, None, :] + new_t[..., None] * directions[:, None, :])
                       .reshape(-1, 3)).reshape(r, -1)
        ts = np.concatenate([ts, new_t], axis=-1)
        f = np.concatenate([f, new_f], axis=-1)
        order = np.argsort(ts, axis=-1, kind="stable")
        ts = np.take_along_axis(ts, order, axis=-1)
        f = np.take_along_axis(f, order, axis=-1)
    return ts


def hierarchical_sample(field: Field, ray: Ray, rng: np.random.Generator,
                        **kwargs) -> RaySampleSet:
    t_near, t_far, hit = ray_sphere_clip(ray.origin, ray.direction, field.bounding_radius)
    if not hit:
        raise ValueError("ray misses the bounding sphere")
    ts = hierarchical_sample_batch(field.sdf, ray.origin[None], ray.direction[None],
                                   np.atleast_1d(t_near), np.atleast_1d(t_far), rng, **kwargs)
    return RaySampleSet(ts[0])


# --------------------------------------------------------------------------
# full rendering
# --------------------------------------------------------------------------


def render_rays(field: Field, color_fn: ColorFn, origins, directions, s,
                rng: np.random.Generator, **sample_kwargs):
    """Render a batch of rays.  Returns ``(colors, opacity, depth, weights, ts)``.

    Rays that miss the bounding sphere come back black with zero opacity;
    their ``weights``/``ts`` rows are zero.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    s = sdensity._s(s)
    near, far, hit = ray_sphere_clip(o, d, field.bounding_radius)
    n_rays = o.shape[0]
    colors = np.zeros((n_rays, 3))
    opacity = np.zeros(n_rays)
    depth = np.zeros(n_rays)
    idx = np.nonzero(hit)[0]
    n_sec = sample_kwargs.get("n_coarse", N_COARSE) + sample_kwargs.get(
        "rounds", UPSAMPLE_ROUNDS) * sample_kwargs.get("n_importance", N_IMPORTANCE)
    weights = np.zeros((n_rays, n_sec))
    ts_out = np.zeros((n_rays, n_sec + 1))
    if idx.size == 0:
        return colors, opacity, depth, weights, ts_out
    oh, dh = o[idx], d[idx]
    ts = hierarchical_sample_batch(field.sdf, oh, dh, near[idx], far[idx], rng, **sample_kwargs)
    f = field.sdf((oh[:, None] + ts[..., None] * dh[:, None]).reshape(-1, 3)).reshape(ts.shape)
    alpha = alpha_from_sdf(f, s)
    mid = 0.5 * (ts[:, 1:] + ts[:, :-1])
    mid_pts = (oh[:, None] + mid[..., None] * dh[:, None]).reshape(-1, 3)
    normals = field.gradient(mid_pts)
    view = np.repeat(dh, mid.shape[1], axis=0)
    c = np.asarray(color_fn(mid_pts, normals, view)).reshape(*mid.shape, 3)
    rgb, acc, w = composite(alpha, c)
    colors[idx] = rgb
    opacity[idx] = acc
    depth[idx] = np.sum(w * mid, axis=-1) / np.maximum(acc, 1e-10)
    weights[idx] = w
    ts_out[idx] = ts
    return colors, opacity, depth, weights, ts_out


def render_ray(field: Field, color_fn: ColorFn, ray: Ray, s, rng: np.random.Generator,
               **sample_kwargs) -> RenderOutput:
    colors, opacity, depth, weights, ts = render_rays(
        field, color_fn, ray.origin[None], ray.direction[None], s, rng, **sample_kwargs)
    if opacity[0] == 0 and not np.any(ts[0]):
        return RenderOutput(np.zeros(3), 0.0, np.zeros(0), 0.0, None)
    return RenderOutput(colors[0], float(opacity[0]), weights[0], float(depth[0]),
                        RaySampleSet(ts[0]))
