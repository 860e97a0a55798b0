"""Logistic S-density family and the volume densities built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import Field, Ray


@dataclass(frozen=True)
class SDensityParams:
    """Inverse standard deviation ``s`` of the logistic density."""

    s: float

    def __post_init__(self):
        if not (np.isfinite(self.s) and self.s > 0):
            raise ValueError(f"s must be positive and finite, got {self.s}")


def _s(params) -> float:
    return float(params.s) if isinstance(params, SDensityParams) else float(params)


def sigmoid(x, s) -> np.ndarray:
    """Phi_s(x) = 1 / (1 + exp(-s x)), only ever exponentiating non-positive values."""
    z = _s(s) * np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid(x, s) -> np.ndarray:
    z = _s(s) * np.asarray(x, dtype=np.float64)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def logistic_pdf(x, s) -> np.ndarray:
    """phi_s(x) = s e^{-sx} / (1 + e^{-sx})^2; even in x."""
    s = _s(s)
    e = np.exp(-np.abs(s * np.asarray(x, dtype=np.float64)))
    return s * e / (1.0 + e) ** 2


def s_density(field: Field, x, s) -> np.ndarray:
    return logistic_pdf(field.sdf(np.asarray(x, dtype=np.float64)), s)


def naive_density(field: Field, ray: Ray, t, s) -> np.ndarray:
    """Classical volume density set equal to the S-density along the ray."""
    return s_density(field, ray.at(t), s)


def opaque_density(field: Field, ray: Ray, t, s) -> np.ndarray:
    """max(-(grad f . v) phi_s(f) / Phi_s(f), 0) along the ray.

    Uses phi_s / Phi_s = s Phi_s(-f), which stays finite deep inside solids.
    """
    s = _s(s)
    p = ray.at(t)
    f = field.sdf(p)
    slope = field.gradient(p) @ ray.direction
    return np.maximum(-slope * s * sigmoid(-f, s), 0.0)
