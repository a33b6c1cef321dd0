"""Geometry of the state space: ball domain, velocity annulus, hemispheres.

Vectors are plain tuples of floats on the hot paths (the event engine calls
these functions millions of times); numpy arrays are accepted everywhere a
sequence is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import NotOnBoundary

Vec = Tuple[float, ...]


def dot(a: Sequence[float], b: Sequence[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


def norm(a: Sequence[float]) -> float:
    return math.sqrt(dot(a, a))


def sub(a: Sequence[float], b: Sequence[float]) -> Vec:
    return tuple(x - y for x, y in zip(a, b))


def add(a: Sequence[float], b: Sequence[float]) -> Vec:
    return tuple(x + y for x, y in zip(a, b))


def scale(c: float, a: Sequence[float]) -> Vec:
    return tuple(c * x for x in a)


def axpy(c: float, a: Sequence[float], b: Sequence[float]) -> Vec:
    """Return ``b + c * a``."""
    return tuple(y + c * x for x, y in zip(a, b))


@dataclass(frozen=True)
class Domain:
    """Open ball of radius ``R`` centred at the origin in dimension ``d``."""

    d: int
    R: float

    def __post_init__(self) -> None:
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if not self.R > 0:
            raise ValueError(f"radius must be positive, got {self.R}")

    @property
    def tol_boundary(self) -> float:
        return 1e-9 * self.R

    def contains(self, x: Sequence[float]) -> bool:
        return dot(x, x) < self.R * self.R


@dataclass(frozen=True)
class VelocitySet:
    """The annulus ``v_min < |v| < v_max``."""

    v_min: float
    v_max: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.v_min < self.v_max < math.inf):
            raise ValueError(f"need 0 <= v_min < v_max < inf, got {self.v_min}, {self.v_max}")

    def contains(self, v: Sequence[float]) -> bool:
        s = norm(v)
        return self.v_min < s < self.v_max


@dataclass(frozen=True)
class Hemisphere:
    """Unit vectors with positive inner product against ``w``."""

    w: Tuple[float, ...]

    def __post_init__(self) -> None:
        if norm(self.w) == 0.0:
            raise ValueError("hemisphere reference direction must be nonzero")

    def contains(self, e: Sequence[float], tol: float = 1e-12) -> bool:
        return abs(norm(e) - 1.0) <= tol and dot(e, self.w) > 0.0


def positive_root(a: float, b: float, c: float) -> float:
    """Larger root of ``a t^2 + b t + c`` for ``a > 0`` when ``c <= 0``.

    Uses the cancellation-free form on each branch of ``b``. Also covers a
    start point sitting numerically on the sphere (``c ~ 0``) with ``b < 0``:
    the returned root is then the far crossing, not the current one.
    """
    disc = b * b - 4.0 * a * c
    sq = math.sqrt(disc) if disc > 0.0 else 0.0
    if b < 0.0:
        return (-b + sq) / (2.0 * a)
    den = -b - sq
    if den == 0.0:
        return 0.0
    return 2.0 * c / den


def boundary_hit_time(x: Sequence[float], v: Sequence[float], R: float) -> Optional[float]:
    """Smallest ``t > 0`` with ``|x + t v| = R`` for ``x`` inside the ball."""
    a = dot(v, v)
    if a == 0.0:
        return None
    return positive_root(a, 2.0 * dot(x, v), dot(x, x) - R * R)


def pair_overlap_window(
    x_i: Sequence[float],
    x_j: Sequence[float],
    v_i: Sequence[float],
    v_j: Sequence[float],
    beta: float,
) -> Optional[Tuple[float, float]]:
    """Entry and exit times of the centre distance through ``beta``.

    Returns ``None`` when the pair never comes within ``beta`` under straight
    line motion (parallel motion, receding pair, or negative discriminant).
    """
    dx = sub(x_i, x_j)
    dv = sub(v_i, v_j)
    a = dot(dv, dv)
    b = 2.0 * dot(dx, dv)
    c = dot(dx, dx) - beta * beta
    return window_roots(a, b, c)


def window_roots(a: float, b: float, c: float) -> Optional[Tuple[float, float]]:
    """Both positive roots of ``a u^2 + b u + c`` for an approaching pair."""
    if a == 0.0 or b >= 0.0 or c <= 0.0:
        return None
    disc = b * b - 4.0 * a * c
    if disc <= 0.0:
        return None
    q = 0.5 * (-b + math.sqrt(disc))
    return c / q, q / a


def outward_normal(x: Sequence[float], R: float, tol: Optional[float] = None) -> Vec:
    """Unit outer normal ``x/|x|`` at a boundary point of the ball."""
    r = norm(x)
    if tol is None:
        tol = 1e-9 * R
    if abs(r - R) > tol:
        raise NotOnBoundary(f"|x| = {r!r} is not within {tol:g} of R = {R!r}")
    return tuple(c / r for c in x)


def orthonormal_frame(w: Sequence[float]) -> np.ndarray:
    """Rows form an orthonormal basis whose first row is ``w/|w|``."""
    w = np.asarray(w, dtype=float)
    u = w / np.linalg.norm(w)
    d = u.size
    if d == 2:
        return np.array([u, [-u[1], u[0]]])
    # Gram-Schmidt against the least aligned coordinate axis.
    k = int(np.argmin(np.abs(u)))
    t = np.zeros(d)
    t[k] = 1.0
    t1 = t - np.dot(t, u) * u
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(u, t1)
    return np.array([u, t1, t2])


def hemisphere_quadrature(w: Sequence[float], order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on ``{e : <e, w> > 0}`` of the unit sphere.

    d=2 uses Gauss-Legendre in the angle from ``w`` over ``(-pi/2, pi/2)``.
    d=3 is a product rule: Gauss-Legendre in ``cos(theta)`` over ``(0, 1)``
    times ``2*order`` equispaced azimuths. Weights sum to the hemisphere
    measure (pi or 2 pi).
    """
    if order < 2:
        raise ValueError("order must be at least 2")
    frame = orthonormal_frame(w)
    d = frame.shape[0]
    x, wt = leggauss(order)
    if d == 2:
        theta = 0.5 * math.pi * x
        nodes = np.cos(theta)[:, None] * frame[0] + np.sin(theta)[:, None] * frame[1]
        return nodes, 0.5 * math.pi * wt
    mu = 0.5 * (x + 1.0)
    n_phi = 2 * order
    phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
    mu_g, phi_g = np.meshgrid(mu, phi, indexing="ij")
    s = np.sqrt(1.0 - mu_g**2)
    nodes = (
        mu_g[..., None] * frame[0]
        + (s * np.cos(phi_g))[..., None] * frame[1]
        + (s * np.sin(phi_g))[..., None] * frame[2]
    ).reshape(-1, 3)
    weights = np.repeat(0.5 * wt, n_phi) * (2.0 * math.pi / n_phi)
    return nodes, weights


def cap_quadrature(
    w: Sequence[float], c_lo: float, c_hi: float, order: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature on the band ``c_lo < <e, w/|w|> < c_hi`` of the hemisphere.

    Integrands supported inside the band (the collision kernel's angular
    bump) converge much faster on these nodes than on the full hemisphere.
    """
    frame = orthonormal_frame(w)
    d = frame.shape[0]
    x, wt = leggauss(order)
    if d == 2:
        th_lo, th_hi = math.acos(c_hi), math.acos(c_lo)
        half = 0.5 * (th_hi - th_lo)
        th = th_lo + half * (x + 1.0)
        th = np.concatenate([th, -th])
        weights = np.concatenate([half * wt, half * wt])
        nodes = np.cos(th)[:, None] * frame[0] + np.sin(th)[:, None] * frame[1]
        return nodes, weights
    half = 0.5 * (c_hi - c_lo)
    mu = c_lo + half * (x + 1.0)
    n_phi = 2 * order
    phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
    mu_g, phi_g = np.meshgrid(mu, phi, indexing="ij")
    s = np.sqrt(1.0 - mu_g**2)
    nodes = (
        mu_g[..., None] * frame[0]
        + (s * np.cos(phi_g))[..., None] * frame[1]
        + (s * np.sin(phi_g))[..., None] * frame[2]
    ).reshape(-1, 3)
    weights = np.repeat(half * wt, n_phi) * (2.0 * math.pi / n_phi)
    return nodes, weights
