"""Smooth model densities: collision kernel, wall redistribution, gamma law, initial law.

Every density is assembled from the C-infinity bump ``exp(-1/((u-a)(b-u)))``
on an interval ``(a, b)``, which gives compact support together with closed
form log-derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from .config import ModelConfig
from .errors import DegeneratePair, OutsideSupport, RejectionBudgetExceeded
from .geometry import cap_quadrature, dot, norm

Vec = Tuple[float, ...]

# Gauss-Legendre order used for one-dimensional normalising constants.
_CONST_ORDER = 400
# proposals after which the sampler checks whether the admissible set is empty
_EMPTY_CHECK = 2000
# grid resolution used to locate a small admissible band
_FINE_GRID = 4000


@dataclass(frozen=True)
class Bump:
    """``exp(-1/((u-a)(b-u)))`` on ``(a, b)`` and zero elsewhere."""

    a: float
    b: float

    def __call__(self, u: float) -> float:
        if u <= self.a or u >= self.b:
            return 0.0
        return math.exp(-1.0 / ((u - self.a) * (self.b - u)))

    def inside(self, u: float) -> bool:
        return self.a < u < self.b

    def dlog(self, u: float) -> float:
        q = (u - self.a) * (self.b - u)
        return (self.a + self.b - 2.0 * u) / (q * q)

    def d2log(self, u: float) -> float:
        q = (u - self.a) * (self.b - u)
        s = self.a + self.b - 2.0 * u
        return -2.0 / (q * q) - 2.0 * s * s / (q * q * q)

    def deriv(self, u: float) -> float:
        if not self.inside(u):
            return 0.0
        return self(u) * self.dlog(u)

    def peak(self) -> float:
        return math.exp(-4.0 / (self.b - self.a) ** 2)

    def max_on(self, lo: float, hi: float) -> float:
        mid = 0.5 * (self.a + self.b)
        return self(min(max(mid, lo), hi))

    def values(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        m = (u > self.a) & (u < self.b)
        out[m] = np.exp(-1.0 / ((u[m] - self.a) * (self.b - u[m])))
        return out

    def integrate(self, weight: Callable[[np.ndarray], np.ndarray] = None, lo=None, hi=None) -> float:
        """Gauss-Legendre integral of ``bump(u) * weight(u)`` over the support."""
        lo = self.a if lo is None else max(lo, self.a)
        hi = self.b if hi is None else min(hi, self.b)
        x, w = leggauss(_CONST_ORDER)
        half = 0.5 * (hi - lo)
        u = lo + half * (x + 1.0)
        f = self.values(u)
        if weight is not None:
            f = f * weight(u)
        return float(half * np.dot(w, f))


def sphere_area(d: int) -> float:
    return 2.0 * math.pi if d == 2 else 4.0 * math.pi


def perp_frame(u: Sequence[float]) -> Tuple[Vec, ...]:
    """Unit vectors completing ``u`` (unit) to an orthonormal basis."""
    if len(u) == 2:
        return ((-u[1], u[0]),)
    ax = min(range(3), key=lambda k: abs(u[k]))
    t = [0.0, 0.0, 0.0]
    t[ax] = 1.0
    p = dot(t, u)
    t1 = [t[k] - p * u[k] for k in range(3)]
    n1 = norm(t1)
    t1 = (t1[0] / n1, t1[1] / n1, t1[2] / n1)
    t2 = (
        u[1] * t1[2] - u[2] * t1[1],
        u[2] * t1[0] - u[0] * t1[2],
        u[0] * t1[1] - u[1] * t1[0],
    )
    return (t1, t2)


def cone_direction(axis: Sequence[float], mu: float, phi: float) -> Vec:
    """Unit vector at cosine ``mu`` from ``axis``; ``phi`` is a signed angle (d=2) or azimuth (d=3)."""
    s = math.sqrt(max(0.0, 1.0 - mu * mu))
    frame = perp_frame(axis)
    if len(axis) == 2:
        p = frame[0]
        sg = 1.0 if phi >= 0.0 else -1.0
        return (mu * axis[0] + sg * s * p[0], mu * axis[1] + sg * s * p[1])
    t1, t2 = frame
    c, sn = math.cos(phi), math.sin(phi)
    return tuple(mu * axis[k] + s * (c * t1[k] + sn * t2[k]) for k in range(3))


def post_impact(v: Sequence[float], vp: Sequence[float], e: Sequence[float]) -> Tuple[Vec, Vec]:
    """Specular exchange along ``e``: ``v - <e, v-v'> e`` and ``v' + <e, v-v'> e``."""
    c = sum(ek * (a - b) for ek, a, b in zip(e, v, vp))
    return (
        tuple(a - c * ek for a, ek in zip(v, e)),
        tuple(b + c * ek for b, ek in zip(vp, e)),
    )


class CollisionKernel:
    """Product of bumps in ``|cos angle(e, v-v')|``, ``|v-v'|`` and ``|v+v'|``.

    The normalised impact density on the hemisphere is ``B * chi / Z`` where
    ``chi`` keeps both outgoing velocities in the annulus and ``Z`` is a
    quadrature over the band of the angular bump.
    """

    def __init__(self, cfg: ModelConfig):
        self.d = cfg.d
        self.delta = cfg.delta_angle
        self.r0 = cfg.r0
        self.v_min = cfg.v_min
        self.v_max = cfg.v_max
        self.order = cfg.quad_order
        self.cap = cfg.rejection_cap
        self.ang = Bump(cfg.delta_angle, 1.0 - cfg.delta_angle)
        self.rel = Bump(cfg.r0, 2.0 * cfg.v_max + 1.0)
        self.tot = Bump(-1.0, 2.0 * cfg.v_max + 1.0)
        self._ang_max = self.ang.peak()
        self._th_lo = math.acos(1.0 - cfg.delta_angle)
        self._th_hi = math.acos(cfg.delta_angle)

    def B(self, v: Sequence[float], vp: Sequence[float], e: Sequence[float]) -> float:
        w = [a - b for a, b in zip(v, vp)]
        nw = norm(w)
        if nw == 0.0:
            return 0.0
        c = abs(dot(e, w)) / nw
        s = norm([a + b for a, b in zip(v, vp)])
        return self.ang(c) * self.rel(nw) * self.tot(s)

    def admissible(self, v: Sequence[float], vp: Sequence[float], e: Sequence[float]) -> bool:
        vs, vps = post_impact(v, vp, e)
        lo, hi = self.v_min, self.v_max
        return lo < norm(vs) < hi and lo < norm(vps) < hi

    def _check_pair(self, v, vp) -> float:
        nw = norm([a - b for a, b in zip(v, vp)])
        if nw < self.r0:
            raise DegeneratePair(f"|v - v'| = {nw:.3g} below r0 = {self.r0}")
        return nw

    def normalizer(self, v: Sequence[float], vp: Sequence[float], order: int = None) -> float:
        """``int B * chi de`` over the hemisphere by band quadrature."""
        self._check_pair(v, vp)
        w = np.subtract(v, vp)
        nodes, weights = cap_quadrature(w, self.delta, 1.0 - self.delta, order or self.order)
        total = 0.0
        for e, wt in zip(nodes, weights):
            e = tuple(e)
            if self.admissible(v, vp, e):
                total += wt * self.B(v, vp, e)
        return total

    def density(self, v: Sequence[float], vp: Sequence[float], e: Sequence[float], order: int = None) -> float:
        self._check_pair(v, vp)
        if not self.admissible(v, vp, e):
            return 0.0
        b = self.B(v, vp, e)
        if b == 0.0:
            return 0.0
        return b / self.normalizer(v, vp, order)

    def grad_log_B(self, v: Sequence[float], vp: Sequence[float], e: Sequence[float]) -> Vec:
        """Ambient gradient in ``e`` of ``log B`` (only the angular factor depends on ``e``)."""
        w = [a - b for a, b in zip(v, vp)]
        nw = norm(w)
        p = dot(e, w) / nw
        c = abs(p)
        if not self.ang.inside(c) or nw < self.r0:
            raise OutsideSupport(f"|cos| = {c:.3g} outside the angular support")
        g = self.ang.dlog(c) * (1.0 if p > 0 else -1.0) / nw
        return tuple(g * wk for wk in w)

    def _admissible_mu_range(self, v, vp, u, frame) -> Tuple[float, float]:
        """Range of ``<e, u>`` over admissible directions, from a fine grid.

        The range is padded by one grid cell on each side; ``(0, 0)`` means
        no grid direction is admissible.
        """
        lo_mu, hi_mu = self.delta, 1.0 - self.delta
        if self.d == 2:
            th = np.linspace(self._th_lo, self._th_hi, _FINE_GRID)
            mu = np.cos(th)
            sn = np.sin(th)
            p = np.asarray(frame[0])
            dirs = [np.outer(mu, u) + np.outer(sg * sn, p) for sg in (1.0, -1.0)]
            mus = [mu, mu]
        else:
            mu = np.linspace(lo_mu, hi_mu, _FINE_GRID // 8)
            phi = np.linspace(0.0, 2.0 * math.pi, 128, endpoint=False)
            M, P = np.meshgrid(mu, phi, indexing="ij")
            S = np.sqrt(1.0 - M * M)
            t1, t2 = np.asarray(frame[0]), np.asarray(frame[1])
            E = M[..., None] * np.asarray(u) + S[..., None] * (np.cos(P)[..., None] * t1 + np.sin(P)[..., None] * t2)
            dirs = [E.reshape(-1, 3)]
            mus = [M.reshape(-1)]
        v = np.asarray(v, float)
        vp = np.asarray(vp, float)
        w = v - vp
        hit = []
        for E, m in zip(dirs, mus):
            c = E @ w
            s1 = np.linalg.norm(v - c[:, None] * E, axis=1)
            s2 = np.linalg.norm(vp + c[:, None] * E, axis=1)
            ok = (s1 > self.v_min) & (s1 < self.v_max) & (s2 > self.v_min) & (s2 < self.v_max)
            hit.append(m[ok])
        hit = np.concatenate(hit)
        if hit.size == 0:
            return 0.0, 0.0
        step = (hi_mu - lo_mu) / (_FINE_GRID // 8) if self.d == 3 else (self._th_hi - self._th_lo) / _FINE_GRID
        return max(lo_mu, float(hit.min()) - step), min(hi_mu, float(hit.max()) + step)

    def sample(self, v: Sequence[float], vp: Sequence[float], rng) -> Vec:
        """Rejection sampler: uniform proposals on the angular band, bump envelope.

        When proposals keep missing the admissible set, the band is narrowed
        to the (padded) range of ``<e, u>`` where admissible directions exist
        and the envelope is lowered to the bump maximum on that range.
        """
        nw = self._check_pair(v, vp)
        u = tuple((a - b) / nw for a, b in zip(v, vp))
        frame = perp_frame(u)
        d = self.d
        mu_lo, mu_hi = self.delta, 1.0 - self.delta
        th_lo, th_hi = self._th_lo, self._th_hi
        env = self._ang_max
        for n in range(self.cap):
            if n == _EMPTY_CHECK:
                if self.normalizer(v, vp) == 0.0:
                    raise DegeneratePair("no impact direction keeps both outgoing speeds in the annulus")
                mu_lo, mu_hi = self._admissible_mu_range(v, vp, u, frame)
                if mu_hi <= mu_lo:
                    raise DegeneratePair("no impact direction keeps both outgoing speeds in the annulus")
                th_lo, th_hi = math.acos(mu_hi), math.acos(mu_lo)
                env = self.ang.max_on(mu_lo, mu_hi)
            if d == 2:
                th = th_lo + (th_hi - th_lo) * rng.uniform()
                sg = 1.0 if rng.uniform() < 0.5 else -1.0
                mu = math.cos(th)
                s = sg * math.sin(th)
                p = frame[0]
                e = (mu * u[0] + s * p[0], mu * u[1] + s * p[1])
            else:
                mu = mu_lo + (mu_hi - mu_lo) * rng.uniform()
                phi = 2.0 * math.pi * rng.uniform()
                s = math.sqrt(1.0 - mu * mu)
                t1, t2 = frame
                cp, sp = math.cos(phi), math.sin(phi)
                e = tuple(mu * u[k] + s * (cp * t1[k] + sp * t2[k]) for k in range(3))
            if rng.uniform() * env < self.ang(mu) and self.admissible(v, vp, e):
                return e
        raise RejectionBudgetExceeded(f"no admissible impact direction after {self.cap} proposals")

    def fisher_bound(self, v: Sequence[float], vp: Sequence[float], order: int = None) -> float:
        """Quadrature of ``|grad_e log B|^2`` against the normalised density."""
        self._check_pair(v, vp)
        w = np.subtract(v, vp)
        nodes, weights = cap_quadrature(w, self.delta, 1.0 - self.delta, order or self.order)
        num = den = 0.0
        for e, wt in zip(nodes, weights):
            e = tuple(e)
            if not self.admissible(v, vp, e):
                continue
            b = self.B(v, vp, e)
            if b == 0.0:
                continue
            g = self.grad_log_B(v, vp, e)
            num += wt * b * dot(g, g)
            den += wt * b
        return num / den if den > 0 else 0.0


class RedistributionKernel:
    """Wall law ``m(x, v) = C * cone(-<v/|v|, n>) * speed(|v|)``.

    ``m`` is the density ``M(x; v) |<v, n(x)>|`` of the post-reflection
    velocity; it is supported on the strict inward cone ``-<v/|v|, n> > eps``
    and integrates to one over velocity space.
    """

    def __init__(self, cfg: ModelConfig):
        self.d = cfg.d
        self.R = cfg.R
        self.eps = cfg.eps_cone
        self.cap = cfg.rejection_cap
        self.v_min = cfg.v_min
        self.v_max = cfg.v_max
        self.cone = Bump(cfg.eps_cone, 2.0)
        self.speed = Bump(cfg.v_min, cfg.v_max)
        d = cfg.d
        speed_int = self.speed.integrate(lambda r: r ** (d - 1))
        if d == 2:
            x, w = leggauss(_CONST_ORDER)
            phimax = math.acos(cfg.eps_cone)
            phi = 0.5 * phimax * (x + 1.0)
            ang_int = 2.0 * 0.5 * phimax * float(np.dot(w, self.cone.values(np.cos(phi))))
        else:
            ang_int = 2.0 * math.pi * self.cone.integrate(hi=1.0)
        self.C = 1.0 / (speed_int * ang_int)
        self._cone_max = self.cone(1.0)
        grid = np.linspace(cfg.v_min, cfg.v_max, 4001)
        self._speed_env = 1.05 * float(np.max(self.speed.values(grid) * grid ** (d - 1)))
        self._phimax = math.acos(cfg.eps_cone)

    def _normal(self, x: Sequence[float]) -> Vec:
        r = norm(x)
        return tuple(c / r for c in x)

    def density(self, x: Sequence[float], v: Sequence[float]) -> float:
        n = self._normal(x)
        s = norm(v)
        if not self.speed.inside(s):
            return 0.0
        c = -dot(v, n) / s
        if c <= self.eps:
            return 0.0
        return self.C * self.cone(c) * self.speed(s)

    def M(self, x: Sequence[float], v: Sequence[float]) -> float:
        """Redistribution kernel itself, ``m / |<v, n>|``."""
        n = self._normal(x)
        vn = abs(dot(v, n))
        return self.density(x, v) / vn if vn > 0 else 0.0

    def grad_log_density(self, x: Sequence[float], v: Sequence[float]) -> Vec:
        n = self._normal(x)
        s = norm(v)
        if not self.speed.inside(s):
            raise OutsideSupport(f"speed {s:.4g} outside the annulus")
        vn = dot(v, n) / s
        c = -vn
        if c <= self.eps:
            raise OutsideSupport(f"direction cosine {c:.4g} outside the inward cone")
        gc = self.cone.dlog(c)
        gs = self.speed.dlog(s)
        # d(-<v/|v|, n>)/dv = -(n - <v^, n> v^)/|v|
        return tuple(-gc * (nk - vn * vk / s) / s + gs * vk / s for nk, vk in zip(n, v))

    def hess_log_density(self, x: Sequence[float], v: Sequence[float], h: float = 1e-5) -> np.ndarray:
        """Hessian of ``log m`` in ``v`` by central differences of the analytic gradient."""
        d = len(v)
        out = np.zeros((d, d))
        for k in range(d):
            vp = list(v)
            vm = list(v)
            vp[k] += h
            vm[k] -= h
            out[:, k] = (np.array(self.grad_log_density(x, vp)) - np.array(self.grad_log_density(x, vm))) / (2 * h)
        return out

    def sample(self, x: Sequence[float], rng) -> Vec:
        n = self._normal(x)
        inward = tuple(-c for c in n)
        d = self.d
        for _ in range(self.cap):
            r = self.v_min + (self.v_max - self.v_min) * rng.uniform()
            if rng.uniform() * self._speed_env < self.speed(r) * r ** (d - 1):
                break
        else:
            raise RejectionBudgetExceeded("speed proposal budget exhausted")
        for _ in range(self.cap):
            if d == 2:
                phi = self._phimax * (2.0 * rng.uniform() - 1.0)
                mu = math.cos(phi)
            else:
                mu = self.eps + (1.0 - self.eps) * rng.uniform()
                phi = 2.0 * math.pi * rng.uniform()
            if rng.uniform() * self._cone_max < self.cone(mu):
                omega = cone_direction(inward, mu, phi)
                return tuple(r * c for c in omega)
        raise RejectionBudgetExceeded("direction proposal budget exhausted")


class GammaDensity:
    """Normalised bump on ``(eps, 1 - eps)`` for the collision-time control."""

    def __init__(self, cfg: ModelConfig):
        self.bump = Bump(cfg.eps_gamma, 1.0 - cfg.eps_gamma)
        self.Z = self.bump.integrate()
        self._peak = self.bump.peak()
        self.cap = cfg.rejection_cap

    def density(self, g: float) -> float:
        return self.bump(g) / self.Z

    def dlog(self, g: float) -> float:
        if not self.bump.inside(g):
            raise OutsideSupport(f"gamma = {g!r} outside the support")
        return self.bump.dlog(g)

    def d2log(self, g: float) -> float:
        if not self.bump.inside(g):
            raise OutsideSupport(f"gamma = {g!r} outside the support")
        return self.bump.d2log(g)

    def sample(self, rng) -> float:
        a, b = self.bump.a, self.bump.b
        for _ in range(self.cap):
            g = a + (b - a) * rng.uniform()
            if rng.uniform() * self._peak < self.bump(g):
                return g
        raise RejectionBudgetExceeded("gamma proposal budget exhausted")


class InitialDensity:
    """Truncated Gaussian positions times radial-bump velocities, pairwise separated.

    The normalising constants below are per particle; the extra constant
    from conditioning on separation is never needed because it cancels in
    every log-gradient.
    """

    def __init__(self, cfg: ModelConfig):
        self.d = cfg.d
        self.N = cfg.N
        self.R = cfg.R
        self.s_x = cfg.s_x
        self.sep = cfg.beta + cfg.beta_margin
        self.cap = cfg.rejection_cap
        self.v_min = cfg.v_min
        self.v_max = cfg.v_max
        self.speed = Bump(cfg.v_min, cfg.v_max)
        d = cfg.d
        s2 = cfg.s_x**2
        x, w = leggauss(_CONST_ORDER)
        r = 0.5 * cfg.R * (x + 1.0)
        self.Z_x = sphere_area(d) * 0.5 * cfg.R * float(np.dot(w, r ** (d - 1) * np.exp(-(r**2) / (2 * s2))))
        self.Z_v = sphere_area(d) * self.speed.integrate(lambda u: u ** (d - 1))
        grid = np.linspace(cfg.v_min, cfg.v_max, 4001)
        self._speed_env = 1.05 * float(np.max(self.speed.values(grid) * grid ** (d - 1)))

    def position_density(self, x: Sequence[float]) -> float:
        if dot(x, x) >= self.R * self.R:
            return 0.0
        return math.exp(-dot(x, x) / (2 * self.s_x**2)) / self.Z_x

    def velocity_density(self, v: Sequence[float]) -> float:
        return self.speed(norm(v)) / self.Z_v

    def separated(self, xs: Sequence[Sequence[float]]) -> bool:
        s2 = self.sep * self.sep
        for i in range(len(xs)):
            for j in range(i + 1, len(xs)):
                dx = [a - b for a, b in zip(xs[i], xs[j])]
                if dot(dx, dx) <= s2:
                    return False
        return True

    def log_density(self, xs, vs) -> float:
        """Log of the unnormalised joint density (``-inf`` outside the support)."""
        if not self.separated(xs):
            return -math.inf
        total = 0.0
        for x, v in zip(xs, vs):
            px = self.position_density(x)
            pv = self.velocity_density(v)
            if px == 0.0 or pv == 0.0:
                return -math.inf
            total += math.log(px) + math.log(pv)
        return total

    def grad_log(self, xs, vs) -> Tuple[List[Vec], List[Vec]]:
        """Gradients of ``log p0`` in each position and each velocity."""
        s2 = self.s_x**2
        gx, gv = [], []
        for x, v in zip(xs, vs):
            if dot(x, x) >= self.R * self.R:
                raise OutsideSupport("initial position outside the domain")
            s = norm(v)
            if not self.speed.inside(s):
                raise OutsideSupport("initial speed outside the annulus")
            gx.append(tuple(-c / s2 for c in x))
            g = self.speed.dlog(s) / s
            gv.append(tuple(g * c for c in v))
        return gx, gv

    def _sample_position(self, rng) -> Vec:
        R2 = self.R * self.R
        for _ in range(self.cap):
            x = tuple(self.s_x * rng.normal() for _ in range(self.d))
            if dot(x, x) < R2:
                return x
        raise RejectionBudgetExceeded("position proposal budget exhausted")

    def _sample_velocity(self, rng) -> Vec:
        d = self.d
        for _ in range(self.cap):
            r = self.v_min + (self.v_max - self.v_min) * rng.uniform()
            if rng.uniform() * self._speed_env < self.speed(r) * r ** (d - 1):
                break
        else:
            raise RejectionBudgetExceeded("speed proposal budget exhausted")
        while True:
            z = [rng.normal() for _ in range(d)]
            nz = norm(z)
            if nz > 1e-12:
                return tuple(r * c / nz for c in z)

    def sample(self, rng) -> Tuple[Tuple[Vec, ...], Tuple[Vec, ...]]:
        for _ in range(self.cap):
            xs = tuple(self._sample_position(rng) for _ in range(self.N))
            if self.separated(xs):
                break
        else:
            raise RejectionBudgetExceeded("separation proposal budget exhausted")
        vs = tuple(self._sample_velocity(rng) for _ in range(self.N))
        return xs, vs


class Kernels:
    """All model densities for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.collision = CollisionKernel(cfg)
        self.redistribution = RedistributionKernel(cfg)
        self.gamma = GammaDensity(cfg)
        self.initial = InitialDensity(cfg)

    def log_gradients(self, which: str) -> Callable:
        """Analytic log-gradient evaluator for ``p0``, ``g_gamma``, ``M`` or ``B``."""
        table = {
            "p0": self.initial.grad_log,
            "g_gamma": self.gamma.dlog,
            "M": self.redistribution.grad_log_density,
            "B": self.collision.grad_log_B,
        }
        try:
            return table[which]
        except KeyError:
            raise ValueError(f"unknown density {which!r}; expected one of {sorted(table)}") from None


@lru_cache(maxsize=16)
def get_kernels(cfg: ModelConfig) -> Kernels:
    return Kernels(cfg)
