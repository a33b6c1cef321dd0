"""Per-class integration-by-parts weights and density estimates.

For a class ``(I, m)`` and a particle ``i``, the velocity ``v_i(t)`` was set
by one coordinate slot: the last reflection of ``i``, the last collision
involving ``i``, or the initial velocity when ``i`` has no event before
``t``. Moving that slot along ``+-e_r`` moves ``v_i(t)`` by ``e_r`` and
``x_i(t)`` by ``(t - rho) e_r`` while leaving the rest of the path up to
``t`` untouched (as long as the class is kept). A :class:`SlotView` holds
that local picture so that cutoffs, weights and targets can be evaluated as
functions of the slot vector ``u``.

Cutoffs multiply plateau bumps on the slot coordinates with smooth margin
factors that vanish before the class can change along the slot direction:
the moving particle's next wall hit approaching ``t``, and the moving
particle coming within ``beta`` of another particle on ``[rho, t]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .calculus import d_weight, z_weight
from .config import ModelConfig
from .errors import (
    DepthExceeded,
    HorizonTooClose,
    InsufficientPaths,
    NotPerturbable,
    OutsideSupport,
    UnsupportedDirection,
)
from .geometry import positive_root
from .kernels import Kernels, get_kernels
from .reduced import Direction, EventOrderClass, ReducedTrajectory, classify
from .simulator import Collision, Reflection

# ---------------------------------------------------------------------------
# directions


def _last_change(rt: ReducedTrajectory, cls: EventOrderClass, i: int):
    """Index into ``cls.I`` of the last event before ``t`` that set ``v_i``."""
    for n in range(cls.m - 1, -1, -1):
        ident = cls.I[n]
        if ident[0] == "R" and ident[1] == i:
            return n
        if ident[0] == "C" and i in (ident[1], ident[2]):
            return n
    return None


def last_event_direction(rt: ReducedTrajectory, cls: EventOrderClass, i: int, r: int) -> Direction:
    """Unit direction on the slot that set ``v_i(t)``.

    A collision where ``i`` is the higher index is moved along ``-e_r`` on
    the lower particle's slot, so that ``v_i(t)`` moves by ``+e_r`` either
    way.
    """
    n = _last_change(rt, cls, i)
    if n is None:
        raise NotPerturbable(f"v_{i}(t) is still the initial velocity in class {cls.key}")
    d = rt.d
    unit = tuple(1.0 if q == r else 0.0 for q in range(d))
    ident = cls.I[n]
    if ident[0] == "R":
        return Direction(alpha_r={(ident[1], ident[2]): unit})
    if ident[1] == i:
        return Direction(alpha_c={ident[1:]: unit})
    return Direction(alpha_c={ident[1:]: tuple(-c for c in unit)})


def initial_velocity_direction(rt: ReducedTrajectory, i: int, r: int) -> Direction:
    N, d = rt.N, rt.d
    a0 = [0.0] * (2 * N * d)
    a0[N * d + i * d + r] = 1.0
    return Direction(a0=tuple(a0))


def target_direction(rt: ReducedTrajectory, cls: EventOrderClass, i: int, r: int) -> Direction:
    """Last-event direction, falling back to the initial velocity slot."""
    try:
        return last_event_direction(rt, cls, i, r)
    except NotPerturbable:
        return initial_velocity_direction(rt, i, r)


# ---------------------------------------------------------------------------
# local picture around the perturbed slot


def _smoothstep(z: float) -> float:
    """C-infinity step: 0 for z <= 0, 1 for z >= 1."""
    if z <= 0.0:
        return 0.0
    if z >= 1.0:
        return 1.0
    a = math.exp(-1.0 / z)
    b = math.exp(-1.0 / (1.0 - z))
    return a / (a + b)


def _min_dist_sq(dx, dv, t0: float, t1: float) -> float:
    """``min_{s in [0, t1 - t0]} |dx + s dv|^2``."""
    a = sum(c * c for c in dv)
    span = t1 - t0
    s = 0.0
    if a > 0.0:
        s = -sum(p * q for p, q in zip(dx, dv)) / a
        s = min(max(s, 0.0), span)
    return sum((p + s * q) ** 2 for p, q in zip(dx, dv))


@dataclass
class SlotView:
    """Everything about one path that a class cutoff and weight need.

    ``kind`` is ``"b"`` (reflection slot), ``"a"`` (collision slot) or
    ``"v0"`` (initial velocity). ``sign`` is the direction sign on the slot.
    ``movers`` lists ``(particle, start position, velocity map)``, where the
    map sends the slot vector to that particle's velocity on ``[rho, t]``.
    """

    cfg: ModelConfig
    kernels: Kernels
    kind: str
    key: Tuple
    i: int
    sign: float
    u0: np.ndarray
    rho: float
    t: float
    movers: List[Tuple[int, Tuple[float, ...], Callable]]
    others: Dict[int, List[Tuple[float, float, Tuple[float, ...], Tuple[float, ...]]]]
    x_hit: Optional[Tuple[float, ...]] = None
    v_pre: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None
    skip_pair: Optional[Tuple[int, int]] = None

    def velocity(self, u) -> np.ndarray:
        for p, _, vmap in self.movers:
            if p == self.i:
                return np.asarray(vmap(u), dtype=float)
        raise AssertionError("target particle is not moved by its slot")

    def position(self, u) -> np.ndarray:
        for p, x, vmap in self.movers:
            if p == self.i:
                return np.asarray(x) + (self.t - self.rho) * np.asarray(vmap(u))
        raise AssertionError("target particle is not moved by its slot")

    def wall_gap(self, u) -> float:
        """Time from ``t`` to the earliest next wall hit of a moving particle."""
        R2 = self.cfg.R ** 2
        best = math.inf
        for _, x, vmap in self.movers:
            v = vmap(u)
            a = sum(c * c for c in v)
            b = 2.0 * sum(p * q for p, q in zip(x, v))
            c = sum(p * p for p in x) - R2
            if c >= 0.0 and b >= 0.0:
                return -math.inf  # leaving through the wall already
            best = min(best, self.rho + positive_root(a, b, min(c, 0.0)) - self.t)
        return best

    def pair_gaps(self, u) -> List[float]:
        """Per linear piece: smallest distance minus ``beta`` between a moving particle and another one.

        Kept as a list so the cutoff can take a product of smooth factors;
        a minimum over pieces would put kinks into the cutoff.
        """
        beta = self.cfg.beta
        out = []
        moved = [(p, x, tuple(vmap(u))) for p, x, vmap in self.movers]
        for p, x, v in moved:
            for q, segs in self.others.items():
                for t0, t1, xq, vq in segs:
                    xp = tuple(a + (t0 - self.rho) * b for a, b in zip(x, v))
                    dx = tuple(a - b for a, b in zip(xp, xq))
                    dv = tuple(a - b for a, b in zip(v, vq))
                    out.append(math.sqrt(_min_dist_sq(dx, dv, t0, t1)) - beta)
        if len(moved) == 2 and self.skip_pair is None:
            (p, x, v), (q, y, w) = moved
            dx = tuple(a - b for a, b in zip(x, y))
            dv = tuple(a - b for a, b in zip(v, w))
            out.append(math.sqrt(_min_dist_sq(dx, dv, self.rho, self.t)) - beta)
        return out

    def pair_gap(self, u) -> float:
        return min(self.pair_gaps(u), default=math.inf)

    def support_coords(self, u) -> List[Tuple[float, float, float]]:
        """``(value, lower edge, upper edge)`` of the slot density's support coordinates."""
        s = math.sqrt(sum(c * c for c in u))
        speed = (s, self.cfg.v_min, self.cfg.v_max)
        if self.kind == "b":
            R = math.sqrt(sum(c * c for c in self.x_hit))
            c = -sum(p * q for p, q in zip(self.x_hit, u)) / (R * s) if s > 0.0 else 0.0
            return [speed, (c, self.cfg.eps_cone, math.inf)]
        if self.kind == "v0":
            return [speed]
        return []

    def z(self, u) -> float:
        """Log-density derivative of the slot along the signed direction."""
        d = len(self.u0)
        try:
            if self.kind == "b":
                g = self.kernels.redistribution.grad_log_density(self.x_hit, tuple(u))
            elif self.kind == "v0":
                s = math.sqrt(sum(c * c for c in u))
                sp = self.kernels.initial.speed
                if not sp.inside(s):
                    return 0.0
                g = tuple(sp.dlog(s) / s * c for c in u)
            else:
                vi, vj = self.v_pre
                diff = np.subtract(vi, u)
                e = diff / np.linalg.norm(diff)
                g = d_weight(vi, vj, e, self.kernels.collision.grad_log_B)
        except OutsideSupport:
            return 0.0
        return self.sign * float(g[self.r])

    r: int = 0


def slot_view(rt: ReducedTrajectory, cls: EventOrderClass, i: int, r: int, cfg: ModelConfig, kernels: Optional[Kernels] = None, t: Optional[float] = None) -> SlotView:
    """Local picture of ``rt`` around the slot that set ``v_i(t)``."""
    kernels = kernels or get_kernels(cfg)
    traj = rt.source
    if traj is None:
        raise ValueError("reduced trajectory has no attached source path")
    t = rt.t_max if t is None else t
    n = _last_change(rt, cls, i)
    N = rt.N
    others_ids: List[int]
    if n is None:
        rho = 0.0
        u0 = np.asarray(rt.v0[i], dtype=float)
        movers = [(i, tuple(rt.x0[i]), lambda u: tuple(u))]
        kind, key, sign, x_hit, v_pre, skip = "v0", (i,), 1.0, None, None, None
        others_ids = [q for q in range(N) if q != i]
    else:
        ident = cls.I[n]
        ev = traj.events[n]
        rho = ev.time
        if ident[0] == "R":
            u0 = np.asarray(ev.v_post, dtype=float)
            movers = [(i, tuple(ev.x_hit), lambda u: tuple(u))]
            kind, key, sign, x_hit, v_pre, skip = "b", ident[1:], 1.0, tuple(ev.x_hit), None, None
            others_ids = [q for q in range(N) if q != i]
        else:
            _, a, b, k = ident
            u0 = np.asarray(ev.v_post[0], dtype=float)
            S = tuple(p + q for p, q in zip(*ev.v_pre))
            xa = tuple(traj_pos(traj, a, rho))
            xb = tuple(traj_pos(traj, b, rho))
            movers = [
                (a, xa, lambda u: tuple(u)),
                (b, xb, lambda u, S=S: tuple(s_ - c for s_, c in zip(S, u))),
            ]
            kind, key, x_hit, v_pre = "a", (a, b, k), None, ev.v_pre
            sign = 1.0 if i == a else -1.0
            skip = (a, b)
            others_ids = [q for q in range(N) if q not in (a, b)]
    others = {q: particle_segments(traj, q, rho, t) for q in others_ids}
    view = SlotView(cfg, kernels, kind, key, i, sign, u0, rho, t, movers, others, x_hit, v_pre, skip)
    view.r = r
    return view


def traj_pos(traj, p: int, s: float) -> np.ndarray:
    return np.asarray(traj.positions_at(s)[p])


def particle_segments(traj, p: int, t0: float, t1: float):
    """Linear pieces ``(start, end, position at start, velocity)`` of particle ``p`` on ``[t0, t1]``."""
    cuts = [ev.time for ev in traj.events if t0 < ev.time < t1 and (ev.i == p or (isinstance(ev, Collision) and ev.j == p))]
    bounds = [t0] + cuts + [t1]
    segs = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        mid = 0.5 * (a + b)
        x = traj.positions_at(a)[p] if a > 0.0 else traj.x0[p]
        v = traj.velocities_at(mid)[p]
        segs.append((a, b, tuple(x), tuple(v)))
    return segs


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True)
class ClassCutoff:
    """Smooth cutoff for one class and target particle.

    ``windows`` holds ``(lo, hi)`` per slot coordinate; the factor is 1 on
    the central ``plateau`` fraction of each window and decays smoothly to 0
    at its ends. Margin factors vanish when the wall gap, the pair gap or
    the time since the slot event drop below their margins.
    """

    key: str
    i: int
    windows: Tuple[Tuple[float, float], ...]
    plateau: float = 0.5
    wall_margin: float = 0.3
    pair_margin: float = 0.2
    time_margin: float = 0.05
    support_margin: float = 0.15

    def _window_factor(self, u) -> float:
        out = 1.0
        edge = 0.5 * (1.0 - self.plateau)
        for (lo, hi), x in zip(self.windows, u):
            width = hi - lo
            if width <= 0.0:
                return 0.0
            z = (x - lo) / width
            if z <= 0.0 or z >= 1.0:
                return 0.0
            out *= _smoothstep(z / edge) * _smoothstep((1.0 - z) / edge)
            if out == 0.0:
                return 0.0
        return out

    def time_factor(self, view: SlotView) -> float:
        return _smoothstep((view.t - view.rho) / self.time_margin - 1.0)

    def value_u(self, view: SlotView, u) -> float:
        g = self._window_factor(u)
        if g == 0.0:
            return 0.0
        g *= self.time_factor(view)
        if g == 0.0:
            return 0.0
        # stay clear of the slot density's support edges, where its log-derivatives blow up
        for val, lo, hi in view.support_coords(u):
            g *= _smoothstep((val - lo) / self.support_margin - 1.0)
            if hi < math.inf:
                g *= _smoothstep((hi - val) / self.support_margin - 1.0)
            if g == 0.0:
                return 0.0
        g *= _smoothstep(view.wall_gap(u) / self.wall_margin)
        if g == 0.0:
            return 0.0
        for gap in view.pair_gaps(u):
            g *= _smoothstep(gap / self.pair_margin)
            if g == 0.0:
                return 0.0
        return g

    def value(self, rt: ReducedTrajectory, cfg: ModelConfig, cls: Optional[EventOrderClass] = None) -> float:
        cls = cls or classify(rt)
        if cls.key != self.key:
            return 0.0
        view = slot_view(rt, cls, self.i, 0, cfg)
        return self.value_u(view, view.u0)


def fit_cutoff(key: str, i: int, slot_samples: Sequence[Sequence[float]], plateau: float = 0.5, **margins) -> ClassCutoff:
    """Cutoff whose windows are the empirical ranges of the slot coordinates."""
    arr = np.asarray(slot_samples, dtype=float)
    if arr.ndim != 2 or len(arr) < 2:
        raise InsufficientPaths(f"class {key}: need at least two samples to fit a cutoff")
    windows = tuple((float(lo), float(hi)) for lo, hi in zip(arr.min(axis=0), arr.max(axis=0)))
    return ClassCutoff(key, i, windows, plateau, **margins)


# ---------------------------------------------------------------------------
# weights

FD_STEP = 1e-3


def _fd(fun: Callable[[np.ndarray], float], u: np.ndarray, direction: np.ndarray, h: float) -> float:
    """Five-point central difference of ``fun`` along ``direction``."""
    f1 = fun(u + h * direction)
    f_1 = fun(u - h * direction)
    f2 = fun(u + 2 * h * direction)
    f_2 = fun(u - 2 * h * direction)
    return (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h)


def _weight(view: SlotView, G: ClassCutoff, seq: Tuple[int, ...], h: float) -> float:
    """``W_0 = G``, ``W_k = -(d_{r_k} W_{k-1} + z_{r_k} W_{k-1})`` along the signed slot directions.

    Stencil points are keyed by integer offsets (in units of ``h`` along the
    signed axes) so that nested differences reuse cutoff evaluations.
    """
    d = len(view.u0)
    step = view.sign * h
    g_cache: Dict[Tuple[int, ...], float] = {}
    z_cache: Dict[Tuple[Tuple[int, ...], int], float] = {}

    def point(off):
        return view.u0 + step * np.asarray(off, dtype=float)

    def g_at(off):
        v = g_cache.get(off)
        if v is None:
            v = g_cache[off] = G.value_u(view, point(off))
        return v

    def z_at(off, r):
        key = (off, r)
        v = z_cache.get(key)
        if v is None:
            saved = view.r
            view.r = r
            v = z_cache[key] = view.z(point(off))
            view.r = saved
        return v

    def shift(off, r, k):
        lst = list(off)
        lst[r] += k
        return tuple(lst)

    def w(level, off):
        if level == 0:
            return g_at(off)
        r = seq[level - 1]
        here = w(level - 1, off)
        dw = (8.0 * (w(level - 1, shift(off, r, 1)) - w(level - 1, shift(off, r, -1))) - (w(level - 1, shift(off, r, 2)) - w(level - 1, shift(off, r, -2)))) / (12.0 * h)
        z = z_at(off, r) if here != 0.0 else 0.0
        return -(dw + z * here)

    return w(len(seq), (0,) * d)


def _resolve(rt, cls, i, cfg, kernels, view):
    if view is None:
        view = slot_view(rt, cls, i, 0, cfg, kernels)
    return view


def H_v(rt: ReducedTrajectory, cls: EventOrderClass, i: int, r: int, G: ClassCutoff, cfg: ModelConfig, kernels: Optional[Kernels] = None, view: Optional[SlotView] = None) -> float:
    """``delta(G h)`` for ``h`` the target direction of ``v_{(i,r)}(t)``; zero off the class.

    The cutoff derivative is a five-point difference along the slot; the
    log-density term is ``z_weight`` of the direction.
    """
    if cls.key != G.key:
        return 0.0
    view = _resolve(rt, cls, i, cfg, kernels, view)
    g = G.value_u(view, view.u0)
    direction = np.zeros(len(view.u0))
    direction[r] = view.sign
    dg = _fd(lambda uu: G.value_u(view, uu), view.u0, direction, FD_STEP)
    if g == 0.0:
        return -dg
    H = target_direction(rt, cls, i, r)
    return -(dg + z_weight(rt, H, cfg, kernels) * g)


def H_x(rt: ReducedTrajectory, cls: EventOrderClass, i: int, r: int, G: ClassCutoff, cfg: ModelConfig, kernels: Optional[Kernels] = None, view: Optional[SlotView] = None) -> float:
    """``delta(G h / (t - rho))``: moving the slot by ``e_r`` moves ``x_i(t)`` by ``(t - rho) e_r``.

    ``rho`` is fixed along the slot direction, so the scale factor has no
    derivative of its own.
    """
    if cls.key != G.key:
        return 0.0
    view = _resolve(rt, cls, i, cfg, kernels, view)
    if G.value_u(view, view.u0) == 0.0 and _fd(lambda uu: G.value_u(view, uu), view.u0, _unit(len(view.u0), r, view.sign), FD_STEP) == 0.0:
        return 0.0
    lag = view.t - view.rho
    if lag < G.time_margin:
        raise HorizonTooClose(f"t - rho = {lag:.3g} below the cutoff time margin {G.time_margin}")
    return H_v(rt, cls, i, r, G, cfg, kernels, view) / lag


def _unit(d: int, r: int, sign: float) -> np.ndarray:
    out = np.zeros(d)
    out[r] = sign
    return out


def alpha_sequence(alpha: Sequence[int], N: int, d: int) -> Tuple[int, Tuple[int, ...]]:
    """Split a multi-index over ``N*d`` velocity components into ``(particle, coordinate order)``."""
    if len(alpha) != N * d:
        raise ValueError(f"multi-index must have {N * d} entries")
    parts = {}
    seq: List[int] = []
    for idx, k in enumerate(alpha):
        if k < 0:
            raise ValueError("multi-index entries must be non-negative")
        if k:
            parts[idx // d] = True
            seq += [idx % d] * k
    if len(parts) != 1:
        raise UnsupportedDirection("multi-index must act on a single particle's velocity")
    return next(iter(parts)), tuple(seq)


def H_alpha(
    rt: ReducedTrajectory,
    cls: EventOrderClass,
    seq: Sequence[int],
    i: int,
    G: ClassCutoff,
    cfg: ModelConfig,
    kernels: Optional[Kernels] = None,
    max_depth: int = 3,
    view: Optional[SlotView] = None,
    target: str = "v",
) -> float:
    """Iterated weight: ``H_{(r_k)}(H_{(r_{k-1})}(... H_{(r_1)}(G)))`` for particle ``i``.

    ``seq`` lists the coordinates in application order. For ``target='x'``
    each level carries the factor ``1 / (t - rho)``.
    """
    seq = tuple(seq)
    if not seq:
        raise ValueError("need at least one derivative")
    if len(seq) > max_depth:
        raise DepthExceeded(f"|alpha| = {len(seq)} exceeds max depth {max_depth}")
    if cls.key != G.key:
        return 0.0
    view = _resolve(rt, cls, i, cfg, kernels, view)
    w = _weight(view, G, seq, FD_STEP)
    if target == "x":
        lag = view.t - view.rho
        if w != 0.0 and lag < G.time_margin:
            raise HorizonTooClose(f"t - rho = {lag:.3g} below the cutoff time margin")
        w /= lag ** len(seq)
    return w


# ---------------------------------------------------------------------------
# kernel density estimates


def silverman_bandwidth(x: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-axis Silverman rule ``sigma * (4 / ((p + 2) n))^(1/(p + 4))``."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    sd = x.std(axis=0, ddof=1)
    return sd * (4.0 / ((p + 2.0) * n)) ** (1.0 / (p + 4.0))


def gaussian_kde(samples: np.ndarray, grid: np.ndarray, n_total: int, bandwidth: np.ndarray, weights: Optional[np.ndarray] = None, chunk: int = 4096):
    """Product-Gaussian KDE of the (sub-)probability measure ``sum_k w_k delta_{x_k} / n_total``.

    Returns ``(estimate, standard error, derivative along axis 0)`` on the
    grid. Standard errors treat the ``n_total`` paths as i.i.d. with the
    unsampled paths contributing zero.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Gd = np.asarray(grid, dtype=float)
    if Gd.ndim == 1:
        Gd = Gd[:, None]
    h = np.asarray(bandwidth, dtype=float).reshape(-1)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    norm = 1.0 / (np.prod(h) * (2.0 * math.pi) ** (X.shape[1] / 2.0))
    s1 = np.zeros(len(Gd))
    s2 = np.zeros(len(Gd))
    sd = np.zeros(len(Gd))
    for a in range(0, len(X), chunk):
        Z = (Gd[:, None, :] - X[None, a : a + chunk, :]) / h
        K = norm * np.exp(-0.5 * np.sum(Z * Z, axis=2)) * w[None, a : a + chunk]
        s1 += K.sum(axis=1)
        s2 += (K * K).sum(axis=1)
        sd += (-Z[:, :, 0] / h[0] * K).sum(axis=1)
    mean = s1 / n_total
    var = np.maximum(s2 / n_total - mean * mean, 0.0)
    return mean, np.sqrt(var / n_total), sd / n_total


@dataclass
class DensityTable:
    key: str
    target: str
    particle: int
    axis: int
    n_total: int
    n_class: int
    bandwidth: float
    rows: List[Tuple[float, ...]]
    columns: Tuple[str, ...] = (
        "y",
        "kde",
        "kde_stderr",
        "ibp_derivative",
        "ibp_stderr",
        "kde_g",
        "kde_g_derivative",
        "kde_g_derivative_stderr",
    )


def class_density(
    samples: Sequence[Tuple[float, float, float]],
    n_total: int,
    key: str,
    target: str,
    particle: int,
    axis: int,
    grid: Sequence[float],
    n_min: int = 1000,
) -> DensityTable:
    """Class-restricted density of one target component, with IBP derivatives.

    ``samples`` holds ``(y, G, H)`` for every in-class path: the target
    component, the cutoff value and the first-order weight. ``kde`` is the
    plain class-restricted estimate; ``kde_g`` weights by ``G``. Its
    derivative is estimated twice: by differentiating the kernel, and by the
    weight identity ``d/dy E[K(y - Y) G] = -E[K(y - Y) H]``.
    """
    if len(samples) < n_min:
        raise InsufficientPaths(f"class {key}: {len(samples)} paths, need {n_min}")
    arr = np.asarray(samples, dtype=float)
    y, g, hw = arr[:, 0], arr[:, 1], arr[:, 2]
    grid = np.asarray(grid, dtype=float)
    bw = silverman_bandwidth(y)
    kde, kde_se, _ = gaussian_kde(y, grid, n_total, bw)
    kg, _, kg_d = gaussian_kde(y, grid, n_total, bw, weights=g)
    ibp, ibp_se, _ = gaussian_kde(y, grid, n_total, bw, weights=-hw)
    # standard error of the kernel-derivative estimate
    Z = (grid[:, None] - y[None, :]) / bw[0]
    Kd = -Z / bw[0] * np.exp(-0.5 * Z * Z) / (bw[0] * math.sqrt(2 * math.pi)) * g[None, :]
    m = Kd.sum(axis=1) / n_total
    kg_d_se = np.sqrt(np.maximum((Kd * Kd).sum(axis=1) / n_total - m * m, 0.0) / n_total)
    rows = [tuple(float(c) for c in row) for row in zip(grid, kde, kde_se, ibp, ibp_se, kg, kg_d, kg_d_se)]
    return DensityTable(key, target, particle, axis, n_total, len(arr), float(bw[0]), rows)


def write_density_csv(table: DensityTable, path, config_hash: str) -> None:
    """Comment header (config hash, class, sizes), a column-name row, then one row per grid point.

    Numbers use 17 significant digits so they round-trip exactly.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash {config_hash}\n")
        fh.write(f"# class {table.key} target {table.target} particle {table.particle} axis {table.axis}\n")
        fh.write(f"# n_total {table.n_total} n_class {table.n_class} bandwidth {table.bandwidth:.17g}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([f"{float(c):.17g}" for c in row])


# ---------------------------------------------------------------------------
# quadrature oracle for a single particle without events


def survival_fraction(cfg: ModelConfig, speed: float, t: float, order: int = 200) -> float:
    """``P(|x + t v| < R)`` for ``x`` from the position factor of ``p0`` and ``|v| = speed``.

    By rotational symmetry the answer depends on ``|v|`` only. For each
    polar angle of ``x`` the admissible radii form an interval obtained from
    a quadratic; the radial integral uses Gauss-Legendre on that interval.
    """
    k = get_kernels(cfg)
    R, s2 = cfg.R, cfg.s_x**2
    d = cfg.d
    if d != 2:
        raise ValueError("the single-particle oracle is implemented for d = 2")
    gx, gw = np.polynomial.legendre.leggauss(order)
    th = math.pi * (gx + 1.0)
    tw = math.pi * gw
    total = 0.0
    v = np.array([speed * t, 0.0])
    for a, aw in zip(th, tw):
        e = np.array([math.cos(a), math.sin(a)])
        # |r e + v|^2 < R^2  <=>  r^2 + 2 r <e, v> + |v|^2 - R^2 < 0
        b = float(e @ v)
        c = float(v @ v) - R * R
        disc = b * b - c
        if disc <= 0.0:
            continue
        lo = max(0.0, -b - math.sqrt(disc))
        hi = min(R, -b + math.sqrt(disc))
        if hi <= lo:
            continue
        r = 0.5 * (hi - lo) * (gx + 1.0) + lo
        rw = 0.5 * (hi - lo) * gw
        total += aw * float(np.sum(rw * r * np.exp(-r * r / (2 * s2))))
    return total / k.initial.Z_x


def m0_velocity_density(cfg: ModelConfig, v: Sequence[float], t: float, order: int = 200) -> float:
    """Density of ``v(t)`` restricted to paths with no event before ``t`` (``N = 1``)."""
    k = get_kernels(cfg)
    s = float(np.linalg.norm(v))
    pv = k.initial.velocity_density(tuple(v))
    if pv == 0.0:
        return 0.0
    return pv * survival_fraction(cfg, s, t, order)


def m0_smoothed_density(cfg: ModelConfig, grid: np.ndarray, bandwidth: np.ndarray, t: float, order: int = 96, ang_order: int = 256) -> np.ndarray:
    """Gaussian-smoothed oracle ``(K_h * q)`` on ``grid`` by polar quadrature over the annulus."""
    k = get_kernels(cfg)
    gx, gw = np.polynomial.legendre.leggauss(order)
    r = 0.5 * (cfg.v_max - cfg.v_min) * (gx + 1.0) + cfg.v_min
    rw = 0.5 * (cfg.v_max - cfg.v_min) * gw
    radial = np.array([k.initial.speed(rr) / k.initial.Z_v * survival_fraction(cfg, rr, t) for rr in r])
    ang = 2.0 * math.pi * np.arange(ang_order) / ang_order
    aw = 2.0 * math.pi / ang_order
    P = np.stack([np.outer(r, np.cos(ang)).ravel(), np.outer(r, np.sin(ang)).ravel()], axis=1)
    W = (np.outer(rw * r * radial, np.full(ang_order, aw))).ravel()
    h = np.asarray(bandwidth, dtype=float)
    out = np.zeros(len(grid))
    norm = 1.0 / (np.prod(h) * 2.0 * math.pi)
    for q, g in enumerate(np.asarray(grid)):
        Z = (g[None, :] - P) / h
        out[q] = norm * float(np.sum(W * np.exp(-0.5 * np.sum(Z * Z, axis=1))))
    return out
