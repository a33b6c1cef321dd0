"""Reduced trajectories, replay, and event-order classes.

A reduced trajectory keeps only what cannot be recomputed from geometry: the
initial state, one timing control per overlap window, the post-collision
velocity of the lower-indexed particle of each collision, and each reflection
velocity up to sign. :func:`reconstruct` replays these through the same event
engine that produced the path.

Class keys
----------
Particles are numbered from 0. A key reads ``EVENTS|m=M`` where ``EVENTS`` is
``-`` for a path without events, or a ``;``-separated list of
``C(i,j,k)`` (k-th collision of pair i<j) and ``R(i,l)`` (l-th reflection of
particle i) in time order, and ``M`` counts the events before the horizon.
Example: ``R(2,1);C(0,1,1)|m=2``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig
from .errors import (
    ContainsSuppressedCollision,
    HorizonOnEvent,
    InvalidCoordinate,
    OrderChanged,
    PdmpError,
)
from .kernels import Kernels, get_kernels
from .simulator import Collision, EventEngine, InjectedOutcomes, Reflection, Trajectory

Vec = Tuple[float, ...]
Identity = Tuple  # ("C", i, j, k) or ("R", i, l)


@dataclass(frozen=True)
class ReducedTrajectory:
    x0: Tuple[Vec, ...]
    v0: Tuple[Vec, ...]
    gammas: Dict[Tuple[int, int, int], float]
    collision_vs: Dict[Tuple[int, int, int], Vec]
    reflection_vs: Dict[Tuple[int, int], Vec]
    event_order: Tuple[Tuple[Identity, float], ...]
    t_max: float
    t_next: float = math.inf
    source: Optional[Trajectory] = field(default=None, compare=False, repr=False)

    @property
    def N(self) -> int:
        return len(self.x0)

    @property
    def d(self) -> int:
        return len(self.x0[0])

    @property
    def identities(self) -> Tuple[Identity, ...]:
        return tuple(ident for ident, _ in self.event_order)

    @property
    def times(self) -> Tuple[float, ...]:
        return tuple(t for _, t in self.event_order)

    def y0_flat(self) -> np.ndarray:
        return np.array([c for x in self.x0 for c in x] + [c for v in self.v0 for c in v])

    def coordinates(self):
        """Coordinate tuple ``(y0, gammas, collision_vs, reflection_vs)``."""
        return (self.x0, self.v0), self.gammas, self.collision_vs, self.reflection_vs


@dataclass(frozen=True)
class Direction:
    """A finitely supported perturbation direction.

    ``a0`` is laid out as ``x0`` flattened particle by particle, followed by
    ``v0`` in the same order.
    """

    a0: Optional[Tuple[float, ...]] = None
    c: Dict[Tuple[int, int, int], float] = field(default_factory=dict)
    alpha_c: Dict[Tuple[int, int, int], Vec] = field(default_factory=dict)
    alpha_r: Dict[Tuple[int, int], Vec] = field(default_factory=dict)

    def scaled(self, s: float) -> "Direction":
        return Direction(
            None if self.a0 is None else tuple(s * a for a in self.a0),
            {k: s * v for k, v in self.c.items()},
            {k: tuple(s * a for a in v) for k, v in self.alpha_c.items()},
            {k: tuple(s * a for a in v) for k, v in self.alpha_r.items()},
        )

    def __add__(self, other: "Direction") -> "Direction":
        if self.a0 is None:
            a0 = other.a0
        elif other.a0 is None:
            a0 = self.a0
        else:
            a0 = tuple(a + b for a, b in zip(self.a0, other.a0))

        def merge(p, q, vec):
            out = dict(p)
            for k, v in q.items():
                if k in out:
                    out[k] = tuple(a + b for a, b in zip(out[k], v)) if vec else out[k] + v
                else:
                    out[k] = v
            return out

        return Direction(a0, merge(self.c, other.c, False), merge(self.alpha_c, other.alpha_c, True), merge(self.alpha_r, other.alpha_r, True))

    def norm2(self) -> float:
        tot = sum(a * a for a in self.a0) if self.a0 is not None else 0.0
        tot += sum(c * c for c in self.c.values())
        tot += sum(a * a for v in self.alpha_c.values() for a in v)
        tot += sum(a * a for v in self.alpha_r.values() for a in v)
        return tot

    def is_zero(self) -> bool:
        return self.norm2() == 0.0


def reduce(traj: Trajectory) -> ReducedTrajectory:
    """Extract reduced coordinates from a full trajectory."""
    if traj.has_suppressed:
        raise ContainsSuppressedCollision("trajectory contains a collision suppressed as too slow")
    gammas = {(w.i, w.j, w.k): w.gamma for w in traj.windows}
    cvs, rvs, order = {}, {}, []
    for ev in traj.events:
        if isinstance(ev, Collision):
            cvs[(ev.i, ev.j, ev.k)] = ev.v_post[0]
            order.append((("C", ev.i, ev.j, ev.k), ev.sigma))
        else:
            rvs[(ev.i, ev.l)] = ev.v_post
            order.append((("R", ev.i, ev.l), ev.tau))
    return ReducedTrajectory(traj.x0, traj.v0, gammas, cvs, rvs, tuple(order), traj.t_max, traj.t_next, traj)


def reconstruct(
    y0: Tuple[Sequence[Sequence[float]], Sequence[Sequence[float]]],
    gammas: Dict,
    eta: Tuple[Dict, Dict],
    cfg: ModelConfig,
    kernels: Optional[Kernels] = None,
) -> Trajectory:
    """Replay coordinates through the event engine.

    ``eta`` is ``(collision_vs, reflection_vs)``; reflection entries may use
    either representative of their sign class.
    """
    x0, v0 = y0
    cvs, rvs = eta
    for v in v0:
        s2 = sum(c * c for c in v)
        if not cfg.v_min**2 < s2 < cfg.v_max**2:
            raise InvalidCoordinate("initial velocity outside the annulus")
    for x in x0:
        if not sum(c * c for c in x) < cfg.R**2:
            raise InvalidCoordinate("initial position outside the domain")
    lo, hi = cfg.eps_gamma, 1.0 - cfg.eps_gamma
    for key, g in gammas.items():
        if not lo < g < hi:
            raise InvalidCoordinate(f"timing control {key} outside ({lo}, {hi})")
    engine = EventEngine(cfg, kernels or get_kernels(cfg))
    return engine.run(x0, v0, InjectedOutcomes(gammas, cvs, rvs), validate=True)


def reconstruct_reduced(rt: ReducedTrajectory, cfg: ModelConfig, kernels: Optional[Kernels] = None) -> Trajectory:
    return reconstruct((rt.x0, rt.v0), rt.gammas, (rt.collision_vs, rt.reflection_vs), cfg, kernels)


def same_path(a: Trajectory, b: Trajectory, time_tol: float = 0.0) -> bool:
    """Event-for-event equality; impact directions are not compared.

    Times may differ by ``time_tol``; velocities and initial state must match
    bitwise.
    """
    if a.x0 != b.x0 or a.v0 != b.v0 or len(a.events) != len(b.events):
        return False
    for p, q in zip(a.events, b.events):
        if p.identity != q.identity or abs(p.time - q.time) > time_tol or p.v_post != q.v_post or p.v_pre != q.v_pre:
            return False
    return True


def realized_reflections(rt: ReducedTrajectory, cfg: ModelConfig) -> Dict[Tuple[int, int], Vec]:
    """Reflection velocities with the realised (inward) sign."""
    traj = rt.source if rt.source is not None else reconstruct_reduced(rt, cfg)
    return {(ev.i, ev.l): ev.v_post for ev in traj.events if isinstance(ev, Reflection)}


def perturbed_coordinates(rt: ReducedTrajectory, H: Direction, s: float, cfg: ModelConfig):
    """Coordinates ``(y0 + s a0; gammas + s c; eta (+) s alpha)``.

    Collision slots are shifted additively; reflection slots shift the
    realised representative, which keeps the sign class well defined.
    """
    x0, v0 = rt.x0, rt.v0
    if H.a0 is not None and s != 0.0:
        N, d = rt.N, rt.d
        a = H.a0
        x0 = tuple(tuple(x0[p][r] + s * a[p * d + r] for r in range(d)) for p in range(N))
        v0 = tuple(tuple(v0[p][r] + s * a[N * d + p * d + r] for r in range(d)) for p in range(N))
    gammas = dict(rt.gammas)
    cvs = dict(rt.collision_vs)
    rvs = dict(rt.reflection_vs)
    if s != 0.0:
        for key, c in H.c.items():
            if key not in gammas:
                raise InvalidCoordinate(f"direction perturbs absent timing control {key}")
            gammas[key] = gammas[key] + s * c
        for key, al in H.alpha_c.items():
            if key not in cvs:
                raise InvalidCoordinate(f"direction perturbs absent collision slot {key}")
            cvs[key] = tuple(u + s * a for u, a in zip(cvs[key], al))
        if H.alpha_r:
            real = realized_reflections(rt, cfg)
            for key, al in H.alpha_r.items():
                if key not in real:
                    raise InvalidCoordinate(f"direction perturbs absent reflection slot {key}")
                rvs[key] = tuple(u + s * a for u, a in zip(real[key], al))
    return (x0, v0), gammas, (cvs, rvs)


def flow(rt: ReducedTrajectory, H: Direction, s: float, cfg: ModelConfig, kernels: Optional[Kernels] = None) -> ReducedTrajectory:
    """Move along ``H`` by ``s`` and replay; the event order must not change."""
    if s == 0.0:
        return rt
    y0, gammas, eta = perturbed_coordinates(rt, H, s, cfg)
    try:
        traj = reconstruct(y0, gammas, eta, cfg, kernels)
    except PdmpError as exc:
        if isinstance(exc, InvalidCoordinate):
            raise
        raise OrderChanged(f"replay failed at s={s:g}: {type(exc).__name__}: {exc}") from exc
    out = reduce(traj)
    if out.identities != rt.identities or set(out.gammas) != set(rt.gammas):
        raise OrderChanged(f"event order changed at s={s:g}")
    return out


# --------------------------------------------------------------------------
# classes


@dataclass(frozen=True)
class EventOrderClass:
    I: Tuple[Identity, ...]
    m: int

    @property
    def key(self) -> str:
        return class_key(self.I, self.m)

    @property
    def J_c(self) -> Tuple[int, ...]:
        return tuple(1 for ident in self.I if ident[0] == "C")

    @property
    def J_r(self) -> Tuple[int, ...]:
        return tuple(1 for ident in self.I if ident[0] == "R")

    @property
    def last(self) -> Optional[Identity]:
        return self.I[self.m - 1] if self.m >= 1 else None


def _fmt(ident: Identity) -> str:
    return f"{ident[0]}({','.join(str(v) for v in ident[1:])})"


def class_key(I: Sequence[Identity], m: int) -> str:
    body = ";".join(_fmt(x) for x in I) if I else "-"
    return f"{body}|m={m}"


_EVENT_RE = re.compile(r"^(C)\((\d+),(\d+),(\d+)\)$|^(R)\((\d+),(\d+)\)$")


def parse_class_key(key: str) -> EventOrderClass:
    try:
        body, mpart = key.rsplit("|m=", 1)
        m = int(mpart)
    except ValueError:
        raise ValueError(f"malformed class key {key!r}") from None
    I = []
    if body != "-":
        for tok in body.split(";"):
            hit = _EVENT_RE.match(tok)
            if not hit:
                raise ValueError(f"malformed event {tok!r} in class key")
            if hit.group(1):
                I.append(("C", int(hit.group(2)), int(hit.group(3)), int(hit.group(4))))
            else:
                I.append(("R", int(hit.group(6)), int(hit.group(7))))
    if not 0 <= m <= len(I):
        raise ValueError(f"class key {key!r}: m out of range")
    return EventOrderClass(tuple(I), m)


def chronology_ok(I: Sequence[Identity]) -> bool:
    """k-th collision of a pair (l-th reflection of a particle) follows the previous one."""
    seen_c: Dict[Tuple[int, int], int] = {}
    seen_r: Dict[int, int] = {}
    for ident in I:
        if ident[0] == "C":
            pair = (ident[1], ident[2])
            if ident[3] != seen_c.get(pair, 0) + 1:
                return False
            seen_c[pair] = ident[3]
        else:
            if ident[2] != seen_r.get(ident[1], 0) + 1:
                return False
            seen_r[ident[1]] = ident[2]
    return True


def classify(rt: ReducedTrajectory, t: Optional[float] = None, tie_tol: float = 1e-12) -> EventOrderClass:
    """Class ``(I, m)`` of a path at time ``t`` (default: its horizon)."""
    t = rt.t_max if t is None else t
    if t > rt.t_max:
        raise ValueError("classification time beyond the simulated horizon")
    times = rt.times
    for ti in times + (rt.t_next,):
        if abs(t - ti) < tie_tol:
            raise HorizonOnEvent(f"event at {ti!r} within tie tolerance of t={t!r}")
    m = sum(1 for ti in times if ti < t)
    return EventOrderClass(rt.identities, m)


def trajectory_class(traj: Trajectory, t: Optional[float] = None, tie_tol: float = 1e-12) -> EventOrderClass:
    """Class of a simulated path, including paths that cannot be reduced (suppressed collisions)."""
    t = traj.t_max if t is None else t
    times = tuple(ev.time for ev in traj.events)
    for ti in times + (traj.t_next,):
        if abs(t - ti) < tie_tol:
            raise HorizonOnEvent(f"event at {ti!r} within tie tolerance of t={t!r}")
    m = sum(1 for ti in times if ti < t)
    return EventOrderClass(tuple(ev.identity for ev in traj.events), m)


@dataclass(frozen=True)
class ClassPoint:
    labels: Tuple[str, ...]
    values: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.values)


def class_coordinates(rt: ReducedTrajectory, cls: EventOrderClass) -> ClassPoint:
    """Labeled coordinates: initial state, then for each event of the class in
    order its timing control and velocity (collisions) or velocity (reflections)."""
    N, d = rt.N, rt.d
    labels: List[str] = []
    vals: List[float] = []
    for p in range(N):
        for r in range(d):
            labels.append(f"x0[{p},{r}]")
            vals.append(rt.x0[p][r])
    for p in range(N):
        for r in range(d):
            labels.append(f"v0[{p},{r}]")
            vals.append(rt.v0[p][r])
    for ident in cls.I:
        if ident[0] == "C":
            key = ident[1:]
            labels.append(f"g{key}")
            vals.append(rt.gammas[key])
            for r in range(d):
                labels.append(f"a{key}[{r}]")
                vals.append(rt.collision_vs[key][r])
        else:
            key = ident[1:]
            for r in range(d):
                labels.append(f"b{key}[{r}]")
                vals.append(rt.reflection_vs[key][r])
    return ClassPoint(tuple(labels), np.array(vals))


def transversality_margin(rt: ReducedTrajectory, t: Optional[float] = None) -> float:
    """Smallest gap between consecutive event times and the horizon."""
    t = rt.t_max if t is None else t
    marks = sorted(rt.times + (t, rt.t_next))
    gaps = [b - a for a, b in zip([0.0] + marks[:-1], marks)]
    return min(gaps) if gaps else math.inf


def random_direction(rt: ReducedTrajectory, rng: np.random.Generator) -> Direction:
    """Uniform unit direction over every stored coordinate of ``rt``."""
    N, d = rt.N, rt.d
    n0 = 2 * N * d
    gk, ck, rk = sorted(rt.gammas), sorted(rt.collision_vs), sorted(rt.reflection_vs)
    z = rng.standard_normal(n0 + len(gk) + d * (len(ck) + len(rk)))
    z /= np.linalg.norm(z)
    off = n0
    c = {k: float(z[off + q]) for q, k in enumerate(gk)}
    off += len(gk)
    ac = {k: tuple(z[off + d * q : off + d * (q + 1)].tolist()) for q, k in enumerate(ck)}
    off += d * len(ck)
    ar = {k: tuple(z[off + d * q : off + d * (q + 1)].tolist()) for q, k in enumerate(rk)}
    return Direction(tuple(z[:n0].tolist()), c, ac, ar)


def openness_probe(rt: ReducedTrajectory, cfg: ModelConfig, radius: float, rng: np.random.Generator, t: Optional[float] = None) -> bool:
    """Perturb every coordinate by a random vector of norm ``radius`` and
    report whether the replayed path stays in the same class."""
    cls = classify(rt, t, cfg.tie_tol)
    H = random_direction(rt, rng)
    try:
        moved = flow(rt, H, radius, cfg)
        return classify(moved, t, cfg.tie_tol) == cls
    except PdmpError:
        return False
