"""Event-driven simulation of the N-particle process on ``[0, t_max]``.

One engine serves both forward sampling and deterministic replay from
reduced coordinates; the two differ only in the outcome source that supplies
collision-time controls, post-collision velocities and wall velocities.

Pair channels follow the overlap window of the two centres:

* ``SEP``: separated; the next entry into distance ``beta`` is scheduled.
* ``PRE``: inside a window, collision pending at ``sigma``.
* ``POST``: collided (or suppressed as too slow); waiting to separate.
* ``PASS``: overlapping without interaction (third-party entry during an
  active window, or a window cancelled because a wall hit changed one of
  the velocities before ``sigma``); waiting to separate.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

from .config import ModelConfig
from .errors import (
    CoordinateExhausted,
    DegeneratePair,
    EventCapExceeded,
    InvalidCoordinate,
    PathFailure,
    RejectionBudgetExceeded,
    SimultaneousEvents,
)
from .geometry import positive_root, window_roots
from .kernels import Kernels, get_kernels
from .rng import PathRng

Vec = Tuple[float, ...]

SEP, PRE, POST, PASS = 0, 1, 2, 3
_WALL, _ENTRY, _COLLIDE, _EXIT = 0, 1, 2, 3

W_COLLISION, W_SUPPRESSED, W_CANCELLED, W_PENDING = 0, 1, 2, 3
WINDOW_STATUS = ("collision", "suppressed", "cancelled", "pending")


class Collision(NamedTuple):
    i: int
    j: int
    k: int
    s_entry: float
    t_exit: float
    gamma: float
    sigma: float
    e: Optional[Vec]
    v_pre: Tuple[Vec, Vec]
    v_post: Tuple[Vec, Vec]
    suppressed: bool
    m: int

    @property
    def time(self) -> float:
        return self.sigma

    @property
    def identity(self) -> Tuple:
        return ("C", self.i, self.j, self.k)


class Reflection(NamedTuple):
    i: int
    l: int
    tau: float
    x_hit: Vec
    v_pre: Vec
    v_post: Vec
    m: int

    @property
    def time(self) -> float:
        return self.tau

    @property
    def identity(self) -> Tuple:
        return ("R", self.i, self.l)


class Window(NamedTuple):
    """Every drawn collision-time control, whatever became of its window."""

    i: int
    j: int
    k: int
    s_entry: float
    t_exit: float
    gamma: float
    status: int


class Trajectory(NamedTuple):
    x0: Tuple[Vec, ...]
    v0: Tuple[Vec, ...]
    events: Tuple
    windows: Tuple[Window, ...]
    t_max: float
    t_next: float
    n_pass: int
    n_cancel: int

    @property
    def n_collisions(self) -> int:
        return sum(1 for ev in self.events if isinstance(ev, Collision))

    @property
    def n_reflections(self) -> int:
        return sum(1 for ev in self.events if isinstance(ev, Reflection))

    @property
    def has_suppressed(self) -> bool:
        return any(isinstance(ev, Collision) and ev.suppressed for ev in self.events)

    def velocities_at(self, t: float) -> List[Vec]:
        """Velocities just after every event at or before ``t``."""
        vel = list(self.v0)
        for ev in self.events:
            if ev.time > t:
                break
            if isinstance(ev, Collision):
                vel[ev.i], vel[ev.j] = ev.v_post
            else:
                vel[ev.i] = ev.v_post
        return vel

    def positions_at(self, t: float) -> List[Vec]:
        """Positions by integrating the piecewise constant velocities."""
        pos = [tuple(x) for x in self.x0]
        vel = list(self.v0)
        last = [0.0] * len(pos)
        for ev in self.events:
            if ev.time > t:
                break
            idx = (ev.i, ev.j) if isinstance(ev, Collision) else (ev.i,)
            for q, p in enumerate(idx):
                dt = ev.time - last[p]
                pos[p] = tuple(a + dt * b for a, b in zip(pos[p], vel[p]))
                last[p] = ev.time
                vel[p] = ev.v_post[q] if isinstance(ev, Collision) else ev.v_post
        return [tuple(a + (t - last[p]) * b for a, b in zip(pos[p], vel[p])) for p in range(len(pos))]


class SampledOutcomes:
    """Outcome source drawing from the model kernels."""

    def __init__(self, kernels: Kernels, rng):
        self.k = kernels
        self.rng = rng

    def gamma(self, i: int, j: int, k: int) -> float:
        return self.k.gamma.sample(self.rng)

    def impact(self, i: int, j: int, k: int, vi: Vec, vj: Vec) -> Tuple[Vec, Optional[Vec]]:
        e = self.k.collision.sample(vi, vj, self.rng)
        c = sum(ek * (a - b) for ek, a, b in zip(e, vi, vj))
        return tuple(a - c * ek for a, ek in zip(vi, e)), e

    def reflection(self, i: int, l: int, x_hit: Vec) -> Vec:
        return self.k.redistribution.sample(x_hit, self.rng)


class InjectedOutcomes:
    """Outcome source replaying stored reduced coordinates."""

    def __init__(self, gammas: Dict, collision_vs: Dict, reflection_vs: Dict):
        self.gammas = gammas
        self.collision_vs = collision_vs
        self.reflection_vs = reflection_vs

    def gamma(self, i: int, j: int, k: int) -> float:
        try:
            return self.gammas[(i, j, k)]
        except KeyError:
            raise CoordinateExhausted(f"no collision-time control for pair ({i},{j}) window {k}") from None

    def impact(self, i: int, j: int, k: int, vi: Vec, vj: Vec) -> Tuple[Vec, Optional[Vec]]:
        try:
            return tuple(self.collision_vs[(i, j, k)]), None
        except KeyError:
            raise CoordinateExhausted(f"no post-collision velocity for ({i},{j};{k})") from None

    def reflection(self, i: int, l: int, x_hit: Vec) -> Vec:
        try:
            b = self.reflection_vs[(i, l)]
        except KeyError:
            raise CoordinateExhausted(f"no reflection velocity for ({i};{l})") from None
        bn = sum(a * c for a, c in zip(b, x_hit))
        if bn == 0.0:
            raise InvalidCoordinate(f"reflection velocity for ({i};{l}) is tangent to the wall")
        # the realised representative points into the domain
        return tuple(b) if bn < 0.0 else tuple(-c for c in b)


class EventEngine:
    """Exact event-driven dynamics for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, kernels: Optional[Kernels] = None):
        self.cfg = cfg
        self.kernels = kernels or get_kernels(cfg)
        N = cfg.N
        self.pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
        self.pairs_of = [[p for p, (a, b) in enumerate(self.pairs) if i in (a, b)] for i in range(N)]

    def run(self, x0: Sequence[Sequence[float]], v0: Sequence[Sequence[float]], src, validate: bool = False) -> Trajectory:
        cfg = self.cfg
        N, R2, beta2 = cfg.N, cfg.R * cfg.R, cfg.beta * cfg.beta
        t_max, tie, r0 = cfg.t_max, cfg.tie_tol, cfg.r0
        vmin2, vmax2 = cfg.v_min**2, cfg.v_max**2
        pairs, pairs_of = self.pairs, self.pairs_of
        P = len(pairs)

        pos = [tuple(map(float, x)) for x in x0]
        vel = [tuple(map(float, v)) for v in v0]
        x0t, v0t = tuple(pos), tuple(vel)
        tref = [0.0] * N
        wstamp = [0] * N
        pstamp = [0] * P
        phase = [SEP] * P
        kcount = [0] * P
        lcount = [0] * N
        win: List[Optional[list]] = [None] * P  # [s, t, gamma, sigma, k, window index]
        entry: List[Optional[Tuple[float, float]]] = [None] * P
        heap: List = []
        seq = 0
        events: List = []
        windows: List[list] = []
        n_coll = n_refl = n_pass = n_cancel = 0
        last_t = -math.inf

        def at(i: int, t: float) -> Vec:
            dt = t - tref[i]
            return tuple(a + dt * b for a, b in zip(pos[i], vel[i]))

        def push(t: float, kind: int, who: int, stamp: int) -> None:
            nonlocal seq
            heapq.heappush(heap, (t, seq, kind, who, stamp))
            seq += 1

        def schedule_wall(i: int, now: float) -> None:
            x = at(i, now)
            v = vel[i]
            a = sum(c * c for c in v)
            b = 2.0 * sum(p * q for p, q in zip(x, v))
            c = sum(p * p for p in x) - R2
            push(now + positive_root(a, b, c), _WALL, i, wstamp[i])

        def schedule_pair(p: int, now: float) -> None:
            i, j = pairs[p]
            xi, xj = at(i, now), at(j, now)
            dx = [a - b for a, b in zip(xi, xj)]
            dv = [a - b for a, b in zip(vel[i], vel[j])]
            a = sum(c * c for c in dv)
            b = 2.0 * sum(p_ * q for p_, q in zip(dx, dv))
            c = sum(q * q for q in dx) - beta2
            ph = phase[p]
            if ph == SEP:
                roots = window_roots(a, b, c)
                if roots is not None:
                    entry[p] = (now + roots[0], now + roots[1])
                    push(now + roots[0], _ENTRY, p, pstamp[p])
            elif ph == PRE:
                push(win[p][3], _COLLIDE, p, pstamp[p])
            elif a > 0.0:
                push(now + positive_root(a, b, c), _EXIT, p, pstamp[p])

        def active(q: int, now: float) -> bool:
            ph = phase[q]
            if ph == PRE:
                return True
            if ph == POST and win[q] is not None:
                return win[q][0] <= now <= win[q][1]
            return False

        def velocity_changed(i: int, now: float) -> None:
            nonlocal n_cancel
            wstamp[i] += 1
            schedule_wall(i, now)
            for q in pairs_of[i]:
                if phase[q] == PRE:
                    # the window no longer has constant velocities up to sigma
                    windows[win[q][5]][6] = W_CANCELLED
                    win[q] = None
                    phase[q] = PASS
                    n_cancel += 1
                pstamp[q] += 1

        def reschedule_pairs(parts: Tuple[int, ...], now: float) -> None:
            done = set()
            for i in parts:
                for q in pairs_of[i]:
                    if q not in done:
                        done.add(q)
                        schedule_pair(q, now)

        def jump_checks(t: float) -> None:
            nonlocal last_t
            if t - last_t < tie:
                raise SimultaneousEvents(f"events at {last_t!r} and {t!r} closer than {tie:g}")
            last_t = t

        for i in range(N):
            schedule_wall(i, 0.0)
        for p in range(P):
            schedule_pair(p, 0.0)

        t_next = math.inf
        while heap:
            t, _, kind, who, stamp = heapq.heappop(heap)
            if kind == _WALL:
                if stamp != wstamp[who]:
                    continue
            elif stamp != pstamp[who]:
                continue
            if t > t_max:
                t_next = t
                break

            if kind == _WALL:
                i = who
                jump_checks(t)
                n_refl += 1
                if n_refl > cfg.I_r:
                    raise EventCapExceeded(f"more than {cfg.I_r} reflections before t_max")
                x_hit = at(i, t)
                lcount[i] += 1
                l = lcount[i]
                v_new = src.reflection(i, l, x_hit)
                if validate:
                    s2 = sum(c * c for c in v_new)
                    if not (vmin2 < s2 < vmax2):
                        raise InvalidCoordinate(f"reflection velocity ({i};{l}) leaves the annulus")
                events.append(Reflection(i, l, t, x_hit, vel[i], v_new, len(events) + 1))
                pos[i] = x_hit
                tref[i] = t
                vel[i] = v_new
                velocity_changed(i, t)
                reschedule_pairs((i,), t)

            elif kind == _ENTRY:
                p = who
                i, j = pairs[p]
                s, te = entry[p]
                blocked = any(q != p and active(q, t) for q in pairs_of[i] + pairs_of[j])
                pstamp[p] += 1
                if blocked:
                    phase[p] = PASS
                    n_pass += 1
                    schedule_pair(p, t)
                    continue
                kcount[p] += 1
                k = kcount[p]
                g = src.gamma(i, j, k)
                sigma = s + 0.5 * g * (te - s)
                windows.append([i, j, k, s, te, g, W_PENDING])
                win[p] = [s, te, g, sigma, k, len(windows) - 1]
                phase[p] = PRE
                push(sigma, _COLLIDE, p, pstamp[p])

            elif kind == _COLLIDE:
                p = who
                i, j = pairs[p]
                s, te, g, sigma, k, widx = win[p]
                jump_checks(t)
                n_coll += 1
                if n_coll > cfg.I_c:
                    raise EventCapExceeded(f"more than {cfg.I_c} collisions before t_max")
                vi, vj = vel[i], vel[j]
                w2 = sum((a - b) ** 2 for a, b in zip(vi, vj))
                outcome = None
                if w2 >= r0 * r0:
                    try:
                        outcome = src.impact(i, j, k, vi, vj)
                    except DegeneratePair:
                        outcome = None
                if outcome is None:
                    windows[widx][6] = W_SUPPRESSED
                    events.append(Collision(i, j, k, s, te, g, t, None, (vi, vj), (vi, vj), True, len(events) + 1))
                    phase[p] = POST
                    pstamp[p] += 1
                    schedule_pair(p, t)
                    continue
                a_new, e = outcome
                b_new = tuple(a + b - c for a, b, c in zip(vi, vj, a_new))
                if validate:
                    for u, lab in ((a_new, "a"), (b_new, "partner")):
                        s2 = sum(c * c for c in u)
                        if not (vmin2 < s2 < vmax2):
                            raise InvalidCoordinate(f"collision ({i},{j};{k}) {lab} velocity leaves the annulus")
                windows[widx][6] = W_COLLISION
                events.append(Collision(i, j, k, s, te, g, t, e, (vi, vj), (a_new, b_new), False, len(events) + 1))
                for q_, v_ in ((i, a_new), (j, b_new)):
                    pos[q_] = at(q_, t)
                    tref[q_] = t
                    vel[q_] = v_
                phase[p] = POST
                velocity_changed(i, t)
                velocity_changed(j, t)
                reschedule_pairs((i, j), t)

            else:  # _EXIT
                p = who
                phase[p] = SEP
                win[p] = None
                pstamp[p] += 1
                schedule_pair(p, t)

        return Trajectory(
            x0=x0t,
            v0=v0t,
            events=tuple(events),
            windows=tuple(Window(*w) for w in windows),
            t_max=t_max,
            t_next=t_next,
            n_pass=n_pass,
            n_cancel=n_cancel,
        )


def simulate_path(cfg: ModelConfig, rng, kernels: Optional[Kernels] = None) -> Trajectory:
    """Sample an initial state and run the forward dynamics up to ``t_max``."""
    kernels = kernels or get_kernels(cfg)
    x0, v0 = kernels.initial.sample(rng)
    return EventEngine(cfg, kernels).run(x0, v0, SampledOutcomes(kernels, rng))


def simulate_index(cfg: ModelConfig, seed: int, index: int):
    """Simulate path ``index`` of the ensemble keyed by ``seed``.

    Path failures (event caps, ties, exhausted rejection budgets) are returned
    rather than raised so that ensembles can count them.
    """
    try:
        return simulate_path(cfg, PathRng(seed, index))
    except (PathFailure, RejectionBudgetExceeded) as exc:
        return exc


def _chunk_worker(args):
    cfg, seed, start, stop, fn = args
    out = []
    for idx in range(start, stop):
        out.append(fn(idx, simulate_index(cfg, seed, idx)))
    return out


def _identity(idx, traj):
    return traj


def map_paths(
    cfg: ModelConfig,
    seed: int,
    n_paths: int,
    fn: Callable = _identity,
    workers: int = 1,
    start: int = 0,
    chunk: int = 1000,
) -> List:
    """Apply ``fn(index, trajectory_or_error)`` to paths ``start .. start+n_paths-1``.

    Results come back in index order whatever the worker count; ``fn`` must
    be picklable when ``workers > 1``.
    """
    bounds = [(a, min(a + chunk, start + n_paths)) for a in range(start, start + n_paths, chunk)]
    tasks = [(cfg, seed, a, b, fn) for a, b in bounds]
    if workers <= 1:
        parts = [_chunk_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_worker, tasks))
    return [r for part in parts for r in part]


def iter_path_chunks(
    cfg: ModelConfig,
    seed: int,
    n_paths: int,
    fn: Callable = _identity,
    workers: int = 1,
    start: int = 0,
    chunk: int = 1000,
):
    """Like :func:`map_paths` but yields one chunk of results at a time."""
    bounds = [(a, min(a + chunk, start + n_paths)) for a in range(start, start + n_paths, chunk)]
    tasks = [(cfg, seed, a, b, fn) for a, b in bounds]
    if workers <= 1:
        for t in tasks:
            yield _chunk_worker(t)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(_chunk_worker, tasks)


def enforce_p2(traj: Trajectory) -> Dict[str, int]:
    """Counts of third-party pass-throughs and cancelled windows on a path.

    The suppression itself happens inside the engine at each window entry;
    this helper exposes the per-path bookkeeping.
    """
    return {"pass_through": traj.n_pass, "cancelled": traj.n_cancel}


class EnsembleResult(NamedTuple):
    digest: str
    n_paths: int
    counts: Dict[str, int]
    path: Optional[str]

    @property
    def n_error(self) -> int:
        return self.n_paths - self.counts.get("ok", 0)


def _encode(idx, item):
    from .store import encode_record

    return encode_record(idx, item)


def ensemble_header(cfg: ModelConfig, seed: int, n_paths: int) -> Dict:
    import dataclasses

    from .config import config_hash

    return {
        "format": "PDMP1",
        "config_hash": config_hash(cfg),
        "model": dataclasses.asdict(cfg),
        "seed": int(seed),
        "n_paths": int(n_paths),
    }


def run_ensemble(
    cfg: ModelConfig,
    n_paths: int,
    seed: int,
    workers: int = 1,
    path=None,
    chunk: int = 1000,
) -> EnsembleResult:
    """Simulate ``n_paths`` paths and stream them into a path store.

    With ``path=None`` nothing is written but the digest is still computed.
    Paths use substreams keyed by ``(seed, index)``, so the digest does not
    depend on ``workers`` or ``chunk``.
    """
    from .store import StoreWriter

    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    writer = StoreWriter(path, ensemble_header(cfg, seed, n_paths))
    for part in iter_path_chunks(cfg, seed, n_paths, _encode, workers=workers, chunk=chunk):
        for rec in part:
            writer.append(rec)
    digest = writer.close()
    return EnsembleResult(digest, n_paths, dict(writer.counts), str(path) if path is not None else None)
