"""Verification suites.

Every check produces a report dict with the keys ``identity``,
``n_paths`` or ``n_quadrature_nodes``, ``lhs``, ``rhs``, ``std_err``,
``residual`` and ``pass``. Monte Carlo checks compare ``|lhs - rhs|`` with
``n_sigma`` times the combined standard error ``sqrt(se_lhs^2 + se_rhs^2)``.

Per-path statistics are computed by picklable callables so that every suite
can run on a process pool; test functions are built lazily inside each
worker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .calculus import (
    BumpField,
    Factor,
    ProductFunctional,
    RadialBump,
    TestFunctional,
    VelocityAt,
    boundary_ibp_sides,
    divergence_inverse_jacobian,
    exercise_d_sides,
    fd_divergence_columns,
    flow_derivative_fd,
    hemisphere_ibp_sides,
    jacobian_vstar,
    jacobian_vstar_inverse,
    vstar,
    z_weight,
)
from .config import DensityConfig, ModelConfig, VerifyConfig, config_hash
from .density import (
    ClassCutoff,
    H_alpha,
    H_v,
    H_x,
    _smoothstep,
    class_density,
    fit_cutoff,
    slot_view,
)
from .errors import (
    ConfigError,
    DegeneratePair,
    HorizonOnEvent,
    InsufficientPaths,
    InvalidCoordinate,
    NotPerturbable,
    OrderChanged,
    PdmpError,
)
from .geometry import cap_quadrature
from .kernels import get_kernels
from .reduced import (
    Direction,
    EventOrderClass,
    ReducedTrajectory,
    classify,
    flow,
    parse_class_key,
    random_direction,
    reduce,
    trajectory_class,
)
from .simulator import iter_path_chunks
from .store import iter_store_chunks

# pilot ensembles use a seed stream disjoint from the main one
PILOT_SEED_OFFSET = 1_000_003


def make_report(identity: str, lhs: float, rhs: float, std_err: float, residual: float, passed: bool, n_paths: Optional[int] = None, n_quadrature_nodes: Optional[int] = None, **extra) -> Dict:
    rep: Dict = {"identity": identity}
    if n_paths is not None:
        rep["n_paths"] = int(n_paths)
    if n_quadrature_nodes is not None:
        rep["n_quadrature_nodes"] = int(n_quadrature_nodes)
    rep.update(lhs=float(lhs), rhs=float(rhs), std_err=float(std_err), residual=float(residual), **{"pass": bool(passed)})
    rep.update(extra)
    return rep


@dataclass
class PairStats:
    """Running sums for the two sides of a Monte Carlo identity."""

    n: int = 0
    sl: float = 0.0
    sl2: float = 0.0
    sr: float = 0.0
    sr2: float = 0.0
    nonzero: int = 0

    def add(self, l: float, r: float) -> None:
        self.n += 1
        self.sl += l
        self.sl2 += l * l
        self.sr += r
        self.sr2 += r * r
        if l != 0.0 or r != 0.0:
            self.nonzero += 1

    def add_zeros(self, k: int) -> None:
        self.n += k

    def merge(self, other: "PairStats") -> "PairStats":
        return PairStats(self.n + other.n, self.sl + other.sl, self.sl2 + other.sl2, self.sr + other.sr, self.sr2 + other.sr2, self.nonzero + other.nonzero)

    def _se(self, s, s2) -> float:
        if self.n < 2:
            return math.inf
        m = s / self.n
        return math.sqrt(max(s2 / self.n - m * m, 0.0) / (self.n - 1))

    @property
    def lhs(self) -> float:
        return self.sl / self.n if self.n else 0.0

    @property
    def rhs(self) -> float:
        return self.sr / self.n if self.n else 0.0

    @property
    def std_err(self) -> float:
        return math.hypot(self._se(self.sl, self.sl2), self._se(self.sr, self.sr2))

    def report(self, identity: str, n_sigma: float, **extra) -> Dict:
        res = self.lhs - self.rhs
        se = self.std_err
        return make_report(identity, self.lhs, self.rhs, se, res, abs(res) <= n_sigma * se, n_paths=self.n, nonzero_paths=self.nonzero, **extra)


def prepare(idx: int, traj) -> Optional[ReducedTrajectory]:
    """Reduced path, or ``None`` for failed paths and paths with a suppressed collision.

    Already reduced paths (and ``None``) pass through unchanged.
    """
    if traj is None or isinstance(traj, ReducedTrajectory):
        return traj
    if isinstance(traj, Exception) or traj.has_suppressed:
        return None
    return reduce(traj)


def path_chunks(cfg: ModelConfig, seed: int, n_paths: int, fn: Callable, workers: int = 1, store=None, chunk: int = 1000):
    """Chunks of ``fn(index, path)`` from a path store, or from fresh simulation when ``store`` is None."""
    if store is None:
        return iter_path_chunks(cfg, seed, n_paths, fn, workers=workers, chunk=chunk)
    header, chunks = iter_store_chunks(store, fn, workers=workers, chunk=chunk)
    if header.get("config_hash") != config_hash(cfg):
        raise ConfigError(f"{store}: path store was produced with a different model configuration")
    return chunks


class MultiStats:
    """Runs several per-path statistics on one path, reducing it only once.

    Besides the named statistics the result carries ``"class_key"`` (or
    ``None`` for failed paths and horizon ties).
    """

    def __init__(self, cfg: ModelConfig, **fns):
        self.cfg = cfg
        self.fns = fns

    def __call__(self, idx: int, traj):
        key = None
        if not isinstance(traj, Exception):
            try:
                key = trajectory_class(traj, None, self.cfg.tie_tol).key
            except HorizonOnEvent:
                key = None
        rt = prepare(idx, traj)
        out = {"class_key": key}
        for name, fn in self.fns.items():
            out[name] = fn(idx, rt)
        return out


# ---------------------------------------------------------------------------
# pointwise exercise identities


def _random_velocity(rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    s = rng.uniform(cfg.v_min, cfg.v_max)
    u = rng.standard_normal(cfg.d)
    return s * u / np.linalg.norm(u)


def exercise_suite(cfg: ModelConfig, vcfg: VerifyConfig, seed: int) -> List[Dict]:
    """Inverse Jacobian, divergence of the inverse Jacobian and the weight identity at random inputs."""
    k = get_kernels(cfg)
    ker = k.collision
    rng = np.random.default_rng([seed, 11])
    worst_inv = worst_div = worst_d = 0.0
    n = 0
    sample_rng = _NumpyRng(rng)
    while n < vcfg.exercise_samples:
        v, vp = _random_velocity(rng, cfg), _random_velocity(rng, cfg)
        if np.linalg.norm(v - vp) < cfg.r0:
            continue
        try:
            e = np.asarray(ker.sample(tuple(v), tuple(vp), sample_rng))
        except DegeneratePair:
            continue
        n += 1
        J = jacobian_vstar(v, vp, e)
        Ji = jacobian_vstar_inverse(v, vp, e)
        worst_inv = max(worst_inv, float(np.abs(J @ Ji - np.eye(cfg.d)).max()))
        fd = fd_divergence_columns(lambda ee: jacobian_vstar_inverse(v, vp, ee), e)
        an = divergence_inverse_jacobian(v, vp, e)
        worst_div = max(worst_div, float(np.abs(fd - an).max() / max(np.abs(an).max(), 1e-300)))
        A = rng.standard_normal(cfg.d)
        Bq = rng.standard_normal((cfg.d, cfg.d))

        def psi(u, A=A, Bq=Bq):
            u = np.asarray(u)
            return A * float(u @ u) + Bq @ u + u ** 3

        def div_psi(u, A=A, Bq=Bq):
            u = np.asarray(u)
            return 2.0 * float(A @ u) + float(np.trace(Bq)) + float(np.sum(3.0 * u * u))

        B = lambda a, b, ee: ker.B(tuple(a), tuple(b), tuple(ee))
        gl = lambda a, b, ee: ker.grad_log_B(tuple(a), tuple(b), tuple(ee))
        lhs, rhs = exercise_d_sides(v, vp, e, psi, div_psi, B, gl)
        worst_d = max(worst_d, abs(lhs - rhs) / max(abs(rhs), abs(lhs), 1e-12))
    return [
        make_report("inverse_jacobian", worst_inv, 0.0, 0.0, worst_inv, worst_inv <= vcfg.tol_inverse, n_paths=n, measure="max |J J^-1 - I|"),
        make_report("divergence_inverse_jacobian", worst_div, 0.0, 0.0, worst_div, worst_div <= vcfg.tol_divergence, n_paths=n, measure="max relative error vs finite differences"),
        make_report("weight_product_rule", worst_d, 0.0, 0.0, worst_d, worst_d <= vcfg.tol_product_rule, n_paths=n, measure="max relative error of the pointwise identity"),
    ]


class _NumpyRng:
    """Adapter giving a numpy generator the ``uniform``/``normal`` interface of the path streams."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def uniform(self) -> float:
        return float(self.rng.uniform())

    def normal(self) -> float:
        return float(self.rng.standard_normal())


# ---------------------------------------------------------------------------
# quadrature identities


def ibp2_suite(cfg: ModelConfig, vcfg: VerifyConfig, seed: int) -> List[Dict]:
    """Integration by parts on the impact hemisphere and on the wall velocity cone.

    Each of ``ibp2_pairs`` random ``(phi, psi)`` bump pairs gives one report
    per identity; the absolute residual is compared with ``tol_ibp2``.
    """
    k = get_kernels(cfg)
    ker = k.collision
    rng = np.random.default_rng([seed, 23])
    srng = _NumpyRng(rng)
    reports = []
    made = 0
    while made < vcfg.ibp2_pairs:
        v, vp = _random_velocity(rng, cfg), _random_velocity(rng, cfg)
        if np.linalg.norm(v - vp) < cfg.r0:
            continue
        try:
            e = ker.sample(tuple(v), tuple(vp), srng)
        except DegeneratePair:
            continue
        phi = RadialBump(tuple(vstar(v, vp, np.asarray(e))), 0.8)
        psi = BumpField(tuple(rng.standard_normal(cfg.d)), RadialBump(tuple((v + vp) / 2.0), 1.5))
        lhs, rhs = hemisphere_ibp_sides(v, vp, phi, psi, k, vcfg.ibp2_order)
        nodes = len(cap_quadrature(np.subtract(v, vp), ker.delta, 1.0 - ker.delta, vcfg.ibp2_order)[1])
        reports.append(make_report(f"hemisphere_ibp[{made}]", lhs, rhs, 0.0, lhs - rhs, abs(lhs - rhs) <= vcfg.tol_ibp2, n_quadrature_nodes=nodes))
        made += 1
    order = max(vcfg.ibp2_order // 2, 100)
    for q in range(vcfg.ibp2_pairs):
        u = rng.standard_normal(cfg.d)
        x = tuple(cfg.R * u / np.linalg.norm(u))
        vv = np.asarray(k.redistribution.sample(x, srng))
        phi = RadialBump(tuple(vv), 0.8)
        psi = BumpField(tuple(rng.standard_normal(cfg.d)), RadialBump(tuple(vv + 0.2 * rng.standard_normal(cfg.d)), 0.7))
        lhs, rhs = boundary_ibp_sides(x, phi, psi, k, order)
        nodes = order * order if cfg.d == 2 else 2 * order**3
        reports.append(make_report(f"wall_ibp[{q}]", lhs, rhs, 0.0, lhs - rhs, abs(lhs - rhs) <= vcfg.tol_ibp2, n_quadrature_nodes=nodes))
    return reports


# ---------------------------------------------------------------------------
# flow derivative


def _gauss(center, scale, idx=None):
    c = [float(a) for a in center]
    inv = 1.0 / (scale * scale)

    def pick(u):
        return [float(u[i]) for i in idx] if idx is not None else [float(a) for a in u]

    def f(u):
        w = pick(u)
        return math.exp(-0.5 * inv * sum((a - b) ** 2 for a, b in zip(w, c)))

    def g(u):
        w = pick(u)
        fv = math.exp(-0.5 * inv * sum((a - b) ** 2 for a, b in zip(w, c)))
        grad = [-(a - b) * inv * fv for a, b in zip(w, c)]
        if idx is None:
            return np.array(grad)
        out = np.zeros(len(u))
        out[idx] = grad
        return out

    return f, g


def _all_slot_functional(rt: ReducedTrajectory) -> TestFunctional:
    n0 = 2 * rt.N * rt.d
    f, g = _gauss(np.zeros(n0), 2.0)
    facs = [Factor(("y0",), f, g)]
    for key in rt.gammas:
        facs.append(Factor(("g",) + key, lambda x: math.sin(3 * x) + 2.0, lambda x: 3 * math.cos(3 * x)))
    for key in rt.collision_vs:
        fa, ga = _gauss(np.full(rt.d, 0.2), 1.0)
        facs.append(Factor(("a",) + key, fa, ga))
    for key in rt.reflection_vs:
        facs.append(
            Factor(
                ("b",) + key,
                lambda u: math.cos(float(np.sum(np.asarray(u) ** 2))),
                lambda u: -math.sin(float(np.sum(np.asarray(u) ** 2))) * 2.0 * np.asarray(u),
            )
        )
    return TestFunctional(facs)


def _velocity_functional(cfg: ModelConfig) -> VelocityAt:
    phi = lambda V: math.exp(-float(np.sum(np.asarray(V) ** 2)) / 10.0)
    gphi = lambda V: -np.asarray(V) / 5.0 * phi(V)
    return VelocityAt(phi, gphi, cfg.t_max * (1.0 - 1e-6))


FLOW_CASES = ("all_slots", "velocity_at_horizon", "initial_only", "timing_only", "product_with_velocity")


def _restrict(H: Direction, which: str) -> Direction:
    if which == "initial_only":
        return Direction(a0=H.a0)
    if which == "timing_only":
        return Direction(c=dict(H.c))
    return H


def _same_coordinates(a: ReducedTrajectory, b: ReducedTrajectory) -> float:
    d = max((abs(x - y) for x, y in zip(a.y0_flat(), b.y0_flat())), default=0.0)
    for k, g in a.gammas.items():
        d = max(d, abs(g - b.gammas[k]))
    for k, v in a.collision_vs.items():
        d = max(d, max(abs(x - y) for x, y in zip(v, b.collision_vs[k])))
    for k, v in a.reflection_vs.items():
        w = b.reflection_vs[k]
        d = max(d, min(max(abs(x - y) for x, y in zip(v, w)), max(abs(x + y) for x, y in zip(v, w))))
    return d


class FlowStats:
    """Per-path relative errors of the analytic derivative against the flow difference quotient."""

    def __init__(self, cfg: ModelConfig, seed: int, fd_step: float):
        self.cfg, self.seed, self.fd_step = cfg, seed, fd_step

    def __call__(self, idx: int, traj):
        rt = prepare(idx, traj)
        if rt is None:
            return None
        cfg = self.cfg
        rng = np.random.default_rng([self.seed, 31, idx])
        H = random_direction(rt, rng)
        Fall = _all_slot_functional(rt)
        Fv = _velocity_functional(cfg)
        cases = {
            "all_slots": (Fall, H),
            "velocity_at_horizon": (Fv, H),
            "initial_only": (TestFunctional([Fall.factors[0]]), _restrict(H, "initial_only")),
            "timing_only": (TestFunctional([f for f in Fall.factors if f.slot[0] == "g"]), _restrict(H, "timing_only")),
            "product_with_velocity": (ProductFunctional(Fall, Fv), H),
        }
        out = {}
        for name, (F, Hc) in cases.items():
            ana = F.derivative(rt, Hc, cfg)
            try:
                num, _ = flow_derivative_fd(F, rt, Hc, cfg, self.fd_step)
            except (OrderChanged, InvalidCoordinate):
                out[name] = None
                continue
            out[name] = (ana, num, abs(num - ana) / max(abs(ana), 1e-3))
        s = self.fd_step
        back_err = None
        for _ in range(30):
            try:
                back = flow(flow(rt, H, s, cfg), H, -s, cfg)
                back_err = _same_coordinates(rt, back)
                break
            except (OrderChanged, InvalidCoordinate):
                s *= 0.5
        out["roundtrip"] = back_err
        return out


def flow_suite(cfg: ModelConfig, vcfg: VerifyConfig, seed: int, n_paths: Optional[int] = None, workers: int = 1, store=None) -> List[Dict]:
    """Analytic directional derivatives against Richardson flow differences, plus the flow roundtrip."""
    n_paths = n_paths or vcfg.flow_paths
    fn = FlowStats(cfg, seed, vcfg.fd_step)
    worst = {c: 0.0 for c in FLOW_CASES}
    worst_at = {c: (0.0, 0.0) for c in FLOW_CASES}
    skipped = {c: 0 for c in FLOW_CASES}
    used = 0
    rt_worst = 0.0
    rt_skipped = 0
    for part in path_chunks(cfg, seed, n_paths, fn, workers, store, chunk=100):
        for item in part:
            if item is None:
                continue
            if used >= n_paths:
                break
            used += 1
            for c in FLOW_CASES:
                if item[c] is None:
                    skipped[c] += 1
                    continue
                ana, num, rel = item[c]
                if rel >= worst[c]:
                    worst[c] = rel
                    worst_at[c] = (ana, num)
            if item["roundtrip"] is None:
                rt_skipped += 1
            else:
                rt_worst = max(rt_worst, item["roundtrip"])
    reports = [
        make_report(
            f"flow_derivative[{c}]",
            worst_at[c][0],
            worst_at[c][1],
            0.0,
            worst[c],
            worst[c] <= vcfg.tol_flow_derivative,
            n_paths=used,
            measure="max |fd - analytic| / max(|analytic|, 1e-3)",
            skipped=skipped[c],
        )
        for c in FLOW_CASES
    ]
    reports.append(make_report("flow_roundtrip", rt_worst, 0.0, 0.0, rt_worst, rt_worst <= vcfg.tol_flow_roundtrip, n_paths=used, skipped=rt_skipped))
    return reports


# ---------------------------------------------------------------------------
# duality E[G d_h F] = E[F delta(G h)]


def _smoothstep_d(z: float) -> float:
    if z <= 0.0 or z >= 1.0:
        return 0.0
    a = math.exp(-1.0 / z)
    b = math.exp(-1.0 / (1.0 - z))
    da = a / (z * z)
    db = -b / ((1.0 - z) ** 2)
    return (da * (a + b) - a * (da + db)) / (a + b) ** 2


def _separated_position_factor(cfg: ModelConfig, width: float = 0.1) -> Factor:
    """Bump in ``x_0`` times smooth separation factors from the other particles.

    Vanishes, with all derivatives, near ``|x_0| = R`` and wherever the
    initial separation constraint could bind.
    """
    k = get_kernels(cfg)
    N, d = cfg.N, cfg.d
    bump = RadialBump(tuple([0.0] * d), 0.8 * cfg.R)
    sep = k.initial.sep

    def parts(y):
        y = np.asarray(y, dtype=float)
        x0 = y[:d]
        facs = []
        for j in range(1, N):
            diff = x0 - y[j * d : (j + 1) * d]
            r = math.sqrt(sum(float(c) * float(c) for c in diff))
            z = (r - sep) / width - 1.0
            facs.append((_smoothstep(z), _smoothstep_d(z) / width * diff / max(r, 1e-300), j))
        return x0, facs

    def f(y):
        x0, facs = parts(y)
        out = bump(x0)
        for s, _, _ in facs:
            out *= s
        return out

    def grad(y):
        y = np.asarray(y, dtype=float)
        x0, facs = parts(y)
        b = bump(x0)
        gb = bump.grad(x0)
        out = np.zeros_like(y)
        prod = 1.0
        for s, _, _ in facs:
            prod *= s
        out[:d] += gb * prod
        for q, (s, ds, j) in enumerate(facs):
            rest = b
            for p, (s2, _, _) in enumerate(facs):
                if p != q:
                    rest *= s2
            out[:d] += ds * rest
            out[j * d : (j + 1) * d] -= ds * rest
        return out

    return Factor(("y0",), f, grad)


def duality_triples(cfg: ModelConfig) -> List[Tuple[str, TestFunctional, TestFunctional, Direction]]:
    """``(name, F, G, h)`` triples, one per coordinate family.

    Each pair ``F, G`` depends on a single slot (or on the initial
    condition only) and ``h`` moves only that slot.
    """
    N, d = cfg.N, cfg.d
    n0 = 2 * N * d

    def unit(k):
        a = [0.0] * n0
        a[k] = 1.0
        return tuple(a)

    vidx = list(range(N * d, N * d + d))
    xidx = list(range(d))
    out = []
    f, g = _gauss([0.5] + [0.3] * (d - 1), 0.7, vidx)
    f2, g2 = _gauss([0.0] * d, 1.2, vidx)
    out.append(("initial_velocity", TestFunctional([Factor(("y0",), f, g)]), TestFunctional([Factor(("y0",), f2, g2)]), Direction(a0=unit(N * d))))
    fx, gx = _gauss([0.2] + [-0.1] * (d - 1), 0.6, xidx)
    out.append(("initial_position", TestFunctional([Factor(("y0",), fx, gx)]), TestFunctional([_separated_position_factor(cfg)]), Direction(a0=unit(0))))
    out.append(
        (
            "timing_control",
            TestFunctional([Factor(("g", 0, 1, 1), lambda x: math.sin(4 * x), lambda x: 4 * math.cos(4 * x))]),
            TestFunctional([Factor(("g", 0, 1, 1), lambda x: 1 + x * x, lambda x: 2 * x)]),
            Direction(c={(0, 1, 1): 1.0}),
        )
    )
    u = np.zeros(d)
    u[0], u[1 % d] = 0.6, 0.8
    fb = lambda b: math.exp(-float(np.dot(b, u)) ** 2)
    gb = lambda b: -2.0 * float(np.dot(b, u)) * u * fb(b)
    hb = lambda b: math.exp(-float(np.dot(b, b)) / 4.0)
    hgb = lambda b: -np.asarray(b) / 2.0 * hb(b)
    e0 = tuple([1.0] + [0.0] * (d - 1))
    out.append(("reflection", TestFunctional([Factor(("b", 0, 1), fb, gb)]), TestFunctional([Factor(("b", 0, 1), hb, hgb)]), Direction(alpha_r={(0, 1): e0})))
    ca = np.array([0.3, 0.2] + [0.0] * (d - 2))
    fa = lambda a: math.exp(-float(np.sum((np.asarray(a) - ca) ** 2)))
    ga = lambda a: -2.0 * (np.asarray(a) - ca) * fa(a)
    out.append(("collision", TestFunctional([Factor(("a", 0, 1, 1), fa, ga)]), TestFunctional([Factor(("a", 0, 1, 1), hb, hgb)]), Direction(alpha_c={(0, 1, 1): e0})))
    return out


DUALITY_NAMES = ("initial_velocity", "initial_position", "timing_control", "reflection", "collision")


class DualityStats:
    """Per-path ``(G d_h F, -F (d_h G + z G))`` for every triple."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self._triples = None

    def __getstate__(self):
        return {"cfg": self.cfg, "_triples": None}

    def __call__(self, idx: int, traj):
        rt = prepare(idx, traj)
        if self._triples is None:
            self._triples = duality_triples(self.cfg)
        if rt is None:
            return [(0.0, 0.0)] * len(self._triples)
        k = get_kernels(self.cfg)
        out = []
        for _, F, G, H in self._triples:
            fv = F.value(rt)
            gv = G.value(rt)
            if fv == 0.0 and gv == 0.0:
                out.append((0.0, 0.0))
                continue
            lhs = gv * F.derivative(rt, H, self.cfg) if gv != 0.0 else 0.0
            rhs = 0.0
            if fv != 0.0:
                dg = G.derivative(rt, H, self.cfg)
                z = z_weight(rt, H, self.cfg, k) if gv != 0.0 else 0.0
                rhs = -fv * (dg + z * gv)
            out.append((lhs, rhs))
        return out


def accumulate_duality(chunks: Iterable[List], names: Sequence[str] = DUALITY_NAMES) -> Dict[str, PairStats]:
    stats = {n: PairStats() for n in names}
    for part in chunks:
        for item in part:
            for n, (l, r) in zip(names, item):
                stats[n].add(l, r)
    return stats


def duality_suite(cfg: ModelConfig, vcfg: VerifyConfig, seed: int, n_paths: Optional[int] = None, workers: int = 1, store=None) -> List[Dict]:
    n_paths = n_paths or vcfg.duality_paths
    stats = accumulate_duality(path_chunks(cfg, seed, n_paths, DualityStats(cfg), workers, store))
    return [stats[n].report(f"duality[{n}]", vcfg.n_sigma) for n in DUALITY_NAMES]


# ---------------------------------------------------------------------------
# class-restricted integration by parts


def _bump1(z: float) -> Tuple[float, float, float]:
    """``exp(-1/(1-z^2))`` and its first two derivatives."""
    q = 1.0 - z * z
    if q <= 0.0:
        return 0.0, 0.0, 0.0
    f = math.exp(-1.0 / q)
    g1 = -2.0 * z / (q * q)
    g2 = -2.0 / (q * q) - 8.0 * z * z / (q**3)
    return f, g1 * f, (g2 + g1 * g1) * f


@dataclass(frozen=True)
class ProductBump:
    """``prod_r b((y_r - c_r) / w_r)`` with ``b(z) = exp(-1/(1 - z^2))``."""

    center: Tuple[float, ...]
    halfwidth: Tuple[float, ...]

    def derivs(self, y) -> Tuple[float, np.ndarray, np.ndarray]:
        """Value, gradient and Hessian."""
        y = np.asarray(y, dtype=float)
        n = len(y)
        vals = []
        for yy, c, w in zip(y, self.center, self.halfwidth):
            f, d1, d2 = _bump1((yy - c) / w)
            vals.append((f, d1 / w, d2 / (w * w)))
        value = 1.0
        for f, _, _ in vals:
            value *= f
        grad = np.zeros(n)
        hess = np.zeros((n, n))
        if value == 0.0:
            return 0.0, grad, hess
        for r in range(n):
            others = 1.0
            for q in range(n):
                if q != r:
                    others *= vals[q][0]
            grad[r] = vals[r][1] * others
            hess[r, r] = vals[r][2] * others
            for s in range(r + 1, n):
                rest = 1.0
                for q in range(n):
                    if q not in (r, s):
                        rest *= vals[q][0]
                hess[r, s] = hess[s, r] = vals[r][1] * vals[s][1] * rest
        return value, grad, hess


@dataclass(frozen=True)
class ClassPlan:
    """Cutoff and test functions for one class and target particle, fitted on a pilot ensemble."""

    key: str
    particle: int
    cutoff: ClassCutoff
    phi_v: ProductBump
    phi_x: ProductBump
    phi_all_v: ProductBump
    phi_all_x: ProductBump
    n_pilot: int
    pilot_count: int
    grid_v: Tuple[float, float]
    grid_x: Tuple[float, float]


def target_particle(cls: EventOrderClass) -> int:
    """Particle set by the class's last event (first particle of a collision); 0 without events."""
    if cls.m == 0:
        return 0
    return cls.I[cls.m - 1][1]


def pilot_rts(cfg: ModelConfig, seed: int, n_paths: int, workers: int = 1) -> List[ReducedTrajectory]:
    out = []
    for part in iter_path_chunks(cfg, seed + PILOT_SEED_OFFSET, n_paths, prepare, workers=workers):
        out += [rt for rt in part if rt is not None]
    return out


def class_counts(rts: Iterable[ReducedTrajectory], tie_tol: float = 1e-12) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for rt in rts:
        try:
            key = classify(rt, None, tie_tol).key
        except HorizonOnEvent:
            key = "horizon_on_event"
        counts[key] = counts.get(key, 0) + 1
    return counts


def plan_class(cfg: ModelConfig, key: str, rts: Sequence[ReducedTrajectory], margins: Optional[Dict] = None) -> ClassPlan:
    """Fit a :class:`ClassPlan` on pilot paths."""
    cls0 = parse_class_key(key)
    i = target_particle(cls0)
    k = get_kernels(cfg)
    us, vs, xs, allv, allx = [], [], [], [], []
    for rt in rts:
        try:
            cls = classify(rt, None, cfg.tie_tol)
        except HorizonOnEvent:
            continue
        if cls.key != key:
            continue
        view = slot_view(rt, cls, i, 0, cfg, k)
        us.append(view.u0)
        vs.append(view.velocity(view.u0))
        xs.append(view.position(view.u0))
        traj = rt.source
        allv.append(np.ravel(traj.velocities_at(rt.t_max)))
        allx.append(np.ravel(traj.positions_at(rt.t_max)))
    if len(us) < 10:
        raise InsufficientPaths(f"class {key}: only {len(us)} pilot paths")
    cutoff = fit_cutoff(key, i, us, **(margins or {}))

    def bump(samples):
        a = np.asarray(samples)
        return ProductBump(tuple(a.mean(axis=0)), tuple(2.0 * a.std(axis=0, ddof=1)))

    vs_a, xs_a = np.asarray(vs), np.asarray(xs)
    return ClassPlan(
        key,
        i,
        cutoff,
        bump(vs),
        bump(xs),
        bump(allv),
        bump(allx),
        len(rts),
        len(us),
        (float(vs_a[:, 0].min()), float(vs_a[:, 0].max())),
        (float(xs_a[:, 0].min()), float(xs_a[:, 0].max())),
    )


IBP_CASES = ("first_order", "second_order", "mixed", "mixed_swapped", "unrestricted_first_order")


class ClassIbpStats:
    """Per-path sides of the class-restricted integration by parts identities.

    ``orders`` selects which of :data:`IBP_CASES` to evaluate. Returns
    ``None`` for paths outside the class.
    """

    def __init__(self, cfg: ModelConfig, plan: ClassPlan, target: str, axis: int, orders: Sequence[str] = IBP_CASES, max_depth: int = 3):
        self.cfg, self.plan, self.target, self.axis = cfg, plan, target, axis
        self.orders = tuple(orders)
        self.max_depth = max_depth

    def __call__(self, idx: int, traj):
        rt = prepare(idx, traj)
        if rt is None:
            return None
        cfg, plan = self.cfg, self.plan
        try:
            cls = classify(rt, None, cfg.tie_tol)
        except HorizonOnEvent:
            return None
        if cls.key != plan.key:
            return None
        k = get_kernels(cfg)
        i = plan.particle
        view = slot_view(rt, cls, i, self.axis, cfg, k)
        G = plan.cutoff
        g = G.value_u(view, view.u0)
        if self.target == "v":
            y = view.velocity(view.u0)
            phi = plan.phi_v
            full = np.ravel(rt.source.velocities_at(rt.t_max))
            phi_all = plan.phi_all_v
        else:
            y = view.position(view.u0)
            phi = plan.phi_x
            full = np.ravel(rt.source.positions_at(rt.t_max))
            phi_all = plan.phi_all_x
        pv, pg, ph = phi.derivs(y)
        r = self.axis
        d = len(y)
        out = {"y": float(y[r]), "G": g}
        if pv == 0.0 and not np.any(pg):
            zero = {c: (0.0, 0.0) for c in self.orders}
            out.update(zero)
            out["H"] = self._h1(rt, cls, view)
            return out
        h1 = self._h1(rt, cls, view)
        out["H"] = h1
        for case in self.orders:
            if case == "first_order":
                out[case] = (pg[r] * g, pv * h1)
            elif case == "second_order":
                out[case] = (ph[r, r] * g, pv * self._halpha(rt, cls, view, (r, r)))
            elif case == "mixed":
                s = (r + 1) % d
                out[case] = (ph[r, s] * g, pv * self._halpha(rt, cls, view, (r, s)))
            elif case == "mixed_swapped":
                s = (r + 1) % d
                out[case] = (ph[r, s] * g, pv * self._halpha(rt, cls, view, (s, r)))
            elif case == "unrestricted_first_order":
                av, ag, _ = phi_all.derivs(full)
                out[case] = (ag[i * d + r] * g, av * h1)
        return out

    def _h1(self, rt, cls, view) -> float:
        G = self.plan.cutoff
        if self.target == "v":
            return H_v(rt, cls, self.plan.particle, self.axis, G, self.cfg, view=view)
        return H_x(rt, cls, self.plan.particle, self.axis, G, self.cfg, view=view)

    def _halpha(self, rt, cls, view, seq) -> float:
        return H_alpha(rt, cls, seq, self.plan.particle, self.plan.cutoff, self.cfg, max_depth=self.max_depth, view=view, target=self.target)


@dataclass
class ClassIbpResult:
    stats: Dict[str, PairStats]
    samples: List[Tuple[float, float, float]]
    n_total: int


def accumulate_class_ibp(chunks: Iterable[List], orders: Sequence[str] = IBP_CASES, keep_samples: bool = True) -> ClassIbpResult:
    stats = {c: PairStats() for c in orders}
    samples = []
    total = 0
    for part in chunks:
        for item in part:
            total += 1
            if item is None:
                for c in orders:
                    stats[c].add_zeros(1)
                continue
            for c in orders:
                stats[c].add(*item[c])
            if keep_samples:
                samples.append((item["y"], item["G"], item["H"]))
    return ClassIbpResult(stats, samples, total)


def _default_key(pilot: Sequence[ReducedTrajectory], cfg: ModelConfig) -> str:
    counts = class_counts(pilot, cfg.tie_tol)
    counts.pop("horizon_on_event", None)
    return max(sorted(counts), key=counts.get)


def density_ibp_suite(
    cfg: ModelConfig,
    vcfg: VerifyConfig,
    dcfg: DensityConfig,
    seed: int,
    n_paths: int,
    key: Optional[str] = None,
    target: str = "v",
    workers: int = 1,
    orders: Sequence[str] = IBP_CASES,
    store=None,
) -> List[Dict]:
    """Class-restricted integration by parts for one class (default: the most populated one)."""
    pilot = pilot_rts(cfg, seed, dcfg.pilot_paths, workers)
    key = key or _default_key(pilot, cfg)
    plan = plan_class(cfg, key, pilot)
    fn = ClassIbpStats(cfg, plan, target, dcfg.axis, orders, dcfg.max_depth)
    res = accumulate_class_ibp(path_chunks(cfg, seed, n_paths, fn, workers, store), orders)
    return class_ibp_reports(res, key, target, plan.particle, dcfg.axis, vcfg.n_sigma)


def class_ibp_reports(res: "ClassIbpResult", key: str, target: str, particle: int, axis: int, n_sigma: float) -> List[Dict]:
    h_max = max((abs(s[2]) for s in res.samples), default=0.0)
    finite = all(math.isfinite(s[2]) for s in res.samples)
    out = []
    for c, st in res.stats.items():
        rep = st.report(f"class_ibp[{key}][{target}][{c}]", n_sigma, class_key=key, target=target, particle=particle, coordinate=axis, h_max=h_max, h_finite=finite)
        if c == "unrestricted_first_order":
            # reported, not gated
            rep["gated"] = False
        out.append(rep)
    return out


class MultiClassStats:
    """Target component, cutoff and first-order weight for every planned class."""

    def __init__(self, cfg: ModelConfig, plans: Dict[str, ClassPlan], target: str, axis: int):
        self.cfg, self.plans, self.target, self.axis = cfg, plans, target, axis

    def __call__(self, idx: int, traj):
        rt = prepare(idx, traj)
        if rt is None:
            return None
        try:
            cls = classify(rt, None, self.cfg.tie_tol)
        except HorizonOnEvent:
            return None
        plan = self.plans.get(cls.key)
        if plan is None:
            return None
        item = ClassIbpStats(self.cfg, plan, self.target, self.axis, ())(idx, rt)
        return (cls.key, item["y"], item["G"], item["H"])


def plan_classes(cfg: ModelConfig, pilot: Sequence[ReducedTrajectory], keys: Optional[Sequence[str]] = None) -> Tuple[Dict[str, ClassPlan], Dict[str, str]]:
    """Plans for the requested classes (default: every class seen in the pilot)."""
    if keys is None:
        counts = class_counts(pilot, cfg.tie_tol)
        counts.pop("horizon_on_event", None)
        keys = sorted(counts, key=lambda k: (-counts[k], k))
    plans, failures = {}, {}
    for key in keys:
        try:
            plans[key] = plan_class(cfg, key, pilot)
        except (InsufficientPaths, NotPerturbable) as exc:
            failures[key] = str(exc)
    return plans, failures


def density_tables(cfg: ModelConfig, dcfg: DensityConfig, seed: int, n_paths: int, key: Optional[str], target: str, workers: int = 1, store=None):
    """Class-restricted density tables; classes short of paths are listed in the second return value."""
    pilot = pilot_rts(cfg, seed, dcfg.pilot_paths, workers)
    plans, failures = plan_classes(cfg, pilot, None if key is None else [key])
    samples: Dict[str, List] = {k: [] for k in plans}
    total = 0
    for part in path_chunks(cfg, seed, n_paths, MultiClassStats(cfg, plans, target, dcfg.axis), workers, store):
        for item in part:
            total += 1
            if item is not None:
                samples[item[0]].append(item[1:])
    tables = {}
    for k, plan in plans.items():
        lo, hi = plan.grid_v if target == "v" else plan.grid_x
        grid = np.linspace(lo, hi, dcfg.grid_points)
        try:
            tables[k] = class_density(samples[k], total, k, target, plan.particle, dcfg.axis, grid, dcfg.n_min)
        except InsufficientPaths as exc:
            failures[k] = str(exc)
    return tables, failures


SUITES = ("exercise", "ibp2", "flow", "duality", "density-ibp")
