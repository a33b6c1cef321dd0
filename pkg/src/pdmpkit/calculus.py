"""Calculus on reduced trajectories.

Two layers live here.

Pointwise formulas for one collision: the Jacobian of ``e -> v*(e)``, its
inverse and divergence, the weight ``d(v, v', e)``, and quadrature checks of
the hemisphere and wall integration-by-parts identities.

Path functionals: product-form test functionals of the reduced coordinates,
the velocity-perturbation process ``h``, directional derivatives along the
coordinate flow, the weight ``z^h`` and the divergence ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig
from .errors import InvalidCoordinate, NearSingular, OrderChanged, UnsupportedDirection
from .geometry import cap_quadrature
from .kernels import Bump, Kernels, get_kernels
from .reduced import Direction, ReducedTrajectory, flow, realized_reflections, reconstruct_reduced
from .simulator import Collision, Reflection, Trajectory

Vec = Tuple[float, ...]

# ---------------------------------------------------------------------------
# pointwise collision formulas


def _c_w(v, vp, e):
    v, vp, e = (np.asarray(a, dtype=float) for a in (v, vp, e))
    w = v - vp
    return e, w, float(e @ w)


def singular_threshold(cfg: ModelConfig) -> float:
    """Smallest admissible ``|<e, v - v'>|`` for the inverse-Jacobian formulas."""
    return 0.5 * cfg.delta_angle * cfg.r0


def vstar(v, vp, e) -> np.ndarray:
    e, w, c = _c_w(v, vp, e)
    return np.asarray(v, dtype=float) - c * e


def jacobian_vstar(v, vp, e) -> np.ndarray:
    """``d v*/d e = -e (v-v')^T - <e, v-v'> I``."""
    e, w, c = _c_w(v, vp, e)
    return -np.outer(e, w) - c * np.eye(len(e))


def jacobian_vstar_inverse(v, vp, e, min_c: float = 0.0) -> np.ndarray:
    e, w, c = _c_w(v, vp, e)
    if abs(c) < min_c or c == 0.0:
        raise NearSingular(f"|<e, v - v'>| = {abs(c):.3g} below {min_c:.3g}")
    return np.outer(e, w) / (2.0 * c * c) - np.eye(len(e)) / c


def divergence_inverse_jacobian(v, vp, e, min_c: float = 0.0) -> np.ndarray:
    """Column-wise ambient divergence of the inverse Jacobian, ``(d/2) w / c^2``."""
    e, w, c = _c_w(v, vp, e)
    if abs(c) < min_c or c == 0.0:
        raise NearSingular(f"|<e, v - v'>| = {abs(c):.3g} below {min_c:.3g}")
    return 0.5 * len(e) * w / (c * c)


def d_weight(v, vp, e, grad_log_b: Optional[Callable] = None) -> np.ndarray:
    """``[w (d + <e, g>) - 2 c g] / (2 c^2)`` with ``g`` the ambient gradient of ``log B``.

    ``grad_log_b=None`` is the constant-kernel mode (``g = 0``), meant for
    tests only.
    """
    e, w, c = _c_w(v, vp, e)
    d = len(e)
    g = np.zeros(d) if grad_log_b is None else np.asarray(grad_log_b(v, vp, e), dtype=float)
    return (w * (d + float(e @ g)) - 2.0 * c * g) / (2.0 * c * c)


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian ``J[p, k] = d fun_p / d x_k``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(len(x)):
        dx = np.zeros_like(x)
        dx[k] = h
        cols.append((np.asarray(fun(x + dx)) - np.asarray(fun(x - dx))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def fd_divergence_columns(mat_fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """``(div M)_l = sum_k d M[k, l] / d x_k`` by central differences."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(len(x))
    for k in range(len(x)):
        dx = np.zeros_like(x)
        dx[k] = h
        out += (np.asarray(mat_fun(x + dx))[k] - np.asarray(mat_fun(x - dx))[k]) / (2.0 * h)
    return out


def exercise_d_sides(v, vp, e, psi, div_psi, B: Callable, grad_log_b: Optional[Callable], h: float = 1e-6) -> Tuple[float, float]:
    """Both sides of ``div_e[J^{-1} psi(v*) B] = (div psi)(v*) B + <psi(v*), d> B``.

    The left side is a central-difference divergence in ambient coordinates;
    ``B`` is evaluated off the sphere through its ambient extension.
    """
    v = np.asarray(v, dtype=float)
    vp = np.asarray(vp, dtype=float)

    def field(ee):
        return jacobian_vstar_inverse(v, vp, ee) @ np.asarray(psi(vstar(v, vp, ee))) * B(v, vp, ee)

    lhs = float(np.trace(fd_jacobian(field, np.asarray(e, dtype=float), h)))
    vs = vstar(v, vp, e)
    b = B(v, vp, e)
    rhs = float(div_psi(vs)) * b + float(np.asarray(psi(vs)) @ d_weight(v, vp, e, grad_log_b)) * b
    return lhs, rhs


# ---------------------------------------------------------------------------
# smooth compactly supported test functions on velocity space


@dataclass(frozen=True)
class RadialBump:
    """``exp(-1 / (1 - |u - c|^2 / rho^2))`` inside the ball ``|u - c| < rho``."""

    center: Tuple[float, ...]
    rho: float

    def __call__(self, u) -> float:
        q = 1.0 - float(np.sum((np.asarray(u) - self.center) ** 2)) / self.rho**2
        return math.exp(-1.0 / q) if q > 0 else 0.0

    def grad(self, u) -> np.ndarray:
        du = np.asarray(u, dtype=float) - self.center
        q = 1.0 - float(du @ du) / self.rho**2
        if q <= 0:
            return np.zeros_like(du)
        return math.exp(-1.0 / q) * (-2.0 / (q * q * self.rho**2)) * du


@dataclass(frozen=True)
class BumpField:
    """Vector field ``A * bump(u)`` and its divergence."""

    amplitude: Tuple[float, ...]
    bump: RadialBump

    def __call__(self, u) -> np.ndarray:
        return np.asarray(self.amplitude) * self.bump(u)

    def div(self, u) -> float:
        return float(np.asarray(self.amplitude) @ self.bump.grad(u))


def hemisphere_ibp_sides(v, vp, phi: RadialBump, psi: BumpField, kernels: Kernels, order: int) -> Tuple[float, float]:
    """Both sides of the inner hemisphere identity

    ``int <grad phi(v*), psi(v*)> B de = -int phi(v*) [div psi(v*) + <psi(v*), d>] B de``

    with ``B`` the normalised impact density, by band quadrature.
    """
    ker = kernels.collision
    v = tuple(float(a) for a in v)
    vp = tuple(float(a) for a in vp)
    w = np.subtract(v, vp)
    nodes, weights = cap_quadrature(w, ker.delta, 1.0 - ker.delta, order)
    Z = ker.normalizer(v, vp, order)
    lhs = rhs = 0.0
    for e, wt in zip(nodes, weights):
        e = tuple(e)
        if not ker.admissible(v, vp, e):
            continue
        b = ker.B(v, vp, e) / Z
        if b == 0.0:
            continue
        vs = vstar(v, vp, e)
        lhs += wt * float(phi.grad(vs) @ psi(vs)) * b
        dw = d_weight(v, vp, e, ker.grad_log_B)
        rhs -= wt * phi(vs) * (psi.div(vs) + float(psi(vs) @ dw)) * b
    return lhs, rhs


def _cone_quadrature(x_hit, kernels: Kernels, order: int):
    """Nodes and weights over the support of the wall density at ``x_hit``."""
    red = kernels.redistribution
    d = red.d
    n = np.asarray(x_hit, dtype=float) / np.linalg.norm(x_hit)
    inward = -n
    gx, gw = np.polynomial.legendre.leggauss(order)
    r = 0.5 * (red.v_max - red.v_min) * (gx + 1.0) + red.v_min
    rw = 0.5 * (red.v_max - red.v_min) * gw
    if d == 2:
        phimax = math.acos(red.eps)
        ph = phimax * gx
        pw = phimax * gw
        perp = np.array([-inward[1], inward[0]])
        om = np.cos(ph)[:, None] * inward + np.sin(ph)[:, None] * perp
        nodes = (om[:, None, :] * r[None, :, None]).reshape(-1, 2)
        weights = (pw[:, None] * (rw * r)[None, :]).reshape(-1)
        return nodes, weights
    from .geometry import orthonormal_frame

    frame = orthonormal_frame(inward)
    t1, t2 = frame[1], frame[2]
    mu = 0.5 * (1.0 - red.eps) * (gx + 1.0) + red.eps
    mw = 0.5 * (1.0 - red.eps) * gw
    nphi = 2 * order
    a = 2.0 * math.pi * np.arange(nphi) / nphi
    sn = np.sqrt(1.0 - mu * mu)
    om = (mu[:, None, None] * inward + sn[:, None, None] * (np.cos(a)[None, :, None] * t1 + np.sin(a)[None, :, None] * t2)).reshape(-1, 3)
    aw = np.repeat(mw * (2.0 * math.pi / nphi), nphi)
    nodes = (om[:, None, :] * r[None, :, None]).reshape(-1, 3)
    weights = (aw[:, None] * (rw * r * r)[None, :]).reshape(-1)
    return nodes, weights


def _wall_density_arrays(x_hit, V: np.ndarray, kernels: Kernels):
    """Vectorised wall density ``m`` and ``grad log m`` at velocities ``V``."""
    red = kernels.redistribution
    n = np.asarray(x_hit, dtype=float) / np.linalg.norm(x_hit)
    s = np.linalg.norm(V, axis=1)
    vn = (V @ n) / s
    c = -vn
    m = red.C * red.cone.values(c) * red.speed.values(s)
    ok = m > 0
    g = np.zeros_like(V)
    if ok.any():
        cc, ss, vv, vnn = c[ok], s[ok], V[ok], vn[ok]
        a, b = red.cone.a, red.cone.b
        qc = (cc - a) * (b - cc)
        gc = (a + b - 2 * cc) / (qc * qc)
        a2, b2 = red.speed.a, red.speed.b
        qs = (ss - a2) * (b2 - ss)
        gs = (a2 + b2 - 2 * ss) / (qs * qs)
        g[ok] = -gc[:, None] * (n[None, :] - vnn[:, None] * vv / ss[:, None]) / ss[:, None] + gs[:, None] * vv / ss[:, None]
    return m, g


def _bump_arrays(bump: RadialBump, V: np.ndarray):
    du = V - np.asarray(bump.center)
    q = 1.0 - np.sum(du * du, axis=1) / bump.rho**2
    val = np.zeros(len(V))
    grad = np.zeros_like(V)
    ok = q > 0
    val[ok] = np.exp(-1.0 / q[ok])
    grad[ok] = (val[ok] * (-2.0 / (q[ok] ** 2 * bump.rho**2)))[:, None] * du[ok]
    return val, grad


def boundary_ibp_sides(x_hit, phi: RadialBump, psi: BumpField, kernels: Kernels, order: int = 300) -> Tuple[float, float]:
    """``int <grad phi, psi> m dv`` and ``-int phi [div psi + <psi, grad log m>] m dv``."""
    V, W = _cone_quadrature(x_hit, kernels, order)
    m, g = _wall_density_arrays(x_hit, V, kernels)
    pv, pg = _bump_arrays(phi, V)
    bv, bg = _bump_arrays(psi.bump, V)
    A = np.asarray(psi.amplitude)
    P = bv[:, None] * A[None, :]
    divp = bg @ A
    lhs = float(np.sum(W * m * np.sum(pg * P, axis=1)))
    rhs = -float(np.sum(W * m * pv * (divp + np.sum(P * g, axis=1))))
    return lhs, rhs


def boundary_ibp_residual(x_hit, phi: RadialBump, psi: BumpField, kernels: Kernels, order: int = 300) -> float:
    """``|int <grad phi, psi> m + int phi div psi m + int phi <psi, grad m>|`` over velocity space."""
    lhs, rhs = boundary_ibp_sides(x_hit, phi, psi, kernels, order)
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# test functionals

SlotKey = Tuple  # ("y0",) | ("g", i, j, k) | ("a", i, j, k) | ("b", i, l)


@dataclass(frozen=True)
class Factor:
    """One factor ``f(slot value)`` of a product functional.

    ``f`` and ``grad`` receive a float for timing controls and a numpy vector
    otherwise. Reflection factors must be even.
    """

    slot: SlotKey
    f: Callable
    grad: Callable


def slot_value(rt: ReducedTrajectory, slot: SlotKey):
    """Value of a coordinate slot, or ``None`` if the slot is absent."""
    kind = slot[0]
    if kind == "y0":
        return rt.y0_flat()
    if kind == "g":
        g = rt.gammas.get(slot[1:])
        return None if g is None else g
    if kind == "a":
        a = rt.collision_vs.get(slot[1:])
        return None if a is None else np.asarray(a)
    if kind == "b":
        b = rt.reflection_vs.get(slot[1:])
        return None if b is None else np.asarray(b)
    raise ValueError(f"unknown slot kind {kind!r}")


def direction_slot(H: Direction, slot: SlotKey):
    """The component of ``H`` acting on ``slot`` (``None`` if zero)."""
    kind = slot[0]
    if kind == "y0":
        return None if H.a0 is None else np.asarray(H.a0)
    if kind == "g":
        return H.c.get(slot[1:])
    if kind == "a":
        a = H.alpha_c.get(slot[1:])
        return None if a is None else np.asarray(a)
    b = H.alpha_r.get(slot[1:])
    return None if b is None else np.asarray(b)


def direction_slots(H: Direction) -> List[SlotKey]:
    out: List[SlotKey] = []
    if H.a0 is not None and any(a != 0.0 for a in H.a0):
        out.append(("y0",))
    out += [("g",) + k for k, c in H.c.items() if c != 0.0]
    out += [("a",) + k for k, a in H.alpha_c.items() if any(x != 0.0 for x in a)]
    out += [("b",) + k for k, b in H.alpha_r.items() if any(x != 0.0 for x in b)]
    return out


class TestFunctional:
    """``F = f0(y0) * prod f_g(gamma) * prod f_a(a) * prod f_b(b)``; zero when a slot is absent."""

    __test__ = False  # not a pytest class

    def __init__(self, factors: Sequence[Factor]):
        self.factors = tuple(factors)
        self.slots = frozenset(f.slot for f in self.factors)

    def _values(self, rt: ReducedTrajectory):
        vals = []
        for fac in self.factors:
            x = slot_value(rt, fac.slot)
            if x is None:
                return None
            vals.append(x)
        return vals

    def value(self, rt: ReducedTrajectory) -> float:
        vals = self._values(rt)
        if vals is None:
            return 0.0
        out = 1.0
        for fac, x in zip(self.factors, vals):
            out *= fac.f(x)
        return out

    def supports(self, H: Direction) -> bool:
        return all(s in self.slots for s in direction_slots(H))

    def derivative(self, rt: ReducedTrajectory, H: Direction, cfg: Optional[ModelConfig] = None) -> float:
        """Analytic directional derivative (product rule over the factors)."""
        if not self.supports(H):
            raise UnsupportedDirection("direction moves coordinates this functional does not depend on")
        vals = self._values(rt)
        if vals is None:
            return 0.0
        fs = [fac.f(x) for fac, x in zip(self.factors, vals)]
        hproc = None
        total = 0.0
        for q, (fac, x) in enumerate(zip(self.factors, vals)):
            kind = fac.slot[0]
            if kind == "y0":
                comp = direction_slot(H, fac.slot)
            elif kind == "g":
                comp = direction_slot(H, fac.slot)
            else:
                if direction_slot(H, fac.slot) is None:
                    continue
                if hproc is None:
                    hproc = build_h(H, rt)
                comp = hproc.after_slot(fac.slot)
            if comp is None:
                continue
            dq = float(np.dot(np.asarray(fac.grad(x)), comp)) if kind != "g" else fac.grad(x) * comp
            if dq == 0.0:
                continue
            rest = 1.0
            for p, fv in enumerate(fs):
                if p != q:
                    rest *= fv
            total += dq * rest
        return total


class ProductFunctional:
    """Pointwise product of functionals, differentiated by the product rule."""

    def __init__(self, *parts):
        self.parts = parts

    def value(self, rt: ReducedTrajectory) -> float:
        out = 1.0
        for p in self.parts:
            out *= p.value(rt)
        return out

    def supports(self, H: Direction) -> bool:
        return all(p.supports(H) for p in self.parts)

    def derivative(self, rt: ReducedTrajectory, H: Direction, cfg: Optional[ModelConfig] = None) -> float:
        vals = [p.value(rt) for p in self.parts]
        total = 0.0
        for q, p in enumerate(self.parts):
            rest = 1.0
            for r, v in enumerate(vals):
                if r != q:
                    rest *= v
            if rest != 0.0:
                total += p.derivative(rt, H, cfg) * rest
        return total


class VelocityAt:
    """``phi(v(t))`` for the full velocity vector at a fixed time ``t``.

    Its derivative uses the perturbation process: ``<grad phi, h(t)>``.
    """

    def __init__(self, phi: Callable, grad_phi: Callable, t: float):
        self.phi = phi
        self.grad_phi = grad_phi
        self.t = t

    def value(self, rt: ReducedTrajectory) -> float:
        return float(self.phi(velocities_at(rt, self.t)))

    def supports(self, H: Direction) -> bool:
        return True

    def derivative(self, rt: ReducedTrajectory, H: Direction, cfg: Optional[ModelConfig] = None) -> float:
        h = build_h(H, rt).at(self.t)
        return float(np.asarray(self.grad_phi(velocities_at(rt, self.t))).ravel() @ h.ravel())


def velocities_at(rt: ReducedTrajectory, t: float) -> np.ndarray:
    traj = rt.source
    if traj is None:
        raise ValueError("reduced trajectory has no attached source path")
    return np.asarray(traj.velocities_at(t))


# ---------------------------------------------------------------------------
# perturbation process


@dataclass(frozen=True)
class PerturbationProcess:
    """Piecewise constant ``h(t)`` (shape ``(N, d)``), right-continuous at event times."""

    times: Tuple[float, ...]
    values: Tuple[np.ndarray, ...]
    slot_values: Dict[SlotKey, np.ndarray]

    def at(self, t: float) -> np.ndarray:
        idx = 0
        for q, ti in enumerate(self.times):
            if ti <= t:
                idx = q + 1
            else:
                break
        return self.values[idx]

    def after_slot(self, slot: SlotKey) -> Optional[np.ndarray]:
        return self.slot_values.get(slot)


def build_h(alpha: Direction, rt: ReducedTrajectory, h0: Optional[np.ndarray] = None) -> PerturbationProcess:
    """Velocity perturbation process driven by ``alpha``.

    ``h0`` defaults to the velocity block of ``alpha.a0``. At a collision of
    ``(i, j)`` the pair becomes ``(a, h_i + h_j - a)`` with ``a`` the
    direction's collision slot (zero if absent); at a reflection the
    particle's row becomes the reflection slot (zero if absent).
    """
    N, d = rt.N, rt.d
    if h0 is None:
        if alpha.a0 is not None:
            h0 = np.asarray(alpha.a0[N * d :], dtype=float).reshape(N, d)
        else:
            h0 = np.zeros((N, d))
    h = np.array(h0, dtype=float).reshape(N, d)
    times, values = [], [h.copy()]
    slots: Dict[SlotKey, np.ndarray] = {}
    zero = np.zeros(d)
    for ident, t in rt.event_order:
        if ident[0] == "C":
            _, i, j, k = ident
            a = np.asarray(alpha.alpha_c.get((i, j, k), zero), dtype=float)
            hj = h[i] + h[j] - a
            h[i] = a
            h[j] = hj
            slots[("a", i, j, k)] = a.copy()
        else:
            _, i, l = ident
            b = np.asarray(alpha.alpha_r.get((i, l), zero), dtype=float)
            h[i] = b
            slots[("b", i, l)] = b.copy()
        times.append(t)
        values.append(h.copy())
    return PerturbationProcess(tuple(times), tuple(values), slots)


# ---------------------------------------------------------------------------
# flow, derivative, weight, divergence


def directional_derivative(F, rt: ReducedTrajectory, H: Direction, cfg: Optional[ModelConfig] = None) -> float:
    return F.derivative(rt, H, cfg)


def _flow_value(F, rt, H, s, cfg, kernels):
    return F.value(flow(rt, H, s, cfg, kernels))


def flow_derivative_fd(
    F,
    rt: ReducedTrajectory,
    H: Direction,
    cfg: ModelConfig,
    s0: float = 1e-4,
    kernels: Optional[Kernels] = None,
    max_halvings: int = 30,
) -> Tuple[float, float]:
    """Richardson-extrapolated central difference of ``F`` along the flow.

    Returns ``(estimate, step)``. The base step is ``s0 / |H|`` and is halved
    until both levels keep the event order.
    """
    nrm = math.sqrt(H.norm2())
    if nrm == 0.0:
        return 0.0, 0.0
    s = s0 / nrm
    last: Exception = OrderChanged("no step tried")
    for _ in range(max_halvings):
        try:
            d1 = (_flow_value(F, rt, H, s, cfg, kernels) - _flow_value(F, rt, H, -s, cfg, kernels)) / (2 * s)
            d2 = (_flow_value(F, rt, H, s / 2, cfg, kernels) - _flow_value(F, rt, H, -s / 2, cfg, kernels)) / s
            return (4.0 * d2 - d1) / 3.0, s
        except (OrderChanged, InvalidCoordinate) as exc:
            last = exc
            s *= 0.5
    raise last


def impact_direction(v_pre: Sequence[float], a_post: Sequence[float]) -> np.ndarray:
    """Recover ``e`` from ``v - v* = <e, w> e`` (``<e, w> > 0`` on the hemisphere)."""
    diff = np.subtract(v_pre, a_post)
    n = float(np.linalg.norm(diff))
    if n == 0.0:
        raise NearSingular("collision transferred no momentum")
    return diff / n


def z_weight(rt: ReducedTrajectory, H: Direction, cfg: ModelConfig, kernels: Optional[Kernels] = None) -> float:
    """``<a0, grad ln p0> + sum c (ln g)' + sum <alpha, d(v, v', e)> + sum <beta, grad ln m>``."""
    k = kernels or get_kernels(cfg)
    total = 0.0
    N, d = rt.N, rt.d
    if H.a0 is not None and any(a != 0.0 for a in H.a0):
        gx, gv = k.initial.grad_log(rt.x0, rt.v0)
        g = [c for x in gx for c in x] + [c for v in gv for c in v]
        total += sum(a * b for a, b in zip(H.a0, g))
    for key, c in H.c.items():
        if c != 0.0:
            total += c * k.gamma.dlog(rt.gammas[key])
    if H.alpha_c or H.alpha_r:
        traj = rt.source if rt.source is not None else reconstruct_reduced(rt, cfg, k)
        by_id = {ev.identity: ev for ev in traj.events}
        for key, al in H.alpha_c.items():
            ev = by_id[("C",) + key]
            vi, vj = ev.v_pre
            e = ev.e if ev.e is not None else impact_direction(vi, ev.v_post[0])
            total += float(np.dot(al, d_weight(vi, vj, e, k.collision.grad_log_B)))
        for key, be in H.alpha_r.items():
            ev = by_id[("R",) + key]
            total += float(np.dot(be, k.redistribution.grad_log_density(ev.x_hit, ev.v_post)))
    return total


def delta(Phi: Sequence[Tuple[object, Direction]], rt: ReducedTrajectory, cfg: ModelConfig, kernels: Optional[Kernels] = None) -> float:
    """``-sum_j (d_{h_j} G_j + z^{h_j} G_j)`` for ``Phi = sum_j G_j h_j``."""
    total = 0.0
    for G, H in Phi:
        g = G.value(rt)
        dg = G.derivative(rt, H, cfg)
        z = z_weight(rt, H, cfg, kernels) if g != 0.0 else 0.0
        total -= dg + z * g
    return total


def pairing(F, Phi: Sequence[Tuple[object, Direction]], rt: ReducedTrajectory, cfg: ModelConfig) -> float:
    """``<grad F, Phi> = sum_j G_j d_{h_j} F``."""
    return sum(G.value(rt) * F.derivative(rt, H, cfg) for G, H in Phi)


def scale_field(Phi: Sequence[Tuple[object, Direction]], G) -> List[Tuple[object, Direction]]:
    """``Phi * G`` as a field with coefficients ``G_j * G``."""
    return [(ProductFunctional(Gj, G), H) for Gj, H in Phi]
