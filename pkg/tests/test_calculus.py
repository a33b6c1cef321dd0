import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdmpkit.calculus import (
    BumpField,
    Factor,
    ProductFunctional,
    RadialBump,
    TestFunctional,
    VelocityAt,
    boundary_ibp_residual,
    build_h,
    d_weight,
    delta,
    directional_derivative,
    divergence_inverse_jacobian,
    exercise_d_sides,
    fd_divergence_columns,
    fd_jacobian,
    flow_derivative_fd,
    impact_direction,
    jacobian_vstar,
    jacobian_vstar_inverse,
    pairing,
    vstar,
    z_weight,
)
from pdmpkit.config import ModelConfig
from pdmpkit.errors import NearSingular, UnsupportedDirection
from pdmpkit.kernels import get_kernels
from pdmpkit.reduced import Direction, flow, random_direction
from pdmpkit.simulator import map_paths
from pdmpkit.verify import prepare

CFG = ModelConfig()
K = get_kernels(CFG)
V, VP, E = (1.0, 0.0), (-1.0, 0.0), (1.0, 0.0)


def test_jacobian_examples():
    assert np.array_equal(jacobian_vstar(V, VP, E), np.array([[-4.0, 0.0], [0.0, -2.0]]))
    assert np.allclose(jacobian_vstar_inverse(V, VP, E), [[-0.25, 0.0], [0.0, -0.5]], atol=1e-15)
    assert np.allclose(divergence_inverse_jacobian(V, VP, E), [0.5, 0.0], atol=1e-15)


def test_near_singular():
    with pytest.raises(NearSingular):
        jacobian_vstar_inverse(V, VP, (0.0, 1.0))
    with pytest.raises(NearSingular):
        divergence_inverse_jacobian(V, VP, (1e-4, 1.0), min_c=1e-2)


unit_angle = st.floats(0, 2 * math.pi)
comp = st.floats(-2, 2, allow_nan=False)


def _inputs(v, vp, a):
    e = np.array([math.cos(a), math.sin(a)])
    c = float(e @ np.subtract(v, vp))
    return e, c


@settings(max_examples=200, deadline=None)
@given(st.tuples(comp, comp), st.tuples(comp, comp), unit_angle)
def test_jacobian_properties(v, vp, a):
    e, c = _inputs(v, vp, a)
    if abs(c) < 0.05:
        return
    J = jacobian_vstar(v, vp, e)
    Ji = jacobian_vstar_inverse(v, vp, e)
    assert np.allclose(J @ Ji, np.eye(2), atol=1e-10)
    assert np.linalg.det(J) * np.linalg.det(Ji) == pytest.approx(1.0, abs=1e-10)
    w = np.subtract(v, vp)
    assert np.allclose(J + J.T, -(np.outer(e, w) + np.outer(w, e)) - 2 * c * np.eye(2), atol=1e-12)
    fd = fd_jacobian(lambda ee: vstar(v, vp, ee), e)
    assert np.allclose(fd, J, rtol=1e-6, atol=1e-6 * np.abs(J).max())
    div = divergence_inverse_jacobian(v, vp, e)
    fd_div = fd_divergence_columns(lambda ee: jacobian_vstar_inverse(v, vp, ee), e, h=1e-5)
    assert np.allclose(fd_div, div, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(div).max()))


def test_divergence_homogeneity():
    e = np.array([0.6, 0.8])
    w = np.array([1.2, 0.3])
    d1 = divergence_inverse_jacobian(w, (0.0, 0.0), e)
    d3 = divergence_inverse_jacobian(3 * w, (0.0, 0.0), e)
    assert np.allclose(d3, d1 / 3)


def test_d_weight_constant_kernel():
    e = np.array([0.6, 0.8])
    w = np.subtract((1.5, 0.2), (-0.3, 0.4))
    c = float(e @ w)
    assert np.allclose(d_weight((1.5, 0.2), (-0.3, 0.4), e, None), 2 * w / (2 * c * c))


def test_exercise_d_identity_polynomial_fields():
    rng = np.random.default_rng(2)
    fields = [
        (lambda u: np.array([1.0, 0.0]), lambda u: 0.0),
        (lambda u: np.array([u[0], u[1]]), lambda u: 2.0),
        (lambda u: np.array([u[1] ** 2, u[0] * u[1]]), lambda u: u[0]),
        (lambda u: np.array([u[0] ** 3, -u[1]]), lambda u: 3 * u[0] ** 2 - 1),
        (lambda u: np.array([u[0] * u[1], u[0] ** 2 + u[1] ** 2]), lambda u: 3 * u[1]),
    ]
    n = 0
    while n < 100:
        v = rng.uniform(-1.5, 1.5, 2)
        vp = rng.uniform(-1.5, 1.5, 2)
        w = v - vp
        if np.linalg.norm(w) < 0.5:
            continue
        u = w / np.linalg.norm(w)
        c = rng.uniform(0.2, 0.8)
        e = c * u + math.sqrt(1 - c * c) * np.array([-u[1], u[0]])
        psi, div = fields[n % 5]
        lhs, rhs = exercise_d_sides(v, vp, e, psi, div, K.collision.B, K.collision.grad_log_B)
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(rhs)), (lhs, rhs)
        n += 1


def test_boundary_ibp_zero_field():
    psi = BumpField((0.0, 0.0), RadialBump((0.0, -1.0), 0.4))
    assert boundary_ibp_residual((0.0, 1.0), RadialBump((0.0, -1.0), 0.5), psi, K, 60) == 0.0


def test_boundary_ibp_constant_phi_on_support():
    # phi == const near supp psi: only the divergence and weight terms remain and still cancel
    psi = BumpField((0.3, -0.2), RadialBump((0.2, -1.1), 0.3))
    phi = RadialBump((0.2, -1.1), 50.0)
    assert abs(boundary_ibp_residual((0.0, 1.0), phi, psi, K, 300)) <= 1e-6


# ---------------------------------------------------------------------------
# path functionals


@pytest.fixture(scope="module")
def rts():
    out = [prepare(i, t) for i, t in enumerate(map_paths(CFG, 21, 200))]
    return [rt for rt in out if rt is not None]


def test_build_h_zero_and_single_slots(rts):
    rt = next(r for r in rts if r.collision_vs and r.reflection_vs)
    zero = build_h(Direction(), rt)
    assert all(not np.any(v) for v in zero.values)
    key = next(iter(rt.collision_vs))
    u = (0.3, -0.7)
    proc = build_h(Direction(alpha_c={key: u}), rt)
    t_c = dict(rt.event_order)[("C",) + key]
    after = proc.at(t_c + 1e-12)
    i, j, _ = key
    assert np.allclose(after[i], u) and np.allclose(after[j], np.negative(u))
    assert np.allclose(np.delete(after, [i, j], axis=0), 0.0)
    rkey = next(iter(rt.reflection_vs))
    proc = build_h(Direction(a0=tuple([1.0] * (4 * CFG.N)), alpha_r={rkey: u}), rt)
    t_r = dict(rt.event_order)[("R",) + rkey]
    assert np.allclose(proc.at(t_r + 1e-12)[rkey[0]], u)


def test_derivative_trivial_cases(rts):
    rt = rts[0]
    one = TestFunctional([Factor(("y0",), lambda y: 1.0, lambda y: np.zeros(len(y)))])
    H = Direction(a0=tuple([0.3] * (4 * CFG.N)))
    assert directional_derivative(one, rt, H) == 0.0
    assert directional_derivative(one, rt, Direction()) == 0.0
    assert z_weight(rt, Direction(), CFG) == 0.0


def test_unsupported_direction(rts):
    rt = next(r for r in rts if r.gammas)
    F = TestFunctional([Factor(("y0",), lambda y: 1.0, lambda y: np.zeros(len(y)))])
    with pytest.raises(UnsupportedDirection):
        F.derivative(rt, Direction(c={next(iter(rt.gammas)): 1.0}))


def test_analytic_derivative_matches_flow_differences(rts):
    rng = np.random.default_rng(5)
    phi = lambda V: math.exp(-float(np.sum(np.asarray(V) ** 2)) / 10.0)
    gphi = lambda V: -np.asarray(V) / 5.0 * phi(V)
    F = VelocityAt(phi, gphi, CFG.t_max * (1 - 1e-6))
    for rt in rts[:40]:
        H = random_direction(rt, rng)
        ana = F.derivative(rt, H, CFG)
        num, _ = flow_derivative_fd(F, rt, H, CFG)
        assert abs(num - ana) <= 1e-4 * max(abs(ana), 1e-3)


def test_flow_zero_step_and_roundtrip(rts):
    rng = np.random.default_rng(6)
    for rt in rts[:30]:
        H = random_direction(rt, rng)
        same = flow(rt, H, 0.0, CFG)
        assert same == rt
        back = flow(flow(rt, H, 1e-6, CFG), H, -1e-6, CFG)
        assert np.max(np.abs(back.y0_flat() - rt.y0_flat())) <= 1e-12


def test_impact_direction_recovers_e():
    e = np.array([0.6, 0.8])
    v, vp = np.array([1.0, 0.5]), np.array([-0.7, -0.2])
    assert np.allclose(impact_direction(v, vstar(v, vp, e)), e)


def test_product_rule_and_delta_consistency(rts):
    # delta(G h) = -(d_h G + z G), and <grad F, G h> = G d_h F
    vidx = list(range(2 * CFG.N, 2 * CFG.N + 2))
    f = lambda y: math.exp(-float(np.sum(np.asarray(y)[vidx] ** 2)))

    def gf(y):
        out = np.zeros(len(y))
        out[vidx] = -2 * np.asarray(y)[vidx] * f(y)
        return out

    F = TestFunctional([Factor(("y0",), f, gf)])
    G = TestFunctional([Factor(("y0",), lambda y: 2.0, lambda y: np.zeros(len(y)))])
    unit = [0.0] * (4 * CFG.N)
    unit[2 * CFG.N] = 1.0
    H = Direction(a0=tuple(unit))
    FG = ProductFunctional(F, G)
    for rt in rts[:20]:
        assert FG.derivative(rt, H) == pytest.approx(2.0 * F.derivative(rt, H), rel=1e-14, abs=1e-300)
        assert pairing(F, [(G, H)], rt, CFG) == pytest.approx(2.0 * F.derivative(rt, H), rel=1e-14, abs=1e-300)
        assert delta([(G, H)], rt, CFG) == pytest.approx(-2.0 * z_weight(rt, H, CFG), rel=1e-14, abs=1e-300)
