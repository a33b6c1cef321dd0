import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdmpkit.errors import NotOnBoundary
from pdmpkit.geometry import (
    boundary_hit_time,
    cap_quadrature,
    hemisphere_quadrature,
    outward_normal,
    pair_overlap_window,
    positive_root,
)

coord = st.floats(-0.99, 0.99, allow_nan=False)
vel = st.floats(-2.0, 2.0, allow_nan=False)


@pytest.mark.parametrize(
    "x, v, t",
    [((0.0, 0.0), (1.0, 0.0), 1.0), ((0.5, 0.0), (1.0, 0.0), 0.5), ((0.0, 0.5), (1.0, 0.0), math.sqrt(0.75))],
)
def test_boundary_hit_time_examples(x, v, t):
    assert boundary_hit_time(x, v, 1.0) == pytest.approx(t, abs=1e-15)


def test_boundary_hit_time_zero_velocity():
    assert boundary_hit_time((0.1, 0.2), (0.0, 0.0), 1.0) is None


@settings(max_examples=300, deadline=None)
@given(st.tuples(coord, coord), st.tuples(vel, vel))
def test_boundary_hit_lands_on_sphere(x, v):
    if math.hypot(*x) >= 0.99 or math.hypot(*v) < 1e-3:
        return
    t = boundary_hit_time(x, v, 1.0)
    assert t > 0
    y = np.add(x, t * np.asarray(v))
    assert abs(np.linalg.norm(y) - 1.0) <= 1e-10


def test_positive_root_on_sphere_start_returns_far_crossing():
    # x on the sphere moving inward: the far crossing is the answer
    t = positive_root(1.0, 2.0 * -1.0, 0.0)
    assert t == pytest.approx(2.0)


def test_pair_overlap_head_on():
    s, t = pair_overlap_window((-1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (-1.0, 0.0), 0.5)
    assert s == pytest.approx(0.75, abs=1e-15)
    assert t == pytest.approx(1.25, abs=1e-15)


def test_pair_overlap_parallel_and_receding():
    assert pair_overlap_window((-1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (1.0, 0.0), 0.5) is None
    assert pair_overlap_window((-1.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (1.0, 0.0), 0.5) is None


@pytest.mark.parametrize("delta", [1e-3, 0.05, 0.3])
def test_pair_overlap_grazing_matches_time_stepping(delta):
    # offset 0.4 + delta > beta/2 + ... : closest approach is 0.5 + delta > beta
    xi, xj = (-1.0, 0.4), (1.0, 0.4 - 0.5 - delta)
    vi, vj = (1.0, 0.0), (-1.0, 0.0)
    out = pair_overlap_window(xi, xj, vi, vj, 0.5)
    u = np.linspace(0, 3, 300001)
    dist = np.hypot(-2.0 + 2.0 * u, 0.5 + delta)
    assert out is None
    assert dist.min() > 0.5


@settings(max_examples=300, deadline=None)
@given(st.tuples(coord, coord), st.tuples(coord, coord), st.tuples(vel, vel), st.tuples(vel, vel))
def test_pair_overlap_roots_lie_on_beta(xi, xj, vi, vj):
    beta = 0.1
    dx = np.subtract(xi, xj)
    if np.linalg.norm(dx) <= beta * 1.01:
        return
    out = pair_overlap_window(xi, xj, vi, vj, beta)
    if out is None:
        return
    s, t = out
    dv = np.subtract(vi, vj)
    assert 0 < s < t
    assert abs(np.linalg.norm(dx + s * dv) - beta) <= 1e-10 * beta
    assert abs(np.linalg.norm(dx + t * dv) - beta) <= 1e-10 * beta
    assert np.linalg.norm(dx + 0.5 * (s + t) * dv) < beta


@pytest.mark.parametrize("x", [(1.0, 0.0), (0.0, -1.0), (0.6, 0.8)])
def test_outward_normal_examples(x):
    assert outward_normal(x, 1.0) == pytest.approx(x, abs=1e-15)


def test_outward_normal_rejects_interior_point():
    with pytest.raises(NotOnBoundary):
        outward_normal((0.5, 0.0), 1.0)


def test_hemisphere_weights_sum_to_measure():
    _, w2 = hemisphere_quadrature((1.0, 0.0), 32)
    assert w2.sum() == pytest.approx(math.pi, abs=1e-12)
    _, w3 = hemisphere_quadrature((0.3, -0.2, 0.9), 16)
    assert w3.sum() == pytest.approx(2 * math.pi, abs=1e-12)


def test_hemisphere_nodes_are_on_correct_side():
    w = (0.3, -1.2)
    e, _ = hemisphere_quadrature(w, 20)
    assert np.all(e @ np.asarray(w) > 0)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0)


def test_hemisphere_cosine_moment():
    w = (2.0, 1.0)
    e, wt = hemisphere_quadrature(w, 40)
    u = np.asarray(w) / np.linalg.norm(w)
    assert float(wt @ (e @ u)) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("k", [0, 1, 2, 5, 9])
def test_hemisphere_angle_polynomials(k):
    # nodes in angle theta from w over (-pi/2, pi/2); exact for degree <= 2*order-1
    order = 10
    e, wt = hemisphere_quadrature((1.0, 0.0), order)
    th = np.arctan2(e[:, 1], e[:, 0])
    exact = ((math.pi / 2) ** (k + 1) - (-math.pi / 2) ** (k + 1)) / (k + 1)
    assert float(wt @ th**k) == pytest.approx(exact, abs=1e-10)


def test_cap_quadrature_band_measure():
    lo, hi = 0.1, 0.9
    _, wt = cap_quadrature((1.0, 0.0), lo, hi, 40)
    assert wt.sum() == pytest.approx(2 * (math.acos(lo) - math.acos(hi)), abs=1e-12)
