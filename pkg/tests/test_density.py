import math

import numpy as np
import pytest

from pdmpkit.config import ModelConfig
from pdmpkit.density import (
    FD_STEP,
    H_alpha,
    H_v,
    H_x,
    _fd,
    _smoothstep,
    _weight,
    alpha_sequence,
    class_density,
    fit_cutoff,
    gaussian_kde,
    last_event_direction,
    silverman_bandwidth,
    slot_view,
    survival_fraction,
    write_density_csv,
)
from pdmpkit.errors import DepthExceeded, InsufficientPaths, NotPerturbable, OrderChanged, UnsupportedDirection
from pdmpkit.kernels import get_kernels
from pdmpkit.reduced import classify, flow
from pdmpkit.verify import class_counts, pilot_rts, plan_class

CFG = ModelConfig()
K = get_kernels(CFG)


@pytest.fixture(scope="module")
def setup():
    rts = pilot_rts(CFG, 11, 4000)
    counts = class_counts(rts)
    key = max((k for k in counts if k.endswith("|m=1") and k.startswith("R")), key=counts.get)
    plan = plan_class(CFG, key, rts)
    members = []
    for rt in rts:
        cls = classify(rt)
        if cls.key == key:
            view = slot_view(rt, cls, plan.particle, 0, CFG, K)
            if plan.cutoff.value_u(view, view.u0) > 0.0:
                members.append((rt, cls))
    assert len(members) > 20
    return plan, members


def test_smoothstep():
    assert _smoothstep(-1.0) == 0.0 and _smoothstep(0.0) == 0.0
    assert _smoothstep(1.0) == 1.0 and _smoothstep(2.0) == 1.0
    assert _smoothstep(0.5) == pytest.approx(0.5)
    zs = np.linspace(0.01, 0.99, 50)
    vals = [_smoothstep(z) for z in zs]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_slot_moves_target_linearly_and_keeps_rho(setup):
    plan, members = setup
    i = plan.particle
    s = 1e-4
    moved = 0
    for rt, cls in members[:20]:
        for r in range(CFG.d):
            H = last_event_direction(rt, cls, i, r)
            try:
                out = flow(rt, H, s, CFG, K)
            except OrderChanged:
                continue
            view = slot_view(rt, cls, i, r, CFG, K)
            t = rt.t_max
            e = np.eye(CFG.d)[r]
            v0 = np.asarray(rt.source.velocities_at(t)[i])
            v1 = np.asarray(out.source.velocities_at(t)[i])
            x0 = np.asarray(rt.source.positions_at(t)[i])
            x1 = np.asarray(out.source.positions_at(t)[i])
            assert np.allclose(v1 - v0, s * e, atol=1e-12)
            assert np.allclose(x1 - x0, s * (t - view.rho) * e, atol=1e-11)
            assert out.event_order[cls.m - 1][1] == pytest.approx(view.rho, abs=1e-12)
            moved += 1
    assert moved > 20


def test_view_maps_match_path(setup):
    plan, members = setup
    i = plan.particle
    for rt, cls in members[:20]:
        view = slot_view(rt, cls, i, 0, CFG, K)
        t = rt.t_max
        assert np.allclose(view.velocity(view.u0), rt.source.velocities_at(t)[i], atol=1e-12)
        assert np.allclose(view.position(view.u0), rt.source.positions_at(t)[i], atol=1e-10)
        assert view.wall_gap(view.u0) > 0.0
        assert view.pair_gap(view.u0) > 0.0


def _plain_weight(view, G, seq, h):
    direction = lambda r: view.sign * np.eye(len(view.u0))[r]

    def z(u, r):
        saved, view.r = view.r, r
        out = view.z(u)
        view.r = saved
        return out

    f = lambda u: G.value_u(view, u)
    for r in seq:
        f = (lambda prev, r: lambda u: -(_fd(prev, u, direction(r), h) + (z(u, r) * prev(u) if prev(u) != 0.0 else 0.0)))(f, r)
    return f(view.u0)


@pytest.mark.parametrize("seq", [(0,), (1,), (0, 0), (0, 1), (1, 0, 1)])
def test_memoised_weight_matches_plain_recursion(setup, seq):
    plan, members = setup
    for rt, cls in members[:5]:
        view = slot_view(rt, cls, plan.particle, 0, CFG, K)
        a = _weight(view, plan.cutoff, seq, FD_STEP)
        b = _plain_weight(view, plan.cutoff, seq, FD_STEP)
        # stencil points are summed in a different order, and nested differences amplify rounding
        assert a == pytest.approx(b, rel=1e-8, abs=1e-8)


def test_first_order_weight_two_routes(setup):
    # H_v uses the path-level log-density weight, H_alpha the slot-level one
    plan, members = setup
    for rt, cls in members[:20]:
        for r in range(CFG.d):
            a = H_v(rt, cls, plan.particle, r, plan.cutoff, CFG, K)
            b = H_alpha(rt, cls, (r,), plan.particle, plan.cutoff, CFG, K)
            assert a == pytest.approx(b, rel=1e-8, abs=1e-10)
            lag = rt.t_max - slot_view(rt, cls, plan.particle, r, CFG, K).rho
            x = H_x(rt, cls, plan.particle, r, plan.cutoff, CFG, K)
            assert x == pytest.approx(a / lag, rel=1e-12, abs=1e-12)


def test_mixed_weights_are_symmetric(setup):
    plan, members = setup
    for rt, cls in members[:10]:
        a = H_alpha(rt, cls, (0, 1), plan.particle, plan.cutoff, CFG, K)
        b = H_alpha(rt, cls, (1, 0), plan.particle, plan.cutoff, CFG, K)
        scale = max(1.0, abs(a))
        assert abs(a - b) <= 1e-4 * scale


def test_off_class_weights_vanish(setup):
    plan, members = setup
    rt, cls = members[0]
    other = fit_cutoff("-|m=0", plan.particle, [[0.0, 0.0], [1.0, 1.0]])
    assert H_v(rt, cls, plan.particle, 0, other, CFG, K) == 0.0
    assert H_alpha(rt, cls, (0, 0), plan.particle, other, CFG, K) == 0.0
    with pytest.raises(DepthExceeded):
        H_alpha(rt, cls, (0, 0, 0, 0), plan.particle, plan.cutoff, CFG, K)


def test_not_perturbable_without_events(setup):
    plan, members = setup
    rt, cls = members[0]
    other = 1 - plan.particle if CFG.N == 2 else (plan.particle + 1) % CFG.N
    if any(other in ident[1:-1] for ident in cls.I[: cls.m]):
        pytest.skip("other particle has an event")
    with pytest.raises(NotPerturbable):
        last_event_direction(rt, cls, other, 0)


def test_alpha_sequence():
    assert alpha_sequence([0, 0, 2, 1], 2, 2) == (1, (0, 0, 1))
    assert alpha_sequence([1, 0, 0, 0], 2, 2) == (0, (0,))
    with pytest.raises(UnsupportedDirection):
        alpha_sequence([1, 0, 1, 0], 2, 2)
    with pytest.raises(ValueError):
        alpha_sequence([1, 0], 2, 2)
    with pytest.raises(ValueError):
        alpha_sequence([-1, 0, 0, 0], 2, 2)


def test_fit_cutoff_needs_two_samples():
    with pytest.raises(InsufficientPaths):
        fit_cutoff("k", 0, [[0.1, 0.2]])
    G = fit_cutoff("k", 0, [[0.0, -1.0], [2.0, 1.0]])
    assert G.windows == ((0.0, 2.0), (-1.0, 1.0))
    assert G._window_factor([1.0, 0.0]) == 1.0
    assert G._window_factor([0.0, 0.0]) == 0.0


def test_kde_against_direct_sum():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 2))
    w = rng.uniform(size=50)
    grid = rng.normal(size=(7, 2))
    h = np.array([0.4, 0.7])
    est, se, dx = gaussian_kde(X, grid, 80, h, weights=w, chunk=13)
    for q, g in enumerate(grid):
        k = [wi * math.exp(-0.5 * (((g - x) / h) ** 2).sum()) / (2 * math.pi * h.prod()) for x, wi in zip(X, w)]
        mean = sum(k) / 80
        var = sum(c * c for c in k) / 80 - mean**2
        assert est[q] == pytest.approx(mean, rel=1e-12)
        assert se[q] == pytest.approx(math.sqrt(var / 80), rel=1e-10)
    # derivative along axis 0 against central differences
    eps = 1e-6
    up = gaussian_kde(X, grid + [eps, 0.0], 80, h, weights=w)[0]
    dn = gaussian_kde(X, grid - [eps, 0.0], 80, h, weights=w)[0]
    assert np.allclose(dx, (up - dn) / (2 * eps), rtol=1e-6, atol=1e-9)


def test_silverman_bandwidth():
    x = np.random.default_rng(0).normal(size=1000)
    bw = silverman_bandwidth(x)
    assert bw.shape == (1,)
    assert bw[0] == pytest.approx(x.std(ddof=1) * (4.0 / (3.0 * 1000)) ** 0.2)


def test_class_density_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    y = rng.normal(size=1500)
    samples = [(v, 1.0, v) for v in y]
    grid = np.linspace(-2, 2, 9)
    with pytest.raises(InsufficientPaths):
        class_density(samples[:10], 3000, "R(0,1)|m=1", "v", 0, 0, grid)
    table = class_density(samples, 3000, "R(0,1)|m=1", "v", 0, 0, grid)
    assert table.n_class == 1500 and len(table.rows) == 9
    kde = np.array([r[1] for r in table.rows])
    kde_g = np.array([r[5] for r in table.rows])
    assert np.allclose(kde, kde_g)
    path = tmp_path / "d.csv"
    write_density_csv(table, path, "abc123")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash abc123"
    assert lines[1].startswith("# class R(0,1)|m=1 target v")
    assert lines[3].split(",") == list(table.columns)
    first = lines[4].split(",")
    assert [float(c) for c in first] == list(table.rows[0])


def test_survival_fraction_limits():
    assert survival_fraction(CFG, 1.0, 0.0) == pytest.approx(1.0, abs=1e-12)
    vals = [survival_fraction(CFG, 1.0, t) for t in (0.2, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert survival_fraction(CFG, 1.0, 10 * CFG.R) == 0.0
