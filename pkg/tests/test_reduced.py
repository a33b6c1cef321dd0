import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdmpkit.config import ModelConfig
from pdmpkit.errors import ContainsSuppressedCollision, CoordinateExhausted, HorizonOnEvent
from pdmpkit.kernels import get_kernels
from pdmpkit.reduced import (
    EventOrderClass,
    chronology_ok,
    class_coordinates,
    class_key,
    classify,
    openness_probe,
    parse_class_key,
    reconstruct,
    reconstruct_reduced,
    reduce,
    same_path,
    trajectory_class,
    transversality_margin,
)
from pdmpkit.rng import PathRng
from pdmpkit.simulator import EventEngine, SampledOutcomes, map_paths

CFG = ModelConfig()


@pytest.fixture(scope="module")
def paths():
    return [t for t in map_paths(CFG, 31, 300) if not isinstance(t, Exception)]


def test_zero_event_path_reduces_to_empty_maps():
    cfg = ModelConfig(N=2, R=2.0, beta=0.5, t_max=0.5)
    k = get_kernels(cfg)
    traj = EventEngine(cfg, k).run(((-1.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (-1.0, 0.0)), SampledOutcomes(k, PathRng(0, 0)))
    rt = reduce(traj)
    assert rt.gammas == {} and rt.collision_vs == {} and rt.reflection_vs == {}
    assert classify(rt) == EventOrderClass((), 0)
    assert classify(rt).key == "-|m=0"


def test_head_on_class_after_first_collision():
    cfg = ModelConfig(N=2, R=2.0, beta=0.5, t_max=1.2)
    k = get_kernels(cfg)
    traj = EventEngine(cfg, k).run(((-1.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (-1.0, 0.0)), SampledOutcomes(k, PathRng(1, 0)))
    rt = reduce(traj)
    sigma = rt.event_order[0][1]
    cls = classify(rt, sigma + 1e-3)
    assert cls.I[0] == ("C", 0, 1, 1) and cls.m == 1
    assert cls.last == ("C", 0, 1, 1)
    # only the lower-indexed particle's outcome is stored
    assert set(rt.collision_vs) == {(0, 1, 1)}
    assert rt.collision_vs[(0, 1, 1)] == traj.events[0].v_post[0]


def test_roundtrip_and_sign_flip(paths):
    n = 0
    for traj in paths:
        if traj.has_suppressed:
            continue
        rt = reduce(traj)
        assert same_path(traj, reconstruct_reduced(rt, CFG), 1e-10)
        flipped = {k: tuple(-c for c in v) for k, v in rt.reflection_vs.items()}
        assert same_path(traj, reconstruct((rt.x0, rt.v0), rt.gammas, (rt.collision_vs, flipped), CFG), 0.0)
        again = reduce(reconstruct_reduced(rt, CFG))
        assert again.identities == rt.identities and again.gammas == rt.gammas
        n += 1
    assert n > 250


def test_missing_reflection_coordinate(paths):
    traj = next(t for t in paths if t.n_reflections and not t.has_suppressed)
    rt = reduce(traj)
    with pytest.raises(CoordinateExhausted):
        reconstruct((rt.x0, rt.v0), rt.gammas, (rt.collision_vs, {}), CFG)


def test_suppressed_paths_are_rejected():
    cfg = ModelConfig(r0=0.6)  # large r0 makes slow pairs common
    traj = next(t for t in map_paths(cfg, 2, 3000) if not isinstance(t, Exception) and t.has_suppressed)
    with pytest.raises(ContainsSuppressedCollision):
        reduce(traj)
    # such paths still have a class
    assert trajectory_class(traj).m == len(traj.events)


def test_class_keys_roundtrip_and_chronology(paths):
    for traj in paths:
        cls = trajectory_class(traj)
        assert parse_class_key(cls.key) == cls
        assert chronology_ok(cls.I)
        assert len(cls.J_c) + len(cls.J_r) == len(cls.I)


ident = st.one_of(
    st.tuples(st.just("C"), st.integers(0, 5), st.integers(0, 5), st.integers(1, 20)),
    st.tuples(st.just("R"), st.integers(0, 5), st.integers(1, 20)),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(ident, max_size=6), st.data())
def test_class_key_grammar_roundtrip(I, data):
    m = data.draw(st.integers(0, len(I)))
    key = class_key(I, m)
    assert parse_class_key(key) == EventOrderClass(tuple(I), m)


@pytest.mark.parametrize("bad", ["", "R(0,1)", "X(1)|m=0", "R(0,1)|m=2", "C(0,1)|m=1"])
def test_malformed_keys(bad):
    with pytest.raises(ValueError):
        parse_class_key(bad)


def test_chronology_violations():
    assert not chronology_ok([("R", 0, 2)])
    assert not chronology_ok([("C", 0, 1, 1), ("C", 0, 1, 3)])
    assert chronology_ok([("C", 0, 1, 1), ("R", 2, 1), ("C", 0, 1, 2), ("R", 2, 2)])


def test_horizon_on_event(paths):
    rt = next(reduce(t) for t in paths if t.events and not t.has_suppressed)
    with pytest.raises(HorizonOnEvent):
        classify(rt, rt.event_order[0][1])


def test_class_coordinate_dimension(paths):
    d, N = CFG.d, CFG.N
    for traj in paths[:100]:
        if traj.has_suppressed:
            continue
        rt = reduce(traj)
        cls = classify(rt)
        pt = class_coordinates(rt, cls)
        nc = sum(1 for x in cls.I if x[0] == "C")
        nr = len(cls.I) - nc
        assert pt.dim == 2 * N * d + nc + d * nc + d * nr == len(pt.labels)


def test_openness_probe(paths):
    rng = np.random.default_rng(0)
    rts = [reduce(t) for t in paths if not t.has_suppressed][:100]
    assert all(openness_probe(rt, CFG, 1e-6, rng) for rt in rts)
    assert all(transversality_margin(rt) > 0 for rt in rts)
