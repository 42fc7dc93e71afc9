import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadtraj.exceptions import EmptyInputError, InvalidDistributionError
from roadtraj.metrics import (
    Distribution, directed_hausdorff, dtw, edr, evaluate, hausdorff, heatmap_csv, histogram_distribution,
    jsd, location_frequency, od_flow, radius_of_gyration, travel_distance,
)
from roadtraj.trajectory import Trajectory

from conftest import make_net


def T(*segs):
    return Trajectory(segs, [float(i) for i in range(len(segs))])


@pytest.fixture
def line():
    # segment i has length 100 + i and sits i * 0.001 deg east
    return make_net({i: [i + 1] for i in range(5)}, lat0=0.0, lon0=0.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8),
       st.lists(st.floats(0.01, 10), min_size=1, max_size=8))
def test_jsd_range_and_symmetry(a, b):
    p = Distribution.from_counts(dict(enumerate(a)))
    q = Distribution.from_counts({k + 3: v for k, v in enumerate(b)})
    v = jsd(p, q)
    assert -1e-15 <= v <= 1 + 1e-12
    assert abs(v - jsd(q, p)) <= 1e-12


def test_jsd_known_value():
    assert jsd({0: 1.0, 1: 0.0}, {0: 0.5, 1: 0.5}) == pytest.approx(0.3113, abs=1e-4)
    h = lambda x: -x * math.log2(x)
    expect = (h(0.75) + h(0.25)) - 0.5
    assert jsd({0: 1.0}, {0: 0.5, 1: 0.5}) == pytest.approx(expect, abs=1e-15)


def test_jsd_identity_and_disjoint():
    p = {"a": 0.2, "b": 0.8}
    assert jsd(p, p) == 0.0
    assert jsd({"a": 1.0}, {"b": 1.0}) == 1.0


def test_invalid_distribution():
    with pytest.raises(InvalidDistributionError):
        Distribution({"a": 0.5})
    with pytest.raises(InvalidDistributionError):
        Distribution({"a": -0.5, "b": 1.5})


def test_travel_distance(line):
    assert travel_distance(T(0), line) == 100.0
    assert travel_distance(T(0, 4), line) == 204.0


def test_radius_of_gyration(line):
    assert radius_of_gyration(T(2), line) == 0.0
    assert radius_of_gyration(Trajectory([2, 2], [0, 1]), line) == 0.0
    net = make_net({0: [1]}, lat0=0.0, lon0=0.0, step=0.01)
    from roadtraj.roadnet import haversine_distance
    d = haversine_distance((0.0, 0.0), (0.0, 0.01))
    assert radius_of_gyration(T(0, 1), net) == pytest.approx(d / 2, rel=1e-3)


def test_radius_and_distance_ignore_times(line):
    a = Trajectory([0, 1, 2], [0, 5, 9])
    b = Trajectory([0, 1, 2], [100, 200, 300])
    assert travel_distance(a, line) == travel_distance(b, line)
    assert radius_of_gyration(a, line) == radius_of_gyration(b, line)


def test_location_frequency_and_od_flow():
    assert location_frequency([T(1, 2, 3)]).probs == pytest.approx({1: 1 / 3, 2: 1 / 3, 3: 1 / 3})
    assert od_flow([T(1, 2), T(1, 3, 2)]).probs == {(1, 2): 1.0}
    assert od_flow([T(1, 2), T(3, 4)]).probs == {(1, 2): 0.5, (3, 4): 0.5}
    with pytest.raises(EmptyInputError):
        od_flow([])


def test_od_flow_jsd_zero_for_same_ods():
    real = [T(1, 2, 3), T(4, 5), T(1, 7, 3)]
    gen = [T(1, 3), T(4, 9, 5), T(1, 2, 2, 3)]
    assert jsd(od_flow(real), od_flow(gen)) == 0.0


def test_histogram_clamps():
    d = histogram_distribution([-5, 0, 10, 50], 0, 10, bins=10)
    assert d.probs == {0: 0.5, 9: 0.5}


def test_dtw_hausdorff_edr_basics(line):
    a, b = T(0, 1, 2), T(0, 1, 2, 3, 4)
    assert dtw(a, a, line) == 0.0
    assert hausdorff(a, a, line) == 0.0
    assert directed_hausdorff(a, b, line) == 0.0
    assert directed_hausdorff(b, a, line) > 0
    assert edr(a, a) == 0.0
    assert edr(T(1, 2, 3), T(4, 5, 6)) == 1.0
    assert edr(T(1, 2, 3), T(1, 3)) == pytest.approx(1 / 3)
    with pytest.raises(EmptyInputError):
        edr(T(), a)


def test_dtw_single_points_is_their_distance(line):
    from roadtraj.roadnet import haversine_distance
    d = haversine_distance(line.segment(0).midpoint, line.segment(3).midpoint)
    assert dtw(T(0), T(3), line) == pytest.approx(d)


def test_evaluate_self_comparison(grid4, corpus4):
    rep = evaluate(corpus4, corpus4, grid4, micro_sample_size=10_000)
    assert all(v == 0.0 for v in rep.macro.values())
    assert all(v == 0.0 for v in rep.micro.values())
    assert rep.n_micro == len(corpus4) and rep.n_micro_skipped == 0
    assert "micro_sample_size,10000" in rep.to_csv()


def test_evaluate_skips_unmatched(grid4, corpus4):
    odd = [T(*reversed(corpus4[0].segments))]
    rep = evaluate(corpus4, odd + corpus4[:3], grid4, micro_sample_size=4)
    assert rep.n_micro_skipped == 1 and rep.n_micro == 3


def test_evaluate_deterministic(grid4, corpus4):
    a = evaluate(corpus4, corpus4[:20], grid4, micro_sample_size=5, seed=1).to_csv()
    assert a == evaluate(corpus4, corpus4[:20], grid4, micro_sample_size=5, seed=1).to_csv()


def test_heatmap_csv(grid4, corpus4):
    rows = heatmap_csv(corpus4, grid4).strip().split("\n")
    assert rows[0] == "segment_id,lat,lon,frequency"
    assert len(rows) == len(grid4) + 1
    assert sum(float(r.split(",")[3]) for r in rows[1:]) == pytest.approx(1.0)
