import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egosynth.geometry import (AgentState, OrientedBox, VehicleDims, box_corners, box_iou, path_length,
                               point_in_box, polygon_area, rect_corners, transform_from_ego,
                               transform_heading, transform_points, transform_to_ego, wrap_angle)

coord = st.floats(-1e3, 1e3, allow_nan=False)
angle = st.floats(-20.0, 20.0, allow_nan=False)
states = st.builds(AgentState, coord, coord, st.floats(0, 30), angle)
sizes = st.floats(0.5, 10.0)


def as_set(pts, nd=9):
    return {tuple(np.round(p, nd)) for p in np.asarray(pts)}


# -- angles and states -------------------------------------------------------------

def test_wrap_angle_interval_ends():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.0) == 0.0


@given(angle)
def test_wrap_angle_matches_repeated_shifts(theta):
    ref = theta
    while ref > math.pi:
        ref -= 2 * math.pi
    while ref <= -math.pi:
        ref += 2 * math.pi
    got = wrap_angle(theta)
    assert -math.pi < got <= math.pi
    assert math.isclose(got, ref, abs_tol=1e-12) or math.isclose(abs(got - ref), 2 * math.pi, abs_tol=1e-12)


def test_agent_state_validation():
    with pytest.raises(ValueError):
        AgentState(0, 0, -1, 0)
    with pytest.raises(ValueError):
        AgentState(float("nan"), 0, 1, 0)
    assert AgentState(0, 0, 1, 3 * math.pi).theta == pytest.approx(math.pi)


def test_vehicle_dims_radius():
    d = VehicleDims(2.0, 4.0)
    assert d.radius == pytest.approx(0.5 * math.sqrt(20))
    with pytest.raises(ValueError):
        VehicleDims(0.0, 4.0)


# -- transforms -------------------------------------------------------------------------

def test_transform_examples():
    s = AgentState(1.0, 2.0, 3.0, 0.7)
    assert np.allclose(transform_to_ego((1.0, 2.0), s), (0.0, 0.0))
    assert np.allclose(transform_to_ego((3.0, 4.0), AgentState(0, 0, 1, math.pi / 2)), (3.0, 4.0))
    # explicit rotation-matrix oracle for s = (1, 2, ., 0)
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert np.allclose(transform_to_ego((2.0, 2.0), AgentState(1, 2, 0, 0)), R @ np.array([1.0, 0.0]))
    assert np.allclose(transform_to_ego((2.0, 2.0), AgentState(1, 2, 0, 0)), (0.0, 1.0))


def test_transform_heading_examples():
    s = AgentState(0, 0, 0, 3.0)
    assert transform_heading(3.0, s) == 0.0
    assert transform_heading(math.pi / 2, AgentState(0, 0, 0, 0)) == pytest.approx(math.pi / 2)
    assert transform_heading(-3.0, s) == pytest.approx(-6.0 + 2 * math.pi, abs=1e-12)
    assert transform_heading(-3.0, s) == pytest.approx(0.28319, abs=1e-5)


def test_heading_direction_maps_to_plus_y():
    s = AgentState(5.0, -2.0, 1.0, 1.1)
    ahead = (s.x + math.cos(s.theta), s.y + math.sin(s.theta))
    assert np.allclose(transform_to_ego(ahead, s), (0.0, 1.0))


def test_transform_rejects_non_finite():
    with pytest.raises(ValueError):
        transform_to_ego((np.inf, 0.0), AgentState(0, 0, 0, 0))


@given(states, coord, coord, coord, coord)
def test_transform_isometry_and_round_trip(s, px, py, qx, qy):
    p, q = np.array([px, py]), np.array([qx, qy])
    tp, tq = transform_to_ego(p, s), transform_to_ego(q, s)
    d = np.linalg.norm(p - q)
    assert abs(np.linalg.norm(tp - tq) - d) <= 1e-9 * max(d, 1.0)
    assert np.allclose(transform_from_ego(tp, s), p, atol=1e-9 * max(1.0, np.abs(p).max()))


def test_transform_points_broadcasts():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(5, 3, 2))
    s = AgentState(1.0, -1.0, 0.0, 0.3)
    assert np.allclose(transform_points(pts, s.x, s.y, s.theta), transform_to_ego(pts, s))


# -- boxes ---------------------------------------------------------------------------

def test_box_corners_axis_aligned():
    c = box_corners(AgentState(0, 0, 0, math.pi / 2), VehicleDims(2, 4))
    assert as_set(c) == as_set([(1, -2), (1, 2), (-1, 2), (-1, -2)])


def test_box_corners_half_turn_symmetry():
    s, d = AgentState(3, 1, 0, 0.4), VehicleDims(1.8, 4.6)
    flipped = AgentState(3, 1, 0, 0.4 + math.pi)
    assert as_set(box_corners(s, d)) == as_set(box_corners(flipped, d))


def test_box_corners_diagonal():
    c = box_corners(AgentState(0, 0, 0, math.pi / 4), VehicleDims(2, 2))
    assert np.allclose(np.linalg.norm(c, axis=1), math.sqrt(2))
    assert as_set(c, 7) == as_set([(math.sqrt(2), 0), (0, math.sqrt(2)), (-math.sqrt(2), 0), (0, -math.sqrt(2))], 7)


@given(coord, coord, sizes, sizes, angle)
def test_corners_ccw_with_exact_area(x, y, w, l, h):
    c = rect_corners(x, y, w, l, h)
    area = polygon_area(c)
    assert area > 0
    assert abs(area - w * l) <= 1e-9 * w * l * max(1.0, abs(x) + abs(y))


def test_box_iou_examples():
    a = OrientedBox((0, 0), 2, 4, 0.3)
    assert box_iou(a, a) == pytest.approx(1.0)
    assert box_iou(OrientedBox((0, 0), 2, 2), OrientedBox((100, 0), 2, 2)) == 0.0
    u1, u2 = OrientedBox((0, 0), 1, 1), OrientedBox((0.5, 0), 1, 1)
    assert box_iou(u1, u2) == pytest.approx(1 / 3, abs=1e-12)


def test_box_iou_against_point_sampling():
    a, b = OrientedBox((0, 0), 1, 1), OrientedBox((0.5, 0), 1, 1)
    pts = np.random.default_rng(3).uniform(-1, 2, size=(100_000, 2))
    sa = point_in_box(pts, AgentState(0, 0, 0, 0), VehicleDims(1, 1), tol=0)
    sb = point_in_box(pts, AgentState(0.5, 0, 0, 0), VehicleDims(1, 1), tol=0)
    mc = (sa & sb).sum() / (sa | sb).sum()
    assert abs(mc - box_iou(a, b)) < 1e-2


def test_box_iou_rejects_degenerate():
    with pytest.raises(ValueError):
        OrientedBox((0, 0), 0.0, 1.0)


box = st.builds(OrientedBox, st.tuples(st.floats(-5, 5), st.floats(-5, 5)), sizes, sizes, angle)


@given(box, box)
def test_box_iou_symmetric_and_bounded(a, b):
    ab, ba = box_iou(a, b), box_iou(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-9)
    assert box_iou(a, a) == pytest.approx(1.0, abs=1e-9)


def test_path_length_examples():
    assert path_length([(1.0, 1.0)]) == 0.0
    assert path_length([(0, 0), (3, 4)]) == 5.0
    pts = np.random.default_rng(1).normal(size=(10, 2))
    ref = sum(math.dist(pts[i], pts[i + 1]) for i in range(9))
    assert abs(path_length(pts) - ref) < 1e-12
    with pytest.raises(ValueError):
        path_length([])
