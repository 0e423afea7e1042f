import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egosynth.guides import (GuideConfig, agent_collision_guide, decay_weights, evaluate_guides,
                             guide_gradient, map_collision_guide, speed_guide, total_guide)
from egosynth.maps import LAYER_NAMES, MapGrid, bbox_lattice
from egosynth.scene import THETA, V, Scene

NO_MAP = GuideConfig(w_map=0.0)


def edge_map(edge_y=5.0, res=0.05, size=20.0):
    """Drivable above ``y = edge_y`` (a cell boundary)."""
    n = int(round(size / res))
    ys = (np.arange(n) + 0.5) * res
    drv = np.repeat((ys > edge_y)[:, None], n, axis=1)
    return MapGrid({name: drv for name in LAYER_NAMES}, res, (0.0, 0.0), "edge")


def random_violating_scene(rng, T=6, M=4):
    """Moving agents packed close enough to collide and with some speeds out of range."""
    pos = rng.uniform(-3, 3, size=(T, M, 2)) + np.linspace(0, 2, T)[:, None, None]
    v = rng.uniform(-2, 20, size=(T, M))
    v[0] = np.abs(v[0]) + 1.0
    th = rng.uniform(-3, 3, size=(T, M))
    states = np.concatenate([pos, v[..., None], th[..., None]], axis=-1)
    dims = np.stack([rng.uniform(1.6, 2.2, M), rng.uniform(3.8, 5.0, M)], axis=-1)
    return states, dims


# -- decay ---------------------------------------------------------------------------

def test_decay_weights_examples():
    assert decay_weights(1, 0.9).tolist() == [1.0]
    assert np.allclose(decay_weights(2, 0.9), [0.9 / 1.71, 0.81 / 1.71])
    assert decay_weights(2, 0.9)[0] == pytest.approx(0.5263, abs=1e-4)
    with pytest.raises(ValueError):
        decay_weights(0, 0.9)


@given(st.integers(1, 200), st.floats(0.5, 0.99))
def test_decay_weights_normalized_decreasing(T, gamma):
    w = decay_weights(T, gamma)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w > 0) and np.all(np.diff(w) < 0)


def test_guide_config_validation():
    for bad in ({"gamma": 1.0}, {"gamma": 0.0}, {"v_min": 5, "v_max": 1}, {"w_agent": -1}, {"grid_n": 1}):
        with pytest.raises(ValueError):
            GuideConfig(**bad)
    cfg = GuideConfig(w_map=0.3)
    assert GuideConfig.from_dict(cfg.to_dict()) == cfg


# -- agent collision -----------------------------------------------------------------

def test_agent_guide_stationary_is_zero():
    states = np.zeros((3, 2, 4))
    assert agent_collision_guide(Scene(states, [(2, 4), (2, 4)])) == 0.0


def test_agent_guide_far_apart_is_zero():
    states = np.zeros((3, 2, 4))
    states[..., V] = 5.0
    states[:, 1, 0] = 100.0
    assert agent_collision_guide(Scene(states, [(2, 4), (2, 4)])) == 0.0


def test_agent_guide_coincident_pair():
    states = np.zeros((2, 2, 4))
    states[..., V] = 3.0
    states[1, 1, 0] = 100.0          # together at t=1 only
    val = agent_collision_guide(Scene(states, [(2, 4), (2, 4)]))
    assert val == pytest.approx(2 * (0.9 / 1.71), abs=1e-12)
    assert val == pytest.approx(1.0526, abs=1e-4)


def test_agent_guide_hand_rolled_single_pair():
    states = np.zeros((1, 2, 4))
    states[..., V] = 3.0
    states[0, 1, :2] = (3.0, 1.0)
    r = 0.5 * math.hypot(2, 4)
    d_safe = 2 * r + 1.0
    expected = 2 * max(1 - math.hypot(3, 1) / d_safe, 0)
    vals, _ = evaluate_guides(states, [(2, 4), (2, 4)], [True, True], None, GuideConfig(), grad=False)
    assert vals["agent"] == pytest.approx(expected, abs=1e-12)


# -- speed --------------------------------------------------------------------------

def test_speed_guide_examples():
    cfg = GuideConfig()
    inside = np.zeros((3, 1, 4))
    inside[..., V] = 7.0
    assert speed_guide(Scene(np.repeat(inside, 1, 0), [(2, 4)]), cfg) == 0.0
    one = np.zeros((1, 1, 4))
    one[..., V] = cfg.v_max + 2
    # scenes need T >= 2, the raw evaluator takes a single step
    vals, _ = evaluate_guides(one, [(2, 4)], [True], None, cfg, grad=False)
    assert vals["speed"] == pytest.approx(2.0)
    edge = np.zeros((2, 1, 4))
    edge[..., V] = cfg.v_min
    edge[0, 0, V] = cfg.v_max
    assert speed_guide(Scene(edge, [(2, 4)]), cfg) == 0.0


def test_speed_gradient_single_violation():
    cfg = GuideConfig(w_speed=3.0, w_agent=0.0, w_map=0.0)
    states = np.zeros((4, 2, 4))
    states[..., V] = 5.0
    states[:, 1, 0] = 50.0
    states[2, 1, V] = 0.2          # below v_min, agent still moving
    g = guide_gradient(Scene(states, [(2, 4), (2, 4)]), None, cfg)
    expected = np.zeros_like(g)
    expected[2, 1, V] = 3.0 * decay_weights(4, 0.9)[2] * -1.0
    assert np.array_equal(np.nonzero(g)[0], [2])
    assert np.allclose(g, expected, atol=1e-15)


# -- map collision -------------------------------------------------------------------

def straddle_scene(edge_y=5.0):
    """A 2.7 x 4.5 box tilted so that only its lowest corner crosses below the edge."""
    eps, w, l = 0.05, 2.7, 4.5
    low_offset = -l / 2 * math.sin(eps) - w / 2 * math.cos(eps)
    cy = edge_y - 0.01 - low_offset          # lowest corner 1 cm below the edge
    states = np.tile([10.0, cy, 4.0, eps], (2, 1, 1))
    return Scene(states, [(w, l)])


def test_map_guide_fully_on_and_off_road_zero():
    g = edge_map()
    on = Scene(np.tile([10.0, 12.0, 4.0, 0.0], (2, 1, 1)), [(2, 4)])
    off = Scene(np.tile([10.0, 1.5, 4.0, 0.0], (2, 1, 1)), [(2, 4)])
    assert map_collision_guide(on, g) == 0.0
    assert map_collision_guide(off, g) == 0.0


def test_map_guide_single_off_point_against_brute_force():
    g = edge_map()
    sc = straddle_scene()
    x, y, _, th = sc.states[0, 0]
    pts = bbox_lattice(x, y, th, 2.7, 4.5, 10)
    on = g.sample("drivable_area", pts)
    assert (~on).sum() == 1
    off_pt = pts[~on][0]
    nearest = min(math.dist(off_pt, p) for p in pts[on])
    assert nearest == pytest.approx(0.3, abs=1e-9)
    # both timesteps contribute 0.7; decay weights sum to one
    assert map_collision_guide(sc, g) == pytest.approx(1 - nearest, abs=1e-9)


def test_map_guide_stationary_excluded():
    g = edge_map()
    sc = straddle_scene()
    still = Scene(sc.states * np.array([1, 1, 0, 1]), sc.dims)
    assert map_collision_guide(still, g) == 0.0


def test_map_gradient_points_back_on_road():
    g = edge_map()
    cfg = GuideConfig(w_agent=0, w_speed=0)
    sc = straddle_scene()
    grad = guide_gradient(sc, g, cfg)
    # descending the penalty moves the box up, away from the edge
    assert np.all(grad[:, 0, 1] < 0)
    assert np.all(grad[..., V] == 0)


# -- totals and gradients ------------------------------------------------------------

def test_total_guide_linear_and_component_sum():
    rng = np.random.default_rng(4)
    states, dims = random_violating_scene(rng)
    states[..., :2] += 10.0
    sc = Scene(states, dims)
    g = edge_map(edge_y=9.0)
    cfg = GuideConfig(50, 1, 1)
    parts = (agent_collision_guide(sc, cfg), map_collision_guide(sc, g, cfg), speed_guide(sc, cfg))
    assert total_guide(sc, g, cfg) == pytest.approx(50 * parts[0] + parts[1] + parts[2], rel=1e-12)
    assert total_guide(sc, g, GuideConfig(0, 0, 0)) == 0.0
    s1 = total_guide(sc, g, GuideConfig(0, 0, 1.0))
    s2 = total_guide(sc, g, GuideConfig(0, 0, 2.0))
    assert s2 == pytest.approx(2 * s1, rel=1e-15)


def test_zero_penalty_gives_zero_gradient():
    states = np.zeros((5, 3, 4))
    states[..., V] = 5.0
    states[:, 1, 0] = 50.0
    states[:, 2, 0] = 100.0
    assert not guide_gradient(Scene(states, [(2, 4)] * 3), None, NO_MAP).any()


def _fd_gradient(states, dims, cfg, h=1e-4):
    valid = np.ones(states.shape[1], dtype=bool)
    out = np.zeros_like(states)
    for idx in np.ndindex(*states.shape):
        if idx[2] == THETA:
            continue
        p, m = states.copy(), states.copy()
        p[idx] += h
        m[idx] -= h
        vp, _ = evaluate_guides(p, dims, valid, None, cfg, grad=False)
        vm, _ = evaluate_guides(m, dims, valid, None, cfg, grad=False)
        out[idx] = (cfg.w_agent * (vp["agent"] - vm["agent"]) + cfg.w_speed * (vp["speed"] - vm["speed"])) / (2 * h)
    return out


def smooth_region(states, dims, cfg, margin=1e-3):
    """True when no hinge sits within ``margin`` of its kink."""
    r = 0.5 * np.hypot(dims[:, 0], dims[:, 1])
    d_safe = r[:, None] + r[None, :] + cfg.delta_buffer
    dist = np.linalg.norm(states[:, :, None, :2] - states[:, None, :, :2], axis=-1)
    off = ~np.eye(states.shape[1], dtype=bool)
    v = states[..., V]
    return (np.all(np.abs(dist - d_safe)[:, off] > margin) and np.all(dist[:, off] > margin)
            and np.all(np.abs(v - cfg.v_min) > margin) and np.all(np.abs(v - cfg.v_max) > margin))


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    cfg = NO_MAP
    checked = 0
    while checked < 10:
        states, dims = random_violating_scene(rng)
        if not smooth_region(states, dims, cfg):
            continue
        _, ana = evaluate_guides(states, dims, np.ones(4, bool), None, cfg)
        fd = _fd_gradient(states, dims, cfg)
        scale = np.abs(fd).max()
        assert np.abs(ana - fd).max() / scale < 1e-4
        checked += 1


def test_gradient_step_decreases_total():
    rng = np.random.default_rng(5)
    cfg = NO_MAP
    for _ in range(10):
        states, dims = random_violating_scene(rng)
        sc = Scene(states, dims)
        j0 = total_guide(sc, None, cfg)
        g = guide_gradient(sc, None, cfg)
        step = 1.0
        while step > 1e-8:
            trial = sc.with_states(states - step * g)
            if total_guide(trial, None, cfg) < j0:
                break
            step /= 2
        assert step > 1e-8


def test_stationary_agent_gradient_zero():
    states = np.zeros((3, 2, 4))
    states[:, 0, V] = 5.0
    states[:, 1, 0] = 1.0           # parked right next to the moving agent
    g = guide_gradient(Scene(states, [(2, 4), (2, 4)]), None, NO_MAP)
    assert not g[:, 1].any()
    assert g[:, 0, :2].any()


@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_guides_permutation_invariant(seed, perm):
    rng = np.random.default_rng(seed)
    states, dims = random_violating_scene(rng)
    states[..., :2] += 10.0
    sc = Scene(states, dims)
    g = edge_map(edge_y=9.0)
    cfg = GuideConfig()
    a = total_guide(sc, g, cfg)
    b = total_guide(sc.permute(list(perm)), g, cfg)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000))
def test_guides_nonnegative(seed):
    rng = np.random.default_rng(seed)
    states, dims = random_violating_scene(rng)
    vals, _ = evaluate_guides(states + [10, 10, 0, 0], dims, np.ones(4, bool), edge_map(edge_y=9.0),
                              GuideConfig(), grad=False)
    assert all(v >= 0 for v in vals.values())
