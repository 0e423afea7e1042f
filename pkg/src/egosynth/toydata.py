"""Procedural kinematic trajectories on generated maps, used as the toy training set."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import wrap_angle
from .maps import MapGrid, MapSpec
from .scene import DEFAULT_DT, Scene


@dataclass(frozen=True)
class RolloutConfig:
    M: int = 4
    T: int = 40
    dt: float = DEFAULT_DT
    v_range: tuple = (2.0, 8.0)
    accel_std: float = 0.15
    p_stationary: float = 0.1
    width_range: tuple = (1.8, 2.2)
    length_range: tuple = (4.0, 5.0)
    spawn_radius: float = 60.0
    min_gap: float = 1.0
    max_tries: int = 50


def sample_dims(rng: np.random.Generator, M: int, cfg: RolloutConfig = RolloutConfig()) -> np.ndarray:
    w = rng.uniform(*cfg.width_range, size=M)
    length = rng.uniform(*cfg.length_range, size=M)
    return np.stack([w, length], axis=1)


def _lanes(g: MapGrid, spec: MapSpec):
    """Lane centerlines as ``(kind, params, direction)``; right-hand traffic."""
    half = spec.lane_width / 2
    lanes = []
    for road in g.roads:
        offsets = [half + j * spec.lane_width for j in range(spec.lanes_per_road // 2)] or [0.0]
        for off in offsets:
            if road[0] == "h":
                lanes.append(("h", road[1] - off, +1))
                lanes.append(("h", road[1] + off, -1))
            elif road[0] == "v":
                lanes.append(("v", road[1] + off, +1))
                lanes.append(("v", road[1] - off, -1))
            else:
                _, cx, cy, radius = road
                lanes.append(("ring", (cx, cy, radius + off), +1))
                lanes.append(("ring", (cx, cy, radius - off), -1))
    return lanes


def _roll_lane(lane, s0: float, speeds: np.ndarray, dt: float) -> np.ndarray:
    """States along one lane starting at arc position ``s0``; speeds per step."""
    kind, param, direction = lane
    arc = s0 + direction * np.concatenate([[0.0], np.cumsum(speeds[:-1] * dt)])
    if kind == "h":
        x, y = arc, np.full_like(arc, param)
        theta = np.full_like(arc, 0.0 if direction > 0 else math.pi)
    elif kind == "v":
        x, y = np.full_like(arc, param), arc
        theta = np.full_like(arc, math.pi / 2 if direction > 0 else -math.pi / 2)
    else:
        cx, cy, radius = param
        phi = arc / radius
        x, y = cx + radius * np.cos(phi), cy + radius * np.sin(phi)
        theta = phi + direction * math.pi / 2
    return np.stack([x, y, speeds, wrap_angle(theta)], axis=1)


def _lane_anchor(lane, center, rng, spread):
    """Arc coordinate of a random point of ``lane`` near ``center``."""
    kind, param, _ = lane
    if kind == "h":
        return center[0] + rng.uniform(-spread, spread)
    if kind == "v":
        return center[1] + rng.uniform(-spread, spread)
    cx, cy, radius = param
    return rng.uniform(-math.pi, math.pi) * radius


def rollout_scene(g: MapGrid, spec: MapSpec, rng: np.random.Generator,
                  cfg: RolloutConfig = RolloutConfig(), center=None) -> Scene:
    """Agents following lanes at slowly varying speed, rejected if they ever come too close."""
    lanes = _lanes(g, spec)
    if not lanes:
        raise ValueError("map has no lanes to roll agents along")
    rows, cols = g.extent
    if center is None:
        center = (g.origin[0] + cols * g.resolution / 2, g.origin[1] + rows * g.resolution / 2)
    dims = sample_dims(rng, cfg.M, cfg)
    radii = 0.5 * np.hypot(dims[:, 0], dims[:, 1])
    tracks = []
    for i in range(cfg.M):
        for _ in range(cfg.max_tries):
            lane = lanes[rng.integers(len(lanes))]
            if rng.random() < cfg.p_stationary:
                speeds = np.zeros(cfg.T)
            else:
                v0 = rng.uniform(*cfg.v_range)
                acc = np.cumsum(rng.normal(0.0, cfg.accel_std, cfg.T)) * cfg.dt
                speeds = np.clip(v0 + acc, 0.5, cfg.v_range[1] * 1.2)
            track = _roll_lane(lane, _lane_anchor(lane, center, rng, cfg.spawn_radius), speeds, cfg.dt)
            ok = all(
                np.min(np.linalg.norm(track[:, :2] - other[:, :2], axis=1)) > radii[i] + radii[j] + cfg.min_gap
                for j, other in enumerate(tracks))
            if ok:
                break
        tracks.append(track)
    states = np.stack(tracks, axis=1)
    return Scene(states, dims, None, cfg.dt, g.map_id)


def build_toy_dataset(maps: list, spec: MapSpec, n_scenes: int, seed: int,
                      cfg: RolloutConfig = RolloutConfig()) -> list:
    """``n_scenes`` rollouts spread round-robin over ``maps``."""
    rng = np.random.default_rng(seed)
    return [rollout_scene(maps[i % len(maps)], spec, rng, cfg) for i in range(n_scenes)]


def straight_line_scene(M: int = 2, T: int = 40, dt: float = DEFAULT_DT, speed: float = 5.0,
                        spacing: float = 10.0, heading: float = 0.0,
                        dims: Optional[np.ndarray] = None) -> Scene:
    """Constant-velocity agents on parallel lines."""
    t = np.arange(T) * dt
    states = np.zeros((T, M, 4))
    for i in range(M):
        states[:, i, 0] = speed * t * math.cos(heading) - i * spacing * math.sin(heading)
        states[:, i, 1] = speed * t * math.sin(heading) + i * spacing * math.cos(heading)
        states[:, i, 2] = speed
        states[:, i, 3] = heading
    if dims is None:
        dims = np.tile([2.0, 4.0], (M, 1))
    return Scene(states, dims, None, dt)
