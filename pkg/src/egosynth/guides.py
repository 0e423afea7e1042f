"""Rule-satisfaction penalties (agent collision, map collision, speed) and their gradients.

Every penalty is decay-weighted over time with ``w(t) = gamma**t / sum_k gamma**k``
and only counts agents that move (max speed above ``moving_threshold``).
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .maps import MapGrid, bbox_lattice
from .scene import Scene, THETA, V, X, Y


@dataclass(frozen=True)
class GuideConfig:
    w_agent: float = 50.0
    w_map: float = 1.0
    w_speed: float = 1.0
    delta_buffer: float = 1.0
    gamma: float = 0.9
    v_min: float = 0.5
    v_max: float = 15.0
    grid_n: int = 10
    moving_threshold: float = 0.1
    fd_step_pos: float = 0.05
    fd_step_theta: float = 0.01
    # guidance moves the mean by step_scale * beta_k * grad in physical units;
    # descend=False adds +grad instead
    step_scale: float = 100.0
    descend: bool = True

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.v_min > self.v_max:
            raise ValueError("v_min must not exceed v_max")
        if min(self.w_agent, self.w_map, self.w_speed) < 0:
            raise ValueError("guide weights must be non-negative")
        if self.grid_n < 2:
            raise ValueError("grid_n must be >= 2")

    @property
    def is_zero(self) -> bool:
        return self.w_agent == 0 and self.w_map == 0 and self.w_speed == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuideConfig":
        return cls(**d)


def decay_weights(T: int, gamma: float) -> np.ndarray:
    if T < 1:
        raise ValueError("horizon must be >= 1")
    w = gamma ** np.arange(1, T + 1, dtype=float)
    return w / w.sum()


def moving_mask(states: np.ndarray, valid: np.ndarray, threshold: float) -> np.ndarray:
    return valid & (np.abs(states[..., V]).max(axis=0) > threshold)


# -- agent collision ------------------------------------------------------------

def _agent_terms(states, dims, valid, cfg: GuideConfig, grad: bool):
    T, M, _ = states.shape
    w = decay_weights(T, cfg.gamma)
    moving = moving_mask(states, valid, cfg.moving_threshold)
    radii = 0.5 * np.hypot(dims[:, 0], dims[:, 1])
    d_safe = radii[:, None] + radii[None, :] + cfg.delta_buffer
    pos = states[..., :2]
    diff = pos[:, :, None, :] - pos[:, None, :, :]           # [T, i, j, 2]
    dist = np.linalg.norm(diff, axis=-1)
    pair = moving[:, None] & valid[None, :] & ~np.eye(M, dtype=bool)
    hinge = 1.0 - dist / d_safe
    active = pair & (hinge > 0)
    value = float(np.sum(w[:, None, None] * np.where(active, hinge, 0.0)))
    if not grad:
        return value, None
    g = np.zeros_like(states)
    coef = np.where(active, w[:, None, None] / d_safe, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    sym = coef + np.swapaxes(coef, 1, 2)
    g[..., :2] = -np.einsum("tij,tijc->tic", sym, unit)
    g[:, ~moving] = 0.0
    return value, g


def agent_collision_guide(scene: Scene, cfg: GuideConfig = GuideConfig()) -> float:
    return _agent_terms(scene.states, scene.dims, scene.valid, cfg, grad=False)[0]


# -- speed -------------------------------------------------------------------

def _speed_terms(states, valid, cfg: GuideConfig, grad: bool):
    T = states.shape[0]
    w = decay_weights(T, cfg.gamma)[:, None]
    moving = moving_mask(states, valid, cfg.moving_threshold)[None, :]
    v = states[..., V]
    over = v > cfg.v_max
    under = v < cfg.v_min
    excess = np.where(over, v - cfg.v_max, 0.0) + np.where(under, cfg.v_min - v, 0.0)
    value = float(np.sum(w * moving * excess))
    if not grad:
        return value, None
    g = np.zeros_like(states)
    g[..., V] = w * moving * (over.astype(float) - under.astype(float))
    return value, g


def speed_guide(scene: Scene, cfg: GuideConfig = GuideConfig()) -> float:
    return _speed_terms(scene.states, scene.valid, cfg, grad=False)[0]


# -- map collision --------------------------------------------------------------

def _lattice_distances(dims: np.ndarray, n: int) -> np.ndarray:
    """Pairwise distances between lattice points of each agent's box, ``[M, n*n, n*n]``.

    The lattice moves rigidly with the box, so these never depend on the pose.
    """
    pts = bbox_lattice(0.0, 0.0, 0.0, dims[:, 0], dims[:, 1], n)
    return np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)


def _map_cell_terms(onroad: np.ndarray, lat_dist: np.ndarray, agent_idx: np.ndarray) -> np.ndarray:
    """Per-box penalty sum over off-road points of ``max(1 - nearest on-road distance, 0)``."""
    big = np.where(onroad[:, None, :], lat_dist[agent_idx], np.inf)   # [B, off, on]
    nearest = big.min(axis=-1)
    per_point = np.where(~onroad, np.maximum(1.0 - nearest, 0.0), 0.0)
    return per_point.sum(axis=-1)


def _map_onroad(states, dims, g: MapGrid, n: int):
    lat = bbox_lattice(states[..., X], states[..., Y], states[..., THETA],
                       dims[None, :, 0], dims[None, :, 1], n)
    return g.sample("drivable_area", lat)                              # [T, M, n*n]


def _map_field(states, dims, mask, g: MapGrid, cfg: GuideConfig, lat_dist):
    """Undecayed per-(t, i) map penalty ``[T, M]`` for the agent-timesteps in ``mask``."""
    out = np.zeros(states.shape[:2])
    onroad = _map_onroad(states, dims, g, cfg.grid_n)
    mixed = mask & onroad.any(axis=-1) & ~onroad.all(axis=-1)
    if mixed.any():
        t_idx, a_idx = np.nonzero(mixed)
        out[t_idx, a_idx] = _map_cell_terms(onroad[t_idx, a_idx], lat_dist, a_idx)
    return out


def _map_terms(states, dims, valid, g: Optional[MapGrid], cfg: GuideConfig, grad: bool):
    if g is None:
        return 0.0, (np.zeros_like(states) if grad else None)
    T = states.shape[0]
    w = decay_weights(T, cfg.gamma)[:, None]
    moving = moving_mask(states, valid, cfg.moving_threshold)
    mask = np.broadcast_to(moving[None, :], states.shape[:2])
    lat_dist = _lattice_distances(dims, cfg.grid_n)
    base = _map_field(states, dims, mask, g, cfg, lat_dist)
    value = float(np.sum(w * base))
    if not grad:
        return value, None
    gr = np.zeros_like(states)
    # each (t, i) term depends only on its own pose, so one probe per channel serves all of them
    for ch, h in ((X, cfg.fd_step_pos), (Y, cfg.fd_step_pos), (THETA, cfg.fd_step_theta)):
        plus = states.copy()
        minus = states.copy()
        plus[..., ch] += h
        minus[..., ch] -= h
        fp = _map_field(plus, dims, mask, g, cfg, lat_dist)
        fm = _map_field(minus, dims, mask, g, cfg, lat_dist)
        gr[..., ch] = w * (fp - fm) / (2 * h)
    gr[:, ~moving] = 0.0
    return value, gr


def map_collision_guide(scene: Scene, g: MapGrid, cfg: GuideConfig = GuideConfig()) -> float:
    return _map_terms(scene.states, scene.dims, scene.valid, g, cfg, grad=False)[0]


# -- combined ----------------------------------------------------------------

def evaluate_guides(states, dims, valid, g: Optional[MapGrid], cfg: GuideConfig, grad: bool = True,
                    skip_unweighted: bool = False):
    """Raw penalties ``{"agent", "map", "speed"}`` and, optionally, the weighted gradient.

    With ``skip_unweighted`` the zero-weight terms are not evaluated and report 0.
    """
    states = np.asarray(states, dtype=float)
    dims = np.asarray(dims, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    if not np.all(np.isfinite(states)):
        raise ValueError("guide evaluation on non-finite states")
    values = {}
    total_grad = np.zeros_like(states) if grad else None
    for key, weight, fn in (
        ("agent", cfg.w_agent, lambda gr: _agent_terms(states, dims, valid, cfg, gr)),
        ("map", cfg.w_map, lambda gr: _map_terms(states, dims, valid, g, cfg, gr)),
        ("speed", cfg.w_speed, lambda gr: _speed_terms(states, valid, cfg, gr)),
    ):
        need_grad = grad and weight != 0
        if skip_unweighted and weight == 0:
            values[key] = 0.0
            continue
        val, gr = fn(need_grad)
        values[key] = val
        if need_grad:
            total_grad += weight * gr
    return values, total_grad


def combine(values: dict, cfg: GuideConfig) -> float:
    return cfg.w_agent * values["agent"] + cfg.w_map * values["map"] + cfg.w_speed * values["speed"]


def total_guide(scene: Scene, g: Optional[MapGrid], cfg: GuideConfig = GuideConfig()) -> float:
    values, _ = evaluate_guides(scene.states, scene.dims, scene.valid, g, cfg, grad=False)
    return combine(values, cfg)


def guide_gradient(scene: Scene, g: Optional[MapGrid], cfg: GuideConfig = GuideConfig()) -> np.ndarray:
    _, grad = evaluate_guides(scene.states, scene.dims, scene.valid, g, cfg, grad=True)
    if not np.all(np.isfinite(grad)):
        warnings.warn("non-finite guide gradient", RuntimeWarning, stacklevel=2)
    return grad
