"""Scenario metrics, planning evaluation and the end-to-end loss formulas as plain functions."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .geometry import polygon_iou, rect_corners, wrap_angle
from .guides import GuideConfig
from .maps import MapGrid, bbox_lattice
from .scene import Scene, THETA, V

DEFAULT_HORIZONS = (1.0, 2.0, 3.0)
PLAN_DELTAS = (0.0, 0.5, 1.0)
PLAN_LAMBDAS = (2.5, 1.0, 0.25)
AGENT_FEATURES = ("speed", "lon_accel", "lat_accel", "jerk")
INTERACTION_FEATURES = ("nearest_distance", "nearest_rel_speed")


# -- rule adherence --------------------------------------------------------------

def collision_violations(scene: Scene, cfg: GuideConfig = GuideConfig()) -> np.ndarray:
    """``[T, M]`` mask of valid agents closer than ``d_safe`` to another valid agent."""
    pos = scene.positions()
    r = scene.radii
    d_safe = r[:, None] + r[None, :] + cfg.delta_buffer
    dist = np.linalg.norm(pos[:, :, None] - pos[:, None, :], axis=-1)
    pair = scene.valid[:, None] & scene.valid[None, :] & ~np.eye(scene.M, dtype=bool)
    return (pair & (dist < d_safe)).any(axis=-1)


def offroad_violations(scene: Scene, g: MapGrid, cfg: GuideConfig = GuideConfig()) -> np.ndarray:
    """``[T, M]`` mask of valid agents with any box-lattice point off the drivable area."""
    st = scene.states
    lat = bbox_lattice(st[..., 0], st[..., 1], st[..., THETA], scene.dims[None, :, 0],
                       scene.dims[None, :, 1], cfg.grid_n)
    off = ~g.sample("drivable_area", lat)
    return off.any(axis=-1) & scene.valid[None, :]


def rule_metric(scenes: Sequence[Scene], cfg: GuideConfig = GuideConfig(), maps=None) -> dict:
    """Mean over scenes of the violating fraction of valid agent-timesteps, per constraint.

    ``maps`` is a single :class:`MapGrid` or a mapping from map id to grid;
    without maps the off-road score is omitted.
    """
    if not scenes:
        raise ValueError("rule_metric needs at least one scene")
    col, off = [], []
    for sc in scenes:
        n = sc.T * int(sc.valid.sum())
        col.append(collision_violations(sc, cfg).sum() / n)
        g = maps.get(sc.map_ref) if isinstance(maps, Mapping) else maps
        if g is not None:
            off.append(offroad_violations(sc, g, cfg).sum() / n)
    out = {"no_collision": float(np.mean(col))}
    if off:
        out["no_offroad"] = float(np.mean(off))
    return out


# -- realism ---------------------------------------------------------------------

def wasserstein_1d(a, b) -> float:
    """1-Wasserstein distance between two empirical distributions."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    return float(wasserstein_distance(a, b))


def agent_features(scene: Scene) -> dict:
    """Per-agent kinematic samples pooled over valid agents and time."""
    st = scene.states[:, scene.valid]
    v = st[..., V]
    lon = np.diff(v, axis=0) / scene.dt
    yaw_rate = wrap_angle(np.diff(st[..., THETA], axis=0)) / scene.dt
    lat = v[1:] * yaw_rate
    jerk = np.diff(lon, axis=0) / scene.dt
    return {"speed": v.ravel(), "lon_accel": lon.ravel(), "lat_accel": np.ravel(lat), "jerk": jerk.ravel()}


def interaction_features(scene: Scene) -> dict:
    """Distance to, and relative speed of, each agent's nearest neighbour."""
    st = scene.states[:, scene.valid]
    M = st.shape[1]
    if M < 2:
        return {k: np.zeros(0) for k in INTERACTION_FEATURES}
    pos = st[..., :2]
    dist = np.linalg.norm(pos[:, :, None] - pos[:, None, :], axis=-1)
    dist[:, np.arange(M), np.arange(M)] = np.inf
    nearest = dist.argmin(axis=-1)
    vel = st[..., V, None] * np.stack([np.cos(st[..., THETA]), np.sin(st[..., THETA])], axis=-1)
    other_vel = np.take_along_axis(vel, nearest[..., None], axis=1)
    rel = np.linalg.norm(vel - other_vel, axis=-1)
    return {"nearest_distance": dist.min(axis=-1).ravel(), "nearest_rel_speed": rel.ravel()}


def _pooled(scenes, fn, names):
    feats = [fn(sc) for sc in scenes]
    return {k: np.concatenate([f[k] for f in feats]) for k in names}


@dataclass
class RealismScores:
    real: float
    rel_real: float
    components: dict = field(default_factory=dict)


def realism_metric(gen: Sequence[Scene], ref: Sequence[Scene],
                   agent_names=AGENT_FEATURES, interaction_names=INTERACTION_FEATURES) -> RealismScores:
    """Mean Wasserstein distance over per-agent features (real) and interaction features (rel_real)."""
    if not gen or not ref:
        raise ValueError("realism_metric needs non-empty scene sets")
    comps = {}
    ga, ra = _pooled(gen, agent_features, agent_names), _pooled(ref, agent_features, agent_names)
    for k in agent_names:
        comps[k] = wasserstein_1d(ga[k], ra[k]) if ga[k].size and ra[k].size else 0.0
    gi, ri = _pooled(gen, interaction_features, interaction_names), _pooled(ref, interaction_features, interaction_names)
    for k in interaction_names:
        comps[k] = wasserstein_1d(gi[k], ri[k]) if gi[k].size and ri[k].size else 0.0
    real = float(np.mean([comps[k] for k in agent_names]))
    rel = float(np.mean([comps[k] for k in interaction_names]))
    return RealismScores(real, rel, comps)


# -- planning evaluation -----------------------------------------------------------

def _horizon_steps(horizons, dt: float, T: int) -> list:
    steps = []
    for h in horizons:
        k = int(round(h / dt))
        if k < 1 or k > T:
            raise ValueError(f"horizon {h}s (step {k}) not covered by a {T}-step trajectory")
        steps.append(k)
    return steps


def planning_l2(pred, gt, dt: float = 0.5, horizons=DEFAULT_HORIZONS) -> dict:
    """Displacement error at each horizon plus their mean under ``"avg"``.

    Trajectories are ``[T, 2]`` (or batched ``[S, T, 2]``, averaged over
    samples); row ``k-1`` is the pose ``k`` steps ahead.
    """
    pred = np.asarray(pred, dtype=float)[..., :2]
    gt = np.asarray(gt, dtype=float)[..., :2]
    if pred.shape != gt.shape:
        raise ValueError("pred and gt trajectories differ in shape")
    steps = _horizon_steps(horizons, dt, pred.shape[-2])
    err = np.linalg.norm(pred - gt, axis=-1)
    out = {float(h): float(np.mean(err[..., k - 1])) for h, k in zip(horizons, steps)}
    out["avg"] = float(np.mean([out[float(h)] for h in horizons]))
    return out


def _ego_headings(traj: np.ndarray) -> np.ndarray:
    """Headings for ego-frame waypoints: the third column if present, else the motion direction."""
    if traj.shape[-1] >= 3:
        return traj[..., 2]
    prev = np.concatenate([np.zeros((1, 2)), traj[:-1, :2]])
    d = traj[:, :2] - prev
    head = np.arctan2(d[:, 1], d[:, 0])
    still = np.hypot(d[:, 0], d[:, 1]) < 1e-9
    # the ego frame faces +y
    head[still] = math.pi / 2
    return head


def ego_boxes(traj, ego_dims, delta: float = 0.0) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    head = _ego_headings(traj)
    return rect_corners(traj[:, 0], traj[:, 1], ego_dims[0] + delta, ego_dims[1] + delta, head)


def collision_rate(pred, ego_dims, others, dt: float = 0.5, horizons=DEFAULT_HORIZONS) -> dict:
    """Fraction of samples whose ego box overlaps another box at or before each horizon.

    ``pred`` is ``[T, 2|3]`` or ``[S, T, 2|3]``; ``others`` gives, per sample,
    an array ``[T, n, 4, 2]`` of other-vehicle corners.
    """
    pred = np.asarray(pred, dtype=float)
    if pred.ndim == 2:
        pred, others = pred[None], [others]
    if len(others) != len(pred):
        raise ValueError("one set of other-vehicle boxes per sample required")
    T = pred.shape[1]
    steps = _horizon_steps(horizons, dt, T)
    first_hit = np.full(len(pred), np.inf)
    for s, (traj, boxes) in enumerate(zip(pred, others)):
        boxes = np.asarray(boxes, dtype=float)
        if boxes.size and boxes.shape[0] < T:
            raise ValueError("other-vehicle boxes do not cover the prediction horizon")
        mine = ego_boxes(traj, ego_dims)
        for t in range(T):
            if boxes.size and any(polygon_iou(mine[t], b) > 0 for b in boxes[t]):
                first_hit[s] = t + 1
                break
    out = {float(h): float(np.mean(first_hit <= k)) for h, k in zip(horizons, steps)}
    out["avg"] = float(np.mean([out[float(h)] for h in horizons]))
    return out


# -- losses ------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionLosses:
    jnll: float
    min_fde: float
    n_star: int


def motion_losses(candidates, probs, gt) -> MotionLosses:
    """Joint NLL of the best candidate and min final displacement error.

    The likelihood of ``gt`` given a candidate is a unit-variance isotropic
    Gaussian over per-step residuals, so a perfect candidate still pays
    ``T * log(2 pi)``.
    """
    cand = np.asarray(candidates, dtype=float)
    p = np.asarray(probs, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float)
    if cand.ndim == 2:
        cand = cand[None]
    if len(p) != len(cand):
        raise ValueError("one probability per candidate required")
    sq = ((cand - gt[None]) ** 2).sum(axis=-1)          # [N, T]
    n_star = int(np.argmin(sq.mean(axis=1)))
    if p[n_star] <= 0:
        raise ValueError(f"best candidate {n_star} has zero probability")
    T = gt.shape[0]
    neg_log_lik = 0.5 * sq[n_star].sum() + T * math.log(2 * math.pi)
    jnll = -math.log(p[n_star]) + neg_log_lik
    return MotionLosses(float(jnll), float(sq[:, -1].min()), n_star)


def occupancy_losses(pred, gt, eps: float = 1e-6) -> tuple:
    """(dice, bce) for predicted occupancy probabilities ``[T, H, W]`` against binary targets."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    axes = tuple(range(1, pred.ndim))
    inter = (pred * gt).sum(axis=axes)
    dice = 1.0 - (2 * inter + eps) / (pred.sum(axis=axes) + gt.sum(axis=axes) + eps)
    p = np.clip(pred, 1e-12, 1 - 1e-12)
    bce = -(gt * np.log(p) + (1 - gt) * np.log(1 - p))
    return float(dice.mean()), float(bce.mean())


def collision_loss(pred, ego_dims, others, delta: float) -> float:
    """Sum over steps and other vehicles of IoU with the ego box inflated by ``delta``."""
    mine = ego_boxes(pred, ego_dims, delta)
    total = 0.0
    for t, boxes in enumerate(others):
        for b in boxes:
            total += polygon_iou(mine[t], b)
    return total


def planning_loss(pred, gt, ego_dims, others, deltas=PLAN_DELTAS, lambdas=PLAN_LAMBDAS,
                  reduction: str = "sum") -> float:
    """Imitation (squared displacement) plus lambda-weighted IoU collision terms.

    ``reduction="mean"`` averages the imitation term over steps instead of summing.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape[0] != gt.shape[0]:
        raise ValueError("pred and gt horizons differ")
    if len(deltas) != len(lambdas):
        raise ValueError("need one lambda per delta")
    others = list(others) if others is not None else []
    if others and len(others) != pred.shape[0]:
        raise ValueError("other-vehicle boxes must cover every predicted step")
    sq = ((pred[:, :2] - gt[:, :2]) ** 2).sum(axis=-1)
    imitation = sq.sum() if reduction == "sum" else sq.mean()
    col = sum(lam * collision_loss(pred, ego_dims, others, d) for d, lam in zip(deltas, lambdas)) if others else 0.0
    return float(imitation + col)


def feature_alignment_loss(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# -- report ------------------------------------------------------------------------

@dataclass
class MetricsReport:
    rule: dict = field(default_factory=dict)
    real: Optional[float] = None
    rel_real: Optional[float] = None
    realism_components: dict = field(default_factory=dict)
    l2_at: dict = field(default_factory=dict)
    collision_rate_at: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    notes: dict = field(default_factory=lambda: {"avg_convention": "mean of horizon values"})

    def rows(self) -> list:
        rows = [(f"rule.{k}", v) for k, v in sorted(self.rule.items())]
        if self.real is not None:
            rows += [("real", self.real), ("rel_real", self.rel_real)]
            rows += [(f"realism.{k}", v) for k, v in sorted(self.realism_components.items())]
        rows += [(f"l2.{k}", v) for k, v in self.l2_at.items()]
        rows += [(f"collision_rate.{k}", v) for k, v in self.collision_rate_at.items()]
        rows += [(f"count.{k}", v) for k, v in sorted(self.counts.items())]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, repr(float(v)) if isinstance(v, float) else v])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {
            "schema_version": "1.0",
            "rule": self.rule, "real": self.real, "rel_real": self.rel_real,
            "realism_components": self.realism_components,
            "l2_at": {str(k): v for k, v in self.l2_at.items()},
            "collision_rate_at": {str(k): v for k, v in self.collision_rate_at.items()},
            "counts": self.counts, "config": self.config, "notes": self.notes,
        }
        return json.dumps(d, indent=1, sort_keys=True)
