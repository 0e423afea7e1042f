"""Agent states, ego-frame transforms and oriented-box primitives.

Headings are measured counterclockwise from +x. The ego frame puts the ego
at the origin with its heading along +y, so a state with heading pi/2 makes
the transform a pure translation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def wrap_angle(theta):
    """Normalize angle(s) into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; the half-open interval keeps +pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.v, self.theta)
        if not all(math.isfinite(float(c)) for c in vals):
            raise ValueError(f"non-finite agent state {vals}")
        if self.v < 0:
            raise ValueError(f"speed must be non-negative, got {self.v}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        x, y, v, theta = (float(c) for c in arr)
        return cls(x, y, v, theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class VehicleDims:
    """Vehicle footprint. ``length`` runs along the heading."""

    width: float
    length: float

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"vehicle dims must be positive, got {self.width}x{self.length}")

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.width, self.length)


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    width: float
    length: float
    heading: float = field(default=0.0)

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError("degenerate box: width and length must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @classmethod
    def from_state(cls, s: AgentState, d: VehicleDims) -> "OrientedBox":
        return cls((s.x, s.y), d.width, d.length, s.theta)

    def corners(self) -> np.ndarray:
        return rect_corners(self.center[0], self.center[1], self.width, self.length, self.heading)

    @property
    def area(self) -> float:
        return self.width * self.length


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def transform_to_ego(p, s: AgentState) -> np.ndarray:
    """Express world point(s) ``p`` (shape ``(..., 2)``) in the ego frame of ``s``."""
    p = np.asarray(p, dtype=float)
    _check_finite(p)
    return transform_points(p, s.x, s.y, s.theta)


def transform_points(p, sx, sy, stheta) -> np.ndarray:
    """Array version of :func:`transform_to_ego`; the pose may broadcast against ``p``."""
    p = np.asarray(p, dtype=float)
    dx = p[..., 0] - sx
    dy = p[..., 1] - sy
    sin, cos = np.sin(stheta), np.cos(stheta)
    return np.stack([sin * dx - cos * dy, cos * dx + sin * dy], axis=-1)


def transform_from_ego(q, s: AgentState) -> np.ndarray:
    """Inverse of :func:`transform_to_ego`."""
    q = np.asarray(q, dtype=float)
    sin, cos = math.sin(s.theta), math.cos(s.theta)
    u, w = q[..., 0], q[..., 1]
    return np.stack([s.x + sin * u + cos * w, s.y - cos * u + sin * w], axis=-1)


def transform_heading(theta, s: AgentState):
    return wrap_angle(np.asarray(theta, dtype=float) - s.theta)


def rect_corners(cx, cy, width, length, heading) -> np.ndarray:
    """Corners of oriented rectangles, counterclockwise, shape ``(..., 4, 2)``.

    All arguments broadcast together.
    """
    cx, cy, width, length, heading = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (cx, cy, width, length, heading)))
    lon = np.array([0.5, 0.5, -0.5, -0.5])
    lat = np.array([-0.5, 0.5, 0.5, -0.5])
    cos = np.cos(heading)[..., None]
    sin = np.sin(heading)[..., None]
    a = lon * length[..., None]
    b = lat * width[..., None]
    xs = cx[..., None] + a * cos - b * sin
    ys = cy[..., None] + a * sin + b * cos
    return np.stack([xs, ys], axis=-1)


def box_corners(s: AgentState, d: VehicleDims) -> np.ndarray:
    return rect_corners(s.x, s.y, d.width, d.length, s.theta)


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counterclockwise vertices."""
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clip) -> np.ndarray:
    """Clip polygon ``subject`` against convex counterclockwise polygon ``clip``.

    Sutherland-Hodgman; returns the (possibly empty) intersection polygon.
    """
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clip, dtype=float)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=float).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_iou(a, b) -> float:
    """IoU of two convex counterclockwise polygons."""
    area_a = polygon_area(a)
    area_b = polygon_area(b)
    if area_a <= 0 or area_b <= 0:
        raise ValueError("degenerate polygon in IoU")
    # cheap reject on bounding boxes
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if (a[:, 0].max() <= b[:, 0].min() or b[:, 0].max() <= a[:, 0].min()
            or a[:, 1].max() <= b[:, 1].min() or b[:, 1].max() <= a[:, 1].min()):
        return 0.0
    inter = max(polygon_area(clip_convex(a, b)), 0.0)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    return polygon_iou(a.corners(), b.corners())


def path_length(positions: Sequence) -> float:
    pts = np.asarray(positions, dtype=float)
    if pts.size == 0:
        raise ValueError("path_length needs at least one point")
    pts = pts.reshape(-1, 2)
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def point_in_box(p, s: AgentState, d: VehicleDims, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    dx = p[..., 0] - s.x
    dy = p[..., 1] - s.y
    c, sn = math.cos(s.theta), math.sin(s.theta)
    lon = c * dx + sn * dy
    lat = -sn * dx + c * dy
    return (np.abs(lon) <= d.length / 2 + tol) & (np.abs(lat) <= d.width / 2 + tol)
