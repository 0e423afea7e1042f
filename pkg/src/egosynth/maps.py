"""Layered boolean map rasters: procedural generation, on-road queries and rendering.

Grid convention: ``layers[name][row, col]`` covers the world square
``[ox + col*res, ox + (col+1)*res) x [oy + row*res, oy + (row+1)*res)``, so
row index grows northwards. :class:`SceneRaster` images instead use the
picture convention (row 0 at the top, i.e. north or ego-forward).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import AgentState, VehicleDims, rect_corners
from .scene import Scene

LAYER_NAMES = ("drivable_area", "road_segment", "lane", "ped_crossing", "walkway")
CROP_SIZE_M = 60.0
DEFAULT_RESOLUTION = 0.25


@dataclass(frozen=True)
class MapSpec:
    """Road-network parameters for :func:`generate_map`."""

    width_m: float = 200.0
    height_m: float = 200.0
    resolution: float = DEFAULT_RESOLUTION
    lane_width: float = 3.5
    lanes_per_road: int = 2
    n_straight: int = 2
    n_curved: int = 1
    sidewalk_width: float = 2.0
    crossing_width: float = 3.0
    origin: tuple = (0.0, 0.0)
    jitter: float = 0.1

    @property
    def road_width(self) -> float:
        return self.lane_width * self.lanes_per_road

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MapSpec":
        d = dict(d)
        if "origin" in d:
            d["origin"] = tuple(d["origin"])
        return cls(**d)


@dataclass(frozen=True)
class MapGrid:
    layers: dict
    resolution: float
    origin: tuple = (0.0, 0.0)
    map_id: str = ""
    roads: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        shapes = {np.shape(v) for v in self.layers.values()}
        if len(shapes) != 1:
            raise ValueError(f"layers disagree on extent: {shapes}")
        frozen = {}
        for name, arr in self.layers.items():
            arr = np.array(arr, dtype=bool)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "layers", frozen)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def extent(self) -> tuple:
        return next(iter(self.layers.values())).shape

    @property
    def drivable(self) -> np.ndarray:
        return self.layers["drivable_area"]

    def cell_of(self, pts) -> tuple:
        """Floor-to-cell indices ``(row, col)`` for world points ``(..., 2)``."""
        pts = np.asarray(pts, dtype=float)
        col = np.floor((pts[..., 0] - self.origin[0]) / self.resolution)
        row = np.floor((pts[..., 1] - self.origin[1]) / self.resolution)
        return row, col

    def sample(self, layer: str, pts) -> np.ndarray:
        """Layer value at world points; anything outside the grid reads as False."""
        row, col = self.cell_of(pts)
        rows, cols = self.extent
        inside = (row >= 0) & (row < rows) & (col >= 0) & (col < cols) & np.isfinite(row) & np.isfinite(col)
        r = np.where(inside, row, 0).astype(np.int64)
        c = np.where(inside, col, 0).astype(np.int64)
        return inside & self.layers[layer][r, c]

    def cell_centers(self) -> tuple:
        rows, cols = self.extent
        xs = self.origin[0] + (np.arange(cols) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(rows) + 0.5) * self.resolution
        return xs, ys


def is_onroad(g: MapGrid, p) -> bool | np.ndarray:
    """True where ``p`` falls in a drivable cell. Accepts one point or an array of points."""
    out = g.sample("drivable_area", p)
    return bool(out) if np.ndim(out) == 0 else out


# -- procedural generation -------------------------------------------------

def _road_layout(rng: np.random.Generator, spec: MapSpec) -> list:
    ox, oy = spec.origin
    W, H = spec.width_m, spec.height_m
    roads = []
    for k in range(spec.n_straight):
        horizontal = k % 2 == 0
        if k < 2:
            frac = 0.5 + rng.uniform(-spec.jitter, spec.jitter)
        else:
            frac = rng.uniform(0.15, 0.85)
        if horizontal:
            roads.append(("h", oy + frac * H))
        else:
            roads.append(("v", ox + frac * W))
    hs = [r[1] for r in roads if r[0] == "h"]
    vs = [r[1] for r in roads if r[0] == "v"]
    cx = vs[0] if vs else ox + W / 2
    cy = hs[0] if hs else oy + H / 2
    for _ in range(spec.n_curved):
        radius = rng.uniform(0.2, 0.4) * min(W, H)
        roads.append(("ring", cx, cy, radius))
    return roads


def _road_distance(road, X, Y):
    """Distance of points to the road centerline and the along-road coordinate."""
    if road[0] == "h":
        return np.abs(Y - road[1]), X
    if road[0] == "v":
        return np.abs(X - road[1]), Y
    _, cx, cy, radius = road
    rho = np.hypot(X - cx, Y - cy)
    return np.abs(rho - radius), np.arctan2(Y - cy, X - cx) * radius


def generate_map(seed: int, spec: MapSpec = MapSpec(), map_id: Optional[str] = None) -> MapGrid:
    """Build a deterministic road network of straight roads and ring roads.

    Straight roads alternate horizontal and vertical so that every pair of
    perpendicular roads intersects; rings are centered on the first
    intersection and cross both of the first two roads, which keeps the
    drivable area connected.
    """
    if spec.width_m <= 0 or spec.height_m <= 0 or spec.resolution <= 0:
        raise ValueError("map extent and resolution must be positive")
    if spec.lane_width <= 0 or spec.lanes_per_road < 1:
        raise ValueError("lane width must be positive")
    rng = np.random.default_rng(seed)
    rows = int(round(spec.height_m / spec.resolution))
    cols = int(round(spec.width_m / spec.resolution))
    xs = spec.origin[0] + (np.arange(cols) + 0.5) * spec.resolution
    ys = spec.origin[1] + (np.arange(rows) + 0.5) * spec.resolution
    X, Y = np.meshgrid(xs, ys)

    roads = _road_layout(rng, spec)
    hw = spec.road_width / 2
    coverage = np.zeros((rows, cols), dtype=np.int16)
    near = np.zeros((rows, cols), dtype=bool)
    for road in roads:
        dist, _ = _road_distance(road, X, Y)
        coverage += dist <= hw
        near |= dist <= hw + spec.sidewalk_width
    drivable = coverage > 0
    lane = coverage == 1
    walkway = near & ~drivable

    crossing = np.zeros_like(drivable)
    straight = [r for r in roads if r[0] in ("h", "v")]
    for road in straight:
        dist, along = _road_distance(road, X, Y)
        on_road = dist <= hw
        for other in straight:
            if other[0] == road[0]:
                continue
            # strip across `road` just outside the junction with `other`
            gap = np.abs(along - other[1])
            crossing |= on_road & (gap > hw + 1.0) & (gap <= hw + 1.0 + spec.crossing_width)

    layers = {
        "drivable_area": drivable,
        "road_segment": drivable.copy(),
        "lane": lane,
        "ped_crossing": crossing & drivable,
        "walkway": walkway,
    }
    return MapGrid(layers, spec.resolution, spec.origin,
                   map_id if map_id is not None else f"map-{seed}", tuple(roads))


# -- bounding-box lattices --------------------------------------------------

def bbox_lattice(x, y, theta, width, length, n: int = 10) -> np.ndarray:
    """Corner-inclusive ``n x n`` lattices inside oriented boxes, shape ``(..., n*n, 2)``."""
    if n < 2:
        raise ValueError("lattice side must be >= 2")
    x, y, theta, width, length = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (x, y, theta, width, length)))
    g = np.linspace(-0.5, 0.5, n)
    lat_u, lon_u = np.meshgrid(g, g, indexing="ij")
    lat = lat_u.ravel() * width[..., None]
    lon = lon_u.ravel() * length[..., None]
    c = np.cos(theta)[..., None]
    s = np.sin(theta)[..., None]
    px = x[..., None] + lon * c - lat * s
    py = y[..., None] + lon * s + lat * c
    return np.stack([px, py], axis=-1)


def sample_bbox_grid(s: AgentState, d: VehicleDims, n: int = 10) -> np.ndarray:
    return bbox_lattice(s.x, s.y, s.theta, d.width, d.length, n)


# -- rasters ------------------------------------------------------------------

@dataclass(frozen=True)
class SceneRaster:
    """Multi-channel boolean image ``[C, H, W]``; row 0 is the top of the picture."""

    pixels: np.ndarray
    channels: tuple
    meters_per_pixel: float

    @property
    def size_m(self) -> tuple:
        _, h, w = self.pixels.shape
        return h * self.meters_per_pixel, w * self.meters_per_pixel

    def channel(self, name: str) -> np.ndarray:
        return self.pixels[self.channels.index(name)]


RASTER_CHANNELS = LAYER_NAMES + ("ego", "others")


def _paint_boxes(px, py, scene: Scene, t: int, agents) -> np.ndarray:
    """Union of filled oriented boxes sampled at pixel centers ``(px, py)``."""
    painted = np.zeros(px.shape, dtype=bool)
    for i in agents:
        x, y, _, th = scene.states[t, i]
        w, length = scene.dims[i]
        c, s = math.cos(th), math.sin(th)
        dx, dy = px - x, py - y
        lon = c * dx + s * dy
        lat = -s * dx + c * dy
        painted |= (np.abs(lon) <= length / 2) & (np.abs(lat) <= w / 2)
    return painted


def crop_ego(g: MapGrid, scene: Scene, ego: int, t: int, size_m: float = CROP_SIZE_M,
             resolution: Optional[float] = None, rotate: bool = True) -> SceneRaster:
    """Square map window centered on the ego at time ``t``.

    With ``rotate`` the window is expressed in the ego frame (heading up);
    otherwise it stays north-up.
    """
    if not 0 <= ego < scene.M:
        raise IndexError(f"ego index {ego} out of range for {scene.M} agents")
    if not 0 <= t < scene.T:
        raise IndexError(f"timestep {t} out of range")
    res = g.resolution if resolution is None else resolution
    n = int(math.ceil(size_m / res - 1e-9))
    mpp = size_m / n
    half = size_m / 2
    u = -half + (np.arange(n) + 0.5) * mpp          # columns: ego-right
    w = half - (np.arange(n) + 0.5) * mpp           # rows: ego-forward, top first
    U, Wf = np.meshgrid(u, w)
    sx, sy, _, th = scene.states[t, ego]
    if rotate:
        sn, cs = math.sin(th), math.cos(th)
        px = sx + sn * U + cs * Wf
        py = sy - cs * U + sn * Wf
    else:
        px, py = sx + U, sy + Wf
    pts = np.stack([px, py], axis=-1)
    chans = [g.sample(name, pts) for name in LAYER_NAMES]
    others = [i for i in range(scene.M) if i != ego and scene.valid[i]]
    chans.append(_paint_boxes(px, py, scene, t, [ego]))
    chans.append(_paint_boxes(px, py, scene, t, others))
    return SceneRaster(np.stack(chans), RASTER_CHANNELS, mpp)


def render_layers(g: MapGrid) -> np.ndarray:
    """Map layers in picture convention, ``[5, H, W]``."""
    return np.stack([g.layers[name][::-1] for name in LAYER_NAMES])


def rasterize_scene(g: MapGrid, scene: Scene, t: int, ego: Optional[int] = None) -> SceneRaster:
    """Whole-map raster at time ``t`` with every valid vehicle painted as a filled box."""
    if not 0 <= t < scene.T:
        raise IndexError(f"timestep {t} out of range")
    xs, ys = g.cell_centers()
    PX, PY = np.meshgrid(xs, ys[::-1])
    agents = [i for i in range(scene.M) if scene.valid[i]]
    ego_layer = _paint_boxes(PX, PY, scene, t, [ego] if ego is not None else [])
    others = _paint_boxes(PX, PY, scene, t, [i for i in agents if i != ego])
    pixels = np.concatenate([render_layers(g), ego_layer[None], others[None]])
    return SceneRaster(pixels, RASTER_CHANNELS, g.resolution)


# -- SVG ------------------------------------------------------------------

def render_svg(scene: Scene, t: int, g: Optional[MapGrid] = None, ego: Optional[int] = None,
               scale: float = 4.0) -> str:
    """Top-down SVG of the scene at ``t``: ego white, other vehicles orange."""
    if g is not None:
        rows, cols = g.extent
        x0, y0 = g.origin
        w_m, h_m = cols * g.resolution, rows * g.resolution
    else:
        pos = scene.states[..., :2].reshape(-1, 2)
        x0, y0 = pos.min(axis=0) - 10.0
        w_m, h_m = pos.max(axis=0) - pos.min(axis=0) + 20.0

    def to_px(x, y):
        return (x - x0) * scale, (y0 + h_m - y) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_m * scale:.1f}" '
             f'height="{h_m * scale:.1f}" viewBox="0 0 {w_m * scale:.1f} {h_m * scale:.1f}">',
             f'<rect width="100%" height="100%" fill="#202020"/>']
    if g is not None:
        drv = g.drivable
        for r in range(drv.shape[0]):
            row = drv[r]
            if not row.any():
                continue
            edges = np.flatnonzero(np.diff(np.concatenate([[0], row.astype(np.int8), [0]])))
            for a, b in zip(edges[::2], edges[1::2]):
                px, py = to_px(x0 + a * g.resolution, y0 + (r + 1) * g.resolution)
                parts.append(f'<rect x="{px:.2f}" y="{py:.2f}" width="{(b - a) * g.resolution * scale:.2f}" '
                             f'height="{g.resolution * scale:.2f}" fill="#707070"/>')
    for i in range(scene.M):
        if not scene.valid[i]:
            continue
        x, y, _, th = scene.states[t, i]
        corners = rect_corners(x, y, scene.dims[i, 0], scene.dims[i, 1], th)
        pts = " ".join("{:.2f},{:.2f}".format(*to_px(cx, cy)) for cx, cy in corners)
        color = "#ffffff" if i == ego else "#ff8c00"
        parts.append(f'<polygon points="{pts}" fill="{color}" data-agent="{i}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

