"""Ego-centric training instances from multi-agent scenes."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import rect_corners, transform_points, wrap_angle
from .formats import read_pgm, write_pgm
from .maps import MapGrid, SceneRaster, crop_ego
from .scene import Scene, THETA, V

log = logging.getLogger(__name__)

MIN_EGO_TRAVEL = 1.0  # meters over the whole horizon
MOVING_SPEED = 0.1
DATASET_SCHEMA = "1.0"
EGO_RULES = ("longest", "dynamic", "random")


@dataclass
class EgoInstance:
    """One training sample seen from the ego at source timestep ``t`` (0-based).

    ``other_boxes`` is ``[T_p, n_other, 4, 2]``: corners of every other
    vehicle at each future step, in the ego frame.
    """

    targets: np.ndarray
    headings: np.ndarray
    other_boxes: np.ndarray
    ego_dims: tuple
    t: int
    ego: int
    other_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    other_moving: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    raster: Optional[SceneRaster] = None
    scene_ref: str = ""

    @property
    def T_p(self) -> int:
        return len(self.targets)

    @property
    def n_others(self) -> int:
        return self.other_boxes.shape[1]


def path_lengths(scene: Scene) -> np.ndarray:
    steps = np.linalg.norm(np.diff(scene.positions(), axis=0), axis=-1)
    return steps.sum(axis=0)


def select_ego(scene: Scene, rule: str = "longest", seed: Optional[int] = None) -> Optional[int]:
    """Pick the ego among agents that travel at least 1 m; ``None`` if nobody does.

    ``longest`` maximizes travelled distance, ``dynamic`` the summed |dx|,
    ``random`` draws uniformly with ``seed``. Ties go to the lowest index.
    """
    lengths = path_lengths(scene)
    candidates = np.flatnonzero(scene.valid & (lengths >= MIN_EGO_TRAVEL))
    if candidates.size == 0:
        return None
    if rule == "longest":
        score = lengths
    elif rule == "dynamic":
        score = np.abs(np.diff(scene.states[..., 0], axis=0)).sum(axis=0)
    elif rule == "random":
        rng = np.random.default_rng(seed)
        return int(candidates[rng.integers(candidates.size)])
    else:
        raise ValueError(f"unknown ego rule {rule!r}; expected one of {EGO_RULES}")
    return int(candidates[np.argmax(score[candidates])])


def build_instances(scene: Scene, g: Optional[MapGrid], e: int, T_p: int = 6,
                    with_raster: bool = True, rotate: bool = True) -> list:
    """All ``T - T_p`` instances of ``scene`` for ego ``e``."""
    if not 0 <= e < scene.M:
        raise IndexError(f"ego index {e} out of range")
    if scene.T <= T_p:
        raise ValueError(f"scene horizon T={scene.T} must exceed T_p={T_p}")
    others = np.array([i for i in range(scene.M) if i != e and scene.valid[i]], dtype=int)
    st = scene.states
    corners = rect_corners(st[..., 0], st[..., 1], scene.dims[None, :, 0], scene.dims[None, :, 1],
                           st[..., THETA])                                   # [T, M, 4, 2]
    ego_dims = (float(scene.dims[e, 0]), float(scene.dims[e, 1]))
    out = []
    for t in range(scene.T - T_p):
        sx, sy, _, sth = st[t, e]
        fut = slice(t + 1, t + T_p + 1)
        targets = transform_points(st[fut, e, :2], sx, sy, sth)
        headings = wrap_angle(st[fut, e, THETA] - sth)
        boxes = transform_points(corners[fut][:, others], sx, sy, sth)
        moving = (np.abs(st[fut][:, others, V]).max(axis=0) > MOVING_SPEED) if others.size \
            else np.zeros(0, dtype=bool)
        raster = crop_ego(g, scene, e, t, rotate=rotate) if (with_raster and g is not None) else None
        out.append(EgoInstance(targets, np.atleast_1d(headings), boxes.reshape(T_p, others.size, 4, 2),
                               ego_dims, t, e, others.copy(), moving, raster, scene.map_ref))
    return out


def filter_instances(instances: Sequence[EgoInstance], min_agents: int = 2,
                     driving_only: bool = True) -> list:
    """Keep instances with at least ``min_agents`` vehicles counting the ego.

    With ``driving_only`` parked vehicles in the window are not counted.
    """
    kept = []
    for inst in instances:
        n = int(inst.other_moving.sum()) if driving_only else inst.n_others
        if 1 + n >= min_agents:
            kept.append(inst)
    return kept


# -- persistence ---------------------------------------------------------------

def instance_to_record(inst: EgoInstance, raster_file: Optional[str] = None) -> dict:
    rec = {
        "t": inst.t,
        "ego": inst.ego,
        "scene_ref": inst.scene_ref,
        "ego_dims": {"width": inst.ego_dims[0], "length": inst.ego_dims[1]},
        "targets": inst.targets.tolist(),
        "headings": inst.headings.tolist(),
        "other_ids": inst.other_ids.tolist(),
        "other_moving": inst.other_moving.tolist(),
        "other_boxes": inst.other_boxes.tolist(),
        "n_others": inst.n_others,
    }
    if inst.raster is not None:
        c, h, w = inst.raster.pixels.shape
        rec["raster"] = {"file": raster_file, "channels": list(inst.raster.channels),
                         "meters_per_pixel": inst.raster.meters_per_pixel, "shape": [c, h, w]}
    return rec


def record_to_instance(rec: dict, root: Path) -> EgoInstance:
    T_p = len(rec["targets"])
    raster = None
    if "raster" in rec:
        meta = rec["raster"]
        c, h, w = meta["shape"]
        img = read_pgm(root / meta["file"])
        raster = SceneRaster((img.reshape(c, h, w) > 127), tuple(meta["channels"]), meta["meters_per_pixel"])
    return EgoInstance(
        targets=np.array(rec["targets"], dtype=float).reshape(T_p, 2),
        headings=np.array(rec["headings"], dtype=float),
        other_boxes=np.array(rec["other_boxes"], dtype=float).reshape(T_p, rec["n_others"], 4, 2),
        ego_dims=(rec["ego_dims"]["width"], rec["ego_dims"]["length"]),
        t=rec["t"], ego=rec["ego"],
        other_ids=np.array(rec["other_ids"], dtype=int),
        other_moving=np.array(rec["other_moving"], dtype=bool),
        raster=raster, scene_ref=rec.get("scene_ref", ""))


def export_dataset(instances: Sequence[EgoInstance], path, provenance: Optional[dict] = None) -> int:
    """Write one JSON record (plus PGM raster) per instance and a manifest; returns the record count."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        names = []
        for n, inst in enumerate(instances):
            stem = f"instance_{n:06d}"
            raster_file = None
            if inst.raster is not None:
                raster_file = stem + ".pgm"
                c, h, w = inst.raster.pixels.shape
                write_pgm(root / raster_file, inst.raster.pixels.reshape(c * h, w).astype(np.uint8) * 255)
            (root / (stem + ".json")).write_text(json.dumps(instance_to_record(inst, raster_file)))
            names.append(stem + ".json")
        manifest = {"schema_version": DATASET_SCHEMA, "count": len(names), "instances": names}
        if provenance:
            manifest["provenance"] = provenance
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise OSError(f"failed to export dataset to {root}: {exc}") from exc
    return len(names)


def import_dataset(path) -> list:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if str(manifest["schema_version"]).split(".")[0] != DATASET_SCHEMA.split(".")[0]:
        raise ValueError(f"{root}: unsupported dataset schema {manifest['schema_version']}")
    return [record_to_instance(json.loads((root / name).read_text()), root) for name in manifest["instances"]]
