"""File formats: binary PGM rasters, map bundles and scene JSON."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .maps import MapGrid
from .scene import Scene

SCENE_SCHEMA = "1.0"
MAP_SCHEMA = "1.0"


class SchemaError(ValueError):
    pass


def check_schema(version, supported: str, what: str):
    if str(version).split(".")[0] != supported.split(".")[0]:
        raise SchemaError(f"{what}: unsupported schema version {version!r} (reader supports {supported})")


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1  # single whitespace after maxval
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def save_map(g: MapGrid, directory) -> Path:
    """One PGM per layer (north at the top) plus a JSON sidecar."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, layer in g.layers.items():
        fname = f"{g.map_id}_{name}.pgm"
        write_pgm(root / fname, layer[::-1].astype(np.uint8) * 255)
        files[name] = fname
    sidecar = {
        "schema_version": MAP_SCHEMA,
        "map_id": g.map_id,
        "resolution": g.resolution,
        "origin": list(g.origin),
        "extent": list(g.extent),
        "layers": list(g.layers),
        "files": files,
        "roads": [list(r) for r in g.roads],
    }
    path = root / f"{g.map_id}.json"
    path.write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_map(path) -> MapGrid:
    path = Path(path)
    meta = json.loads(path.read_text())
    check_schema(meta["schema_version"], MAP_SCHEMA, str(path))
    layers = {name: read_pgm(path.parent / meta["files"][name])[::-1] > 127 for name in meta["layers"]}
    roads = tuple(tuple(r) for r in meta.get("roads", []))
    g = MapGrid(layers, meta["resolution"], tuple(meta["origin"]), meta["map_id"], roads)
    if list(g.extent) != list(meta["extent"]):
        raise ValueError(f"{path}: layer extent does not match sidecar")
    return g


def scene_to_dict(scene: Scene, guide_config: Optional[dict] = None) -> dict:
    agents = []
    for i in range(scene.M):
        agents.append({
            "id": int(scene.agent_ids[i]),
            "valid": bool(scene.valid[i]),
            "dims": {"width": float(scene.dims[i, 0]), "length": float(scene.dims[i, 1])},
            "states": scene.states[:, i].tolist(),
        })
    gc = guide_config if guide_config is not None else scene.meta.get("guide_config")
    return {
        "schema_version": SCENE_SCHEMA,
        "dt": scene.dt,
        "T": scene.T,
        "M": scene.M,
        "agents": agents,
        "map_id": scene.map_ref,
        "seed": scene.seed,
        "guide_config": gc,
    }


def scene_from_dict(d: dict) -> Scene:
    check_schema(d.get("schema_version", SCENE_SCHEMA), SCENE_SCHEMA, "scene")
    agents = d["agents"]
    if len(agents) != d["M"]:
        raise ValueError("scene agent count does not match M")
    states = np.array([a["states"] for a in agents], dtype=float).transpose(1, 0, 2)
    if states.shape[0] != d["T"]:
        raise ValueError("scene state length does not match T")
    dims = [[a["dims"]["width"], a["dims"]["length"]] for a in agents]
    valid = [a.get("valid", True) for a in agents]
    ids = [a.get("id", i) for i, a in enumerate(agents)]
    meta = {"guide_config": d["guide_config"]} if d.get("guide_config") is not None else {}
    return Scene(states, dims, valid, d["dt"], d.get("map_id", ""), ids, d.get("seed"), meta)


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def save_scene(scene: Scene, path, guide_config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_canonical(scene_to_dict(scene, guide_config)))
    return path


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]

