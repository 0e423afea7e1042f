"""Command-line pipeline: train -> generate -> convert -> eval, plus render.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .diffusion import (TrainingDivergedError, encode_condition, generate_scene, load_checkpoint,
                        map_center, save_checkpoint, train_denoiser)
from .ego import build_instances, export_dataset, filter_instances, import_dataset, select_ego
from .formats import SchemaError, load_map, load_scene, save_map, save_scene, write_pgm
from .maps import MapGrid, generate_map, rasterize_scene, render_svg
from .metrics import DEFAULT_HORIZONS, MetricsReport, collision_rate, planning_l2, realism_metric, rule_metric
from .toydata import build_toy_dataset, sample_dims

log = logging.getLogger("egosynth")

OUT_ENV = "EGOSYNTH_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def build_maps(cfg: RunConfig) -> list:
    return [generate_map(cfg.seed * 1000 + i, cfg.map, map_id=f"map-{cfg.seed}-{i}") for i in range(cfg.n_maps)]


def scene_seed(cfg: RunConfig, index: int) -> int:
    return cfg.seed * 1_000_003 + index


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _load_maps(directory: Path) -> dict:
    maps = {}
    for sidecar in sorted(directory.glob("*.json")):
        g = load_map(sidecar)
        maps[g.map_id] = g
    return maps


# -- stages -------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path) -> Path:
    """Train the denoiser on procedural rollouts; writes checkpoint, loss curve, maps and reference scenes."""
    out.mkdir(parents=True, exist_ok=True)
    maps = build_maps(cfg)
    for g in maps:
        save_map(g, out / "maps")
    scenes = build_toy_dataset(maps, cfg.map, cfg.n_train_scenes, cfg.seed, cfg.rollout)
    feats = [encode_condition(g, map_center(g), cfg.history) for g in maps]
    cond = [feats[i % len(maps)] for i in range(len(scenes))]
    tcfg = replace(cfg.train, seed=cfg.seed)
    try:
        result = train_denoiser(scenes, cond, tcfg, cfg.schedule.build())
    except TrainingDivergedError as exc:
        raise FloatingPointError(str(exc)) from exc
    ckpt = save_checkpoint(result.denoiser, out / "checkpoint.bin")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "probe_loss"])
        probes = dict(result.probe_losses)
        w.writerow([0, "", repr(probes[0])])
        for step, loss in enumerate(result.losses, start=1):
            w.writerow([step, repr(loss), repr(probes[step]) if step in probes else ""])
    # held-out rollouts serve as the reference set for the realism metrics
    ref = build_toy_dataset(maps, cfg.map, cfg.n_reference_scenes, cfg.seed + 7919, cfg.rollout)
    for i, sc in enumerate(ref):
        save_scene(sc, out / "reference" / f"scene_{i:05d}.json")
    _write_json(out / "train_manifest.json", {
        "config_hash": cfg.hash(), "seed": cfg.seed, "config": cfg.to_dict(),
        "initial_probe_loss": result.initial_probe, "final_probe_loss": result.final_probe,
        "checkpoint": ckpt.name, "maps": [g.map_id for g in maps],
    })
    log.info("trained: probe loss %.4f -> %.4f", result.initial_probe, result.final_probe)
    return ckpt


def _check_compatible(cfg: RunConfig, den):
    if den.T != cfg.rollout.T:
        raise ConfigError(f"checkpoint built for T={den.T}, config asks for T={cfg.rollout.T}")
    if den.arch["hidden"] != cfg.train.hidden or den.arch["emb"] != cfg.train.emb:
        raise ConfigError("checkpoint architecture does not match the config descriptor")
    if den.schedule.K != cfg.schedule.K:
        raise ConfigError(f"checkpoint schedule has K={den.schedule.K}, config asks for {cfg.schedule.K}")


def cmd_generate(cfg: RunConfig, checkpoint: Path, out: Path, seeds: Optional[list] = None,
                 workers: int = 1) -> list:
    den = load_checkpoint(checkpoint)
    _check_compatible(cfg, den)
    maps = build_maps(cfg)
    for g in maps:
        save_map(g, out / "maps")
    feats = [encode_condition(g, map_center(g), cfg.history) for g in maps]
    if seeds is None:
        seeds = [scene_seed(cfg, i) for i in range(cfg.n_scenes)]
    M, T = cfg.rollout.M, cfg.rollout.T

    def job(i):
        s = seeds[i]
        g = maps[i % len(maps)]
        dims = sample_dims(np.random.default_rng(s), M, cfg.rollout)
        return generate_scene(g, M, T, dims, cfg.guide, den, seed=s, cond=feats[i % len(maps)])

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        scenes = list(pool.map(job, range(len(seeds))))
    files = []
    for i, sc in enumerate(scenes):
        path = save_scene(sc, out / "scenes" / f"scene_{i:05d}.json")
        files.append(path.name)
        if cfg.render_svg:
            g = maps[i % len(maps)]
            (out / "scenes" / f"scene_{i:05d}.svg").write_text(render_svg(sc, 0, g, select_ego(sc)))
    _write_json(out / "scenes" / "manifest.json", {
        "schema_version": "1.0", "config_hash": cfg.hash(), "seeds": list(seeds), "files": files,
        "checkpoint": str(checkpoint.name), "guide_config": cfg.guide.to_dict(),
    })
    return scenes


def _scene_files(directory: Path) -> list:
    files = sorted(directory.glob("scene_*.json"))
    if not files:
        raise DataError(f"no scene files in {directory}")
    return files


def cmd_convert(cfg: RunConfig, scene_dir: Path, out: Path, maps_dir: Optional[Path] = None) -> dict:
    maps = _load_maps(maps_dir) if maps_dir and maps_dir.exists() else {}
    counts = {}
    instances = []
    for index, path in enumerate(_scene_files(scene_dir)):
        sc = load_scene(path)
        rule_seed = sc.seed if sc.seed is not None else cfg.seed + index
        e = select_ego(sc, cfg.ego_rule, seed=rule_seed)
        if e is None:
            log.warning("%s: no agent travels at least 1 m; skipped", path.name)
            counts[path.name] = {"ego": None, "built": 0, "kept": 0}
            continue
        built = build_instances(sc, maps.get(sc.map_ref), e, cfg.T_p)
        kept = filter_instances(built)
        for inst in kept:
            inst.scene_ref = path.stem
        instances.extend(kept)
        counts[path.name] = {"ego": e, "built": len(built), "kept": len(kept)}
        print(f"{path.name}: ego={e} instances={len(built)} kept={len(kept)}")
    n = export_dataset(instances, out, provenance={"config_hash": cfg.hash(), "seed": cfg.seed,
                                                   "ego_rule": cfg.ego_rule, "T_p": cfg.T_p})
    _write_json(out / "conversion.json", {"per_scene": counts, "total": n})
    return counts


def _cv_prediction(inst) -> np.ndarray:
    k = np.arange(1, inst.T_p + 1)[:, None]
    return k * inst.targets[0][None, :]


def cmd_eval(cfg: RunConfig, gen_dir: Path, ref_dir: Path, out: Path, maps_dir: Optional[Path] = None,
             dataset_dir: Optional[Path] = None, predictions: Optional[Path] = None) -> MetricsReport:
    gen = [load_scene(p) for p in _scene_files(gen_dir)]
    ref = [load_scene(p) for p in _scene_files(ref_dir)]
    maps = _load_maps(maps_dir) if maps_dir and maps_dir.exists() else {}
    report = MetricsReport(config={"config_hash": cfg.hash(), "guide": cfg.guide.to_dict()})
    report.rule = rule_metric(gen, cfg.guide, maps or None)
    realism = realism_metric(gen, ref)
    report.real, report.rel_real = realism.real, realism.rel_real
    report.realism_components = realism.components
    report.counts = {"generated_scenes": len(gen), "reference_scenes": len(ref)}
    if dataset_dir is not None:
        insts = import_dataset(dataset_dir)
        if insts:
            if predictions is not None:
                preds = np.array(json.loads(predictions.read_text())["predictions"], dtype=float)
                report.config["predictor"] = str(predictions.name)
            else:
                preds = np.stack([_cv_prediction(i) for i in insts])
                report.config["predictor"] = "constant_velocity"
            gts = np.stack([i.targets for i in insts])
            dt = gen[0].dt
            # short prediction windows only report the horizons they reach
            horizons = [h for h in DEFAULT_HORIZONS if round(h / dt) <= gts.shape[1]]
            if not horizons:
                raise DataError(f"T_p={gts.shape[1]} reaches none of the horizons {DEFAULT_HORIZONS}")
            if len(horizons) < len(DEFAULT_HORIZONS):
                log.warning("T_p=%d: reporting horizons %s only", gts.shape[1], horizons)
            report.l2_at = planning_l2(preds, gts, dt, horizons)
            # ego dims vary per instance; evaluate sample by sample and average
            rates = [collision_rate(p, i.ego_dims, i.other_boxes, dt, horizons) for p, i in zip(preds, insts)]
            report.collision_rate_at = {k: float(np.mean([r[k] for r in rates])) for k in rates[0]}
            report.counts["instances"] = len(insts)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    return report


def cmd_render(scene_path: Path, out: Path, t: int = 0, maps_dir: Optional[Path] = None) -> list:
    sc = load_scene(scene_path)
    maps = _load_maps(maps_dir) if maps_dir and maps_dir.exists() else {}
    g: Optional[MapGrid] = maps.get(sc.map_ref)
    ego = select_ego(sc)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"{scene_path.stem}_t{t:03d}.svg"]
    written[0].write_text(render_svg(sc, t, g, ego))
    if g is not None:
        raster = rasterize_scene(g, sc, t, ego)
        for name in ("drivable_area", "ego", "others"):
            path = out / f"{scene_path.stem}_t{t:03d}_{name}.pgm"
            write_pgm(path, raster.channel(name).astype(np.uint8) * 255)
            written.append(path)
    return written


# -- argument handling ------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egosynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train the trajectory denoiser")
    common(sp)
    sp = sub.add_parser("generate", help="sample guided scenes")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seeds-from", help="manifest whose seeds to replay")
    sp = sub.add_parser("convert", help="turn scenes into ego-centric instances")
    common(sp)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--maps")
    sp = sub.add_parser("eval", help="scenario and planning metrics")
    common(sp)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--maps")
    sp.add_argument("--dataset")
    sp.add_argument("--predictions")
    sp = sub.add_parser("render", help="SVG/PGM render of one scene")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--t", type=int, default=0)
    sp.add_argument("--maps")
    return p


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        workers = args.workers if args.workers is not None else cfg.workers
        out = _out_dir(args, args.command)
        maps_dir = Path(args.maps) if getattr(args, "maps", None) else None
        if args.command == "train":
            print(cmd_train(cfg, out))
        elif args.command == "generate":
            seeds = None
            if args.seeds_from:
                seeds = json.loads(Path(args.seeds_from).read_text())["seeds"]
            scenes = cmd_generate(cfg, Path(args.checkpoint), out, seeds, workers)
            print(f"wrote {len(scenes)} scenes to {out / 'scenes'}")
        elif args.command == "convert":
            counts = cmd_convert(cfg, Path(args.scenes), out, maps_dir)
            print(f"converted {len(counts)} scenes into {out}")
        elif args.command == "eval":
            report = cmd_eval(cfg, Path(args.gen), Path(args.ref), out, maps_dir,
                              Path(args.dataset) if args.dataset else None,
                              Path(args.predictions) if args.predictions else None)
            sys.stdout.write(report.to_csv())
        elif args.command == "render":
            for path in cmd_render(Path(args.scene), out, args.t, maps_dir):
                print(path)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (SchemaError, DataError, OSError, KeyError, ValueError) as exc:
        # ValueError covers malformed files and checkpoint schema mismatches
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
