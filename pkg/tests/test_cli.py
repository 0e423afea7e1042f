import json
import shutil

import numpy as np
import pytest

from egosynth.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from egosynth.formats import save_scene
from egosynth.scene import Scene

TINY = {
    "seed": 3,
    "map": {"width_m": 120, "height_m": 120, "n_straight": 2, "n_curved": 0},
    "n_maps": 1,
    "schedule": {"K": 10},
    "train": {"steps": 30, "batch_size": 4, "lr": 1e-3, "hidden": 16, "emb": 8, "probe_size": 4,
              "log_every": 10},
    "rollout": {"M": 4, "T": 12, "spawn_radius": 30.0},
    "n_train_scenes": 8,
    "n_reference_scenes": 4,
    "n_scenes": 3,
    "T_p": 4,
    "render_svg": True,
}


def write_config(path, **over):
    path.write_text(json.dumps({**TINY, **over}))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(root / "train")]) == 0
    assert main(["generate", "--config", cfg, "--checkpoint", str(root / "train" / "checkpoint.bin"),
                 "--out", str(root / "gen"), "--workers", "2"]) == 0
    assert main(["convert", "--config", cfg, "--scenes", str(root / "gen" / "scenes"),
                 "--maps", str(root / "gen" / "maps"), "--out", str(root / "ds")]) == 0
    assert main(["eval", "--config", cfg, "--gen", str(root / "gen" / "scenes"),
                 "--ref", str(root / "train" / "reference"), "--maps", str(root / "gen" / "maps"),
                 "--dataset", str(root / "ds"), "--out", str(root / "eval")]) == 0
    return root, cfg


def test_train_outputs(run):
    root, _ = run
    t = root / "train"
    assert (t / "checkpoint.bin").read_bytes()[:4] == b"EGSD"
    lines = (t / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,probe_loss" and len(lines) == 32
    man = json.loads((t / "train_manifest.json").read_text())
    assert man["seed"] == 3 and len(list((t / "reference").glob("scene_*.json"))) == 4


def test_train_same_seed_identical_checkpoints(tmp_path):
    cfg = write_config(tmp_path / "c.json", train={**TINY["train"], "steps": 200, "log_every": 50})
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name / "nested")]) == 0
    ckpt = [(tmp_path / n / "nested" / "checkpoint.bin").read_bytes() for n in ("a", "b")]
    assert ckpt[0] == ckpt[1]
    man = json.loads((tmp_path / "a" / "nested" / "train_manifest.json").read_text())
    assert man["final_probe_loss"] < man["initial_probe_loss"]


def test_generate_outputs(run):
    root, _ = run
    scenes = root / "gen" / "scenes"
    man = json.loads((scenes / "manifest.json").read_text())
    assert len(man["files"]) == 3 and len(man["seeds"]) == 3
    assert man["schema_version"] == "1.0" and "config_hash" in man and "guide_config" in man
    assert len(list(scenes.glob("*.svg"))) == 3


def test_convert_and_eval_outputs(run):
    root, _ = run
    conv = json.loads((root / "ds" / "conversion.json").read_text())
    assert len(conv["per_scene"]) == 3
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    assert set(metrics["rule"]) == {"no_collision", "no_offroad"}
    # T_p = 4 steps of 0.5 s reaches the 1 s and 2 s horizons only
    assert set(metrics["l2_at"]) == {"1.0", "2.0", "avg"}
    assert (root / "eval" / "metrics.csv").read_text().startswith("metric,value")


def test_generate_replays_manifest_seeds_bit_identical(run, tmp_path):
    root, cfg = run
    assert main(["generate", "--config", cfg, "--checkpoint", str(root / "train" / "checkpoint.bin"),
                 "--seeds-from", str(root / "gen" / "scenes" / "manifest.json"), "--out", str(tmp_path)]) == 0
    for f in sorted((root / "gen" / "scenes").iterdir()):
        assert (tmp_path / "scenes" / f.name).read_bytes() == f.read_bytes()


def test_eval_rerun_byte_identical_and_self_comparison(run, tmp_path):
    root, cfg = run
    args = ["eval", "--config", cfg, "--gen", str(root / "gen" / "scenes"),
            "--ref", str(root / "train" / "reference"), "--maps", str(root / "gen" / "maps"),
            "--dataset", str(root / "ds"), "--out", str(tmp_path / "again")]
    assert main(args) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (root / "eval" / "metrics.csv").read_bytes()
    assert main(["eval", "--config", cfg, "--gen", str(root / "gen" / "scenes"),
                 "--ref", str(root / "gen" / "scenes"), "--out", str(tmp_path / "self")]) == 0
    m = json.loads((tmp_path / "self" / "metrics.json").read_text())
    assert m["real"] == 0.0 and m["rel_real"] == 0.0


def test_render(run, tmp_path):
    root, cfg = run
    scene = root / "gen" / "scenes" / "scene_00000.json"
    assert main(["render", "--scene", str(scene), "--maps", str(root / "gen" / "maps"), "--t", "2",
                 "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["scene_00000_t002.svg", "scene_00000_t002_drivable_area.pgm",
                     "scene_00000_t002_ego.pgm", "scene_00000_t002_others.pgm"]


def test_convert_skips_stationary_scene(run, tmp_path, capsys):
    root, cfg = run
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    shutil.copy(root / "gen" / "scenes" / "scene_00000.json", scenes)
    save_scene(Scene(np.zeros((12, 2, 4)) + [[0, 0, 0, 0], [10, 0, 0, 0]], [(2, 4)] * 2),
               scenes / "scene_00001.json")
    assert main(["convert", "--config", cfg, "--scenes", str(scenes), "--out", str(tmp_path / "ds")]) == 0
    conv = json.loads((tmp_path / "ds" / "conversion.json").read_text())
    assert conv["per_scene"]["scene_00001.json"] == {"ego": None, "built": 0, "kept": 0}
    assert conv["per_scene"]["scene_00000.json"]["ego"] is not None


def test_out_env_default(run, tmp_path, monkeypatch):
    root, cfg = run
    monkeypatch.setenv("EGOSYNTH_OUT", str(tmp_path / "envroot"))
    scene = root / "gen" / "scenes" / "scene_00000.json"
    assert main(["render", "--scene", str(scene)]) == 0
    assert (tmp_path / "envroot" / "render" / "scene_00000_t000.svg").exists()


# -- exit codes -------------------------------------------------------------------

def test_exit_config_error(tmp_path):
    assert main(["train", "--config", write_config(tmp_path / "c.json", bogus=1), "--out", str(tmp_path)]) \
        == EXIT_CONFIG


def test_exit_checkpoint_config_mismatch(run, tmp_path):
    root, _ = run
    cfg = write_config(tmp_path / "c.json", rollout={"M": 4, "T": 16})
    assert main(["generate", "--config", cfg, "--checkpoint", str(root / "train" / "checkpoint.bin"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_exit_data_error(run, tmp_path):
    _, cfg = run
    assert main(["convert", "--config", cfg, "--scenes", str(tmp_path / "nothing"), "--out", str(tmp_path)]) \
        == EXIT_DATA
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE")
    assert main(["generate", "--config", cfg, "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_DATA


def test_exit_numeric_failure(tmp_path):
    train = {**TINY["train"], "lr": 1e12, "steps": 20}
    cfg = write_config(tmp_path / "c.json", train=train)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == EXIT_NUMERIC
