"""Regenerate the tiny dataset and the malformed manifests next to it.

Each ``bad_*.json`` differs from the valid ``manifest.json`` in exactly one way
and shares its image files, so a rejection can only come from that defect.
"""
import copy
import json
import shutil
from pathlib import Path

from colgeo import scenes
from colgeo.geometry import CameraIntrinsics

HERE = Path(__file__).resolve().parent
ROOT = HERE / "tiny"


def main():
    shutil.rmtree(ROOT, ignore_errors=True)
    cam = CameraIntrinsics.centered(8, 8, 60.0)
    specs = scenes.random_specs("plane", 3, cam, seed=7)
    man = scenes.make_dataset(specs, (1 / 3, 1 / 3, 1 / 3), ROOT)
    good = json.loads((ROOT / "manifest.json").read_text())
    good.pop("extra", None)
    (ROOT / "manifest.json").write_text(json.dumps(good, indent=1) + "\n")

    def variant(name, edit):
        m = copy.deepcopy(good)
        edit(m)
        (ROOT / f"bad_{name}.json").write_text(json.dumps(m, indent=1) + "\n")

    variant("02_missing_version", lambda m: m.pop("version"))
    variant("03_future_version", lambda m: m.update(version=99))
    variant("04_principal_point_outside", lambda m: m["intrinsics"].update(cx=40.0))
    variant("05_depth_overflows_16bit", lambda m: m.update(max_depth=1000.0, depth_scale=0.01))
    variant("06_scene_in_two_splits", lambda m: m["scenes"].append({"id": m["scenes"][0]["id"], "split": "test"}))
    variant("07_frame_of_unknown_scene", lambda m: m["frames"][0].update(scene="nowhere"))
    variant("08_duplicate_frame", lambda m: m["frames"].append(dict(m["frames"][0])))
    variant("09_missing_file", lambda m: m["frames"][1].update(depth="val/ghost_depth.png"))
    variant("10_declared_count_mismatch", lambda m: m["split_counts"].update(train=5))
    text = (ROOT / "manifest.json").read_text()
    (ROOT / "bad_01_truncated_json.json").write_text(text[: len(text) // 2])
    print(f"wrote {ROOT} ({len(man.frames)} frames) and 10 malformed manifests")


if __name__ == "__main__":
    main()
