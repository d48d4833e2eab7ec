import filecmp
import json

import numpy as np
import pytest

from colgeo import dataio, scenes
from colgeo.geometry import CameraIntrinsics, depth_to_normals, interior_mask, angular_error_deg

CAM = CameraIntrinsics.centered(32, 32, 60.0)


def test_fronto_parallel_plane():
    fr = scenes.render(scenes.SceneSpec("plane", CAM, {"normal": [0, 0, 1.0], "offset": 50.0}))
    assert fr.mask.all()
    np.testing.assert_allclose(fr.depth.values, 50.0, rtol=1e-14)
    np.testing.assert_allclose(fr.normals.vectors, np.broadcast_to([0, 0, -1.0], (32, 32, 3)))


def test_on_axis_sphere():
    cam = CameraIntrinsics.centered(33, 33, 60.0)  # odd size puts a pixel on the axis
    fr = scenes.render(scenes.SceneSpec("sphere", cam, {"center": [0, 0, 80.0], "radius": 30.0}))
    assert fr.depth.values[16, 16] == pytest.approx(50.0, abs=1e-12)
    np.testing.assert_allclose(fr.normals.vectors[16, 16], [0, 0, -1], atol=1e-12)


def test_normals_are_unit_and_face_the_camera(rng):
    for kind in scenes.KINDS:
        spec = scenes.GENERATORS[kind](rng, CAM)
        fr = scenes.render(spec)
        n = fr.normals.vectors[fr.mask]
        assert fr.mask.mean() > 0.2
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-9)
        u, v = CAM.rays()
        ray = np.stack([u, v, np.ones_like(u)], -1)[fr.mask]
        assert np.all(np.sum(n * ray, -1) < 0)


def test_tube_depth_grows_toward_the_vanishing_point_and_darkens():
    spec = scenes.SceneSpec("tube", CAM, {"axis_x": [0, 0, 0, 0], "axis_y": [0, 0, 0, 0], "radius": 12.0,
                                          "bumps": [], "cam_offset": [0, 0], "advance": 0.0})
    fr = scenes.render(spec)
    z = fr.depth.values
    row = z[16, 16:]  # from the centre column outwards: depth decreases toward the wall
    assert np.all(np.diff(row[fr.mask[16, 16:]]) < 0)
    lum = fr.rgb.mean(-1)
    m = fr.mask
    deep = z >= np.quantile(z[m], 0.9)
    shallow = z <= np.quantile(z[m], 0.1)
    assert lum[deep & m].mean() < lum[shallow & m].mean()


def test_tube_interior_geometry_error_small(rng):
    cam = CameraIntrinsics.centered(64, 64, 60.0)
    fr = scenes.render(scenes.random_tube(rng, cam))
    est = depth_to_normals(fr.depth, cam)
    m = interior_mask(est.valid & fr.mask)
    assert angular_error_deg(est.vectors[m], fr.normals.vectors[m]).mean() < 3.0


def test_rendering_is_deterministic():
    spec = scenes.random_specs("tube", 1, CAM, seed=4, rgb_noise=0.02, frames=2)[0]
    a, b = scenes.render(spec, 1), scenes.render(spec, 1)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth.values, b.depth.values)


def test_spec_round_trip():
    spec = scenes.random_specs("composite", 1, CAM, seed=2)[0]
    again = scenes.SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


def test_split_counts():
    assert scenes.split_counts(10, (0.6, 0.2, 0.2)) == [6, 2, 2]
    assert sum(scenes.split_counts(7, (0.5, 0.25, 0.25))) == 7
    with pytest.raises(ValueError):
        scenes.split_counts(5, (0.5, 0.6, 0.0))


def test_dataset_is_reproducible_and_video_wise(tmp_path):
    cam = CameraIntrinsics.centered(16, 16, 60.0)
    for d in ("a", "b"):
        specs = scenes.random_specs("sphere", 10, cam, seed=3, frames=2, rgb_noise=0.01)
        scenes.make_dataset(specs, (0.6, 0.2, 0.2), tmp_path / d)
    man = dataio.load_manifest(tmp_path / "a")
    assert [len({f.scene for f in man.frames_in(s)}) for s in ("train", "val", "test")] == [6, 2, 2]
    # every file of a scene lives under that scene's split
    assert all(f.rgb.split("/")[0] == man.scenes[f.scene] for f in man.frames)
    for f in man.frames:
        for k in ("rgb", "depth", "normals", "mask"):
            assert filecmp.cmp(tmp_path / "a" / getattr(f, k), tmp_path / "b" / getattr(f, k), shallow=False)
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_unknown_kind():
    with pytest.raises(ValueError):
        scenes.random_specs("cube", 1, CAM)
