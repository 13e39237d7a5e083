"""Checkpoint and manifest serialization tests."""

import json

import numpy as np
import pytest

from texsplat.scene import (MissingReferenceError, SchemaError, VersionError,
                            load_manifest, load_scene, save_manifest,
                            save_scene)
from texsplat.synth import camera_ring, make_plane_scene
from texsplat.training import _texel_tensor
from texsplat.visibility import VisibilityMesh, make_box_mesh


def _demo_scene():
    scene = make_plane_scene(nx=2, ny=2, texture_res=2, seed=13, sh_degree=1)
    scene.mesh = VisibilityMesh(make_box_mesh((0.0, 0.0, -5.0), 1.0))
    scene.background = np.array([0.1, 0.2, 0.3])
    return scene


def test_save_load_roundtrip_bitwise(tmp_path):
    scene = _demo_scene()
    master = save_scene(scene, tmp_path / "ckpt")
    assert master.name == "scene.json"
    back = load_scene(master)

    assert np.array_equal(back.positions, scene.positions)
    assert np.array_equal(back.tangent_u, scene.tangent_u)
    assert np.array_equal(back.tangent_v, scene.tangent_v)
    assert np.array_equal(back.scales, scene.scales)
    assert np.array_equal(back.opacities, scene.opacities)
    assert np.array_equal(back.sh, scene.sh)
    assert back.sh_degree == scene.sh_degree
    assert np.array_equal(_texel_tensor(back), _texel_tensor(scene))
    assert back.texture_config.resolution == 2
    assert np.array_equal(back.background, scene.background)
    for got, want in zip(back.environment.spec_mips,
                         scene.environment.spec_mips):
        assert np.array_equal(got, want)
    assert np.array_equal(back.environment.diffuse,
                          scene.environment.diffuse)
    # OBJ vertices are written with 17 significant digits: exact floats.
    assert np.array_equal(back.mesh.triangles, scene.mesh.triangles)

    # Loading by directory works too.
    by_dir = load_scene(tmp_path / "ckpt")
    assert np.array_equal(by_dir.positions, scene.positions)


def test_identical_scenes_serialize_identically(tmp_path):
    scene = _demo_scene()
    save_scene(scene, tmp_path / "a")
    save_scene(scene.copy(), tmp_path / "b")
    for name in ("scene.json", "scene.splats.bin", "scene.textures.bin",
                 "env.diffuse.pfm", "env.spec0.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes(), name


def test_load_missing_files(tmp_path):
    with pytest.raises(MissingReferenceError):
        load_scene(tmp_path / "nonexistent")
    scene = _demo_scene()
    save_scene(scene, tmp_path / "ckpt")
    (tmp_path / "ckpt" / "scene.splats.bin").unlink()
    with pytest.raises(MissingReferenceError):
        load_scene(tmp_path / "ckpt")

    save_scene(scene, tmp_path / "ckpt2")
    (tmp_path / "ckpt2" / "env.spec1.pfm").unlink()
    with pytest.raises(MissingReferenceError):
        load_scene(tmp_path / "ckpt2")


def test_load_rejects_bad_master(tmp_path):
    scene = _demo_scene()
    master = save_scene(scene, tmp_path / "ckpt")

    meta = json.loads(master.read_text())
    meta["version"] = 99
    master.write_text(json.dumps(meta))
    with pytest.raises(VersionError):
        load_scene(master)

    meta["version"] = 1
    meta["texture_resolution"] = 8  # blob holds 2x2 charts
    master.write_text(json.dumps(meta))
    with pytest.raises(SchemaError):
        load_scene(master)

    master.write_text("{not json")
    with pytest.raises(SchemaError):
        load_scene(master)


def test_scene_validate_rejections():
    scene = _demo_scene()
    bad = scene.copy()
    bad.opacities = bad.opacities + 2.0
    with pytest.raises(SchemaError):
        bad.validate()
    bad = scene.copy()
    bad.tangent_v = bad.tangent_u.copy()
    with pytest.raises(SchemaError):
        bad.validate()
    bad = scene.copy()
    bad.positions = bad.positions[:2]
    with pytest.raises(SchemaError):
        bad.validate()
    bad = scene.copy()
    bad.textures = bad.textures[:-1]
    with pytest.raises(SchemaError):
        bad.validate()
    bad = scene.copy()
    bad.positions = bad.positions.copy()
    bad.positions[0, 0] = np.nan
    with pytest.raises(SchemaError):
        bad.validate()


def test_manifest_roundtrip(tmp_path):
    cams = camera_ring(3, radius=2.5, width=20, height=20)
    names = [f"view_{i:03d}.png" for i in range(3)]
    path = tmp_path / "manifest.json"
    save_manifest(path, cams, names)
    back, images = load_manifest(path)
    assert len(back) == 3
    for got, want in zip(back, cams):
        # JSON floats round-trip exactly.
        assert np.array_equal(got.world_to_view, want.world_to_view)
        assert (got.fx, got.fy, got.cx, got.cy) == \
            (want.fx, want.fy, want.cx, want.cy)
        assert (got.width, got.height) == (want.width, want.height)
    assert [p.name for p in images] == names
    assert all(p.parent == tmp_path for p in images)


def test_manifest_errors(tmp_path):
    cams = camera_ring(2, radius=2.5, width=20, height=20)
    path = tmp_path / "m.json"
    with pytest.raises(ValueError):
        save_manifest(path, cams, ["only_one.png"])
    with pytest.raises(ValueError):
        save_manifest(path, [], [])
    mixed = cams + camera_ring(1, radius=2.5, width=40, height=40)
    with pytest.raises(ValueError):
        save_manifest(path, mixed, ["a.png", "b.png", "c.png"])

    with pytest.raises(MissingReferenceError):
        load_manifest(tmp_path / "missing.json")
    path.write_text("[1,")
    with pytest.raises(SchemaError):
        load_manifest(path)
    path.write_text(json.dumps({"version": 7}))
    with pytest.raises(VersionError):
        load_manifest(path)
    path.write_text(json.dumps({"version": 1, "views": []}))
    with pytest.raises(SchemaError):
        load_manifest(path)
