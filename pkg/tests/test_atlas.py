"""Atlas packing, indirection and chart sampling equivalence tests."""

import numpy as np
import pytest

from texsplat.atlas import (AtlasSet, IndirectionBuffer, atlas_coords,
                            atlas_sample, bench_matrix, bench_sampling,
                            chart_grid, load_atlases, pack_atlases,
                            save_atlases)
from texsplat.synth import camera_ring, make_plane_scene
from texsplat.textures import MaterialTextureSet, TextureMap, bilinear_sample


def _random_sets(rng, count, T=4):
    sets = []
    for _ in range(count):
        sets.append(MaterialTextureSet(
            albedo=TextureMap(rng.random((T, T, 3), dtype=np.float32),
                              "albedo"),
            roughness=TextureMap(rng.random((T, T, 1), dtype=np.float32),
                                 "roughness"),
            metallic=TextureMap(rng.random((T, T, 1), dtype=np.float32),
                                "metallic"),
            tangent_normal=TextureMap(rng.random((T, T, 2), dtype=np.float32),
                                      "tangent_normal"),
        ))
    return sets


def test_chart_grid_values():
    # 4096/4 = 1024 charts per row; 9 splats need one row on one page.
    assert chart_grid(9, 4, 4096) == (1024, 1, 1)
    # 64/16 = 4 per row; 10 splats -> 3 rows, still one page.
    assert chart_grid(10, 16, 64) == (4, 3, 1)
    # 40 splats at 16 per page -> 3 pages.
    assert chart_grid(40, 16, 64) == (4, 4, 3)
    assert chart_grid(1, 4, 4) == (1, 1, 1)


def test_chart_grid_errors():
    with pytest.raises(ValueError):
        chart_grid(4, 32, 16)
    with pytest.raises(ValueError):
        chart_grid(0, 4, 64)


def test_pack_places_every_chart_once():
    rng = np.random.default_rng(31)
    sets = _random_sets(rng, 10, T=4)
    atlas_set = pack_atlases(sets, max_dim=8)  # 2x2 charts per page
    atlas_set.validate()
    assert len(atlas_set.family_a) == 3
    ind = atlas_set.indirection
    assert ind.charts_x == 2 and ind.charts_y == 2 and ind.pages == 3
    seen = {tuple(e) for e in ind.entries}
    assert len(seen) == 10  # no two splats share a chart
    T = 4
    for k, ts in enumerate(sets):
        cx, cy, page = ind.lookup(k)
        pa = atlas_set.family_a[page].texels
        pb = atlas_set.family_b[page].texels
        ys = slice(cy * T, (cy + 1) * T)
        xs = slice(cx * T, (cx + 1) * T)
        assert np.array_equal(pa[ys, xs, 0:3], ts.albedo.data)
        assert np.array_equal(pa[ys, xs, 3], ts.roughness.data[:, :, 0])
        assert np.array_equal(pb[ys, xs, 0:2], ts.tangent_normal.data)
        assert np.array_equal(pb[ys, xs, 2], ts.metallic.data[:, :, 0])
        assert np.all(pb[ys, xs, 3] == 0.0)


def test_pack_leaves_unused_charts_zero():
    rng = np.random.default_rng(37)
    sets = _random_sets(rng, 5, T=4)  # 2x2 grid: page 1 has 3 empty charts
    atlas_set = pack_atlases(sets, max_dim=8)
    last = atlas_set.family_a[1].texels
    assert np.all(last[0:4, 4:8] == 0.0)
    assert np.all(last[4:8, :] == 0.0)


def test_pack_rejects_bad_inputs():
    rng = np.random.default_rng(41)
    with pytest.raises(ValueError):
        pack_atlases([])
    mixed = _random_sets(rng, 1, T=4) + _random_sets(rng, 1, T=8)
    with pytest.raises(ValueError):
        pack_atlases(mixed)


def test_atlas_coords_values():
    # (chart*T + s*T) / (charts*T) by hand: (4 + 1) / 8 and (12 + 3) / 16.
    s_a, t_a = atlas_coords(1, 3, 0.25, 0.75, 4, 2, 4)
    assert s_a == pytest.approx(0.625)
    assert t_a == pytest.approx(0.9375)
    s_a, _ = atlas_coords(2, 0, 0.25, 0.5, 4, 4, 1)
    assert s_a == pytest.approx(0.5625)


def test_atlas_sample_matches_per_splat_bitwise():
    rng = np.random.default_rng(43)
    sets = _random_sets(rng, 10, T=4)
    atlas_set = pack_atlases(sets, max_dim=8)  # forces 3 pages
    grid = np.linspace(0.0, 1.0, 33)
    s, t = np.meshgrid(grid, grid, indexing="xy")
    for k, ts in enumerate(sets):
        _, _, page = atlas_set.indirection.lookup(k)
        va = atlas_sample(atlas_set.family_a[page], atlas_set.indirection,
                          k, s, t)
        vb = atlas_sample(atlas_set.family_b[page], atlas_set.indirection,
                          k, s, t)
        assert np.array_equal(va[..., 0:3], bilinear_sample(ts.albedo, s, t))
        assert np.array_equal(va[..., 3],
                              bilinear_sample(ts.roughness, s, t)[..., 0])
        assert np.array_equal(vb[..., 0:2],
                              bilinear_sample(ts.tangent_normal, s, t))
        assert np.array_equal(vb[..., 2],
                              bilinear_sample(ts.metallic, s, t)[..., 0])


def test_atlas_sample_page_mismatch_raises():
    rng = np.random.default_rng(47)
    sets = _random_sets(rng, 10, T=4)
    atlas_set = pack_atlases(sets, max_dim=8)
    with pytest.raises(LookupError):
        atlas_sample(atlas_set.family_a[0], atlas_set.indirection,
                     9, 0.5, 0.5)  # splat 9 lives on page 2
    with pytest.raises(LookupError):
        atlas_set.indirection.lookup(10)
    with pytest.raises(LookupError):
        atlas_set.indirection.lookup(-1)


def test_indirection_validate_ranges():
    bad = IndirectionBuffer(np.array([[2, 0, 0]], dtype=np.int32),
                            charts_x=2, charts_y=2, pages=1)
    with pytest.raises(ValueError):
        bad.validate()
    bad = IndirectionBuffer(np.array([[0, 0, 1]], dtype=np.int32),
                            charts_x=2, charts_y=2, pages=1)
    with pytest.raises(ValueError):
        bad.validate()


def test_save_load_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(53)
    sets = _random_sets(rng, 6, T=4)
    atlas_set = pack_atlases(sets, max_dim=8)
    sidecar = save_atlases(atlas_set, tmp_path, stem="pages")
    back = load_atlases(sidecar)
    back.validate()
    assert back.resolution == atlas_set.resolution
    assert np.array_equal(back.indirection.entries,
                          atlas_set.indirection.entries)
    for a, b in zip(atlas_set.atlases, back.atlases):
        assert a.family == b.family and a.page_index == b.page_index
        assert np.array_equal(a.texels, b.texels)


def test_load_atlases_missing_sidecar(tmp_path):
    with pytest.raises(OSError):
        load_atlases(tmp_path / "nope.json")


def test_bench_sampling_smoke():
    scene = make_plane_scene(nx=2, ny=2, texture_res=4, seed=3)
    cams = camera_ring(2, width=24, height=24)
    out = bench_sampling(scene, cams, "atlas", frames=2, warmup=1)
    assert out["mode"] == "atlas"
    assert out["fps"] > 0 and out["fragments_per_frame"] > 0
    assert "ns_per_sample" in out
    with pytest.raises(ValueError):
        bench_sampling(scene, cams, "gpu")


def test_bench_matrix_smoke():
    scene = make_plane_scene(nx=2, ny=2, texture_res=4, seed=3)
    cams = camera_ring(2, width=24, height=24)
    out = bench_matrix(scene, cams, rounds=2)
    for mode in ("flat", "perprim", "atlas"):
        assert out[mode]["fps"] > 0
    assert out["ratios"]["atlas_vs_perprim"] == pytest.approx(
        out["atlas"]["fps"] / out["perprim"]["fps"])
