"""Deferred shading tests: formula wiring, limit cases, adjoint checks."""

import numpy as np
import pytest

from texsplat.environment import EnvironmentLight
from texsplat.rasterize import NUM_CHANNELS, GBuffer, render_forward
from texsplat.scene import Scene
from texsplat.shading import (COS_MIN, reflect_dir, shade_backward,
                              shade_gbuffer, shade_pixel)
from texsplat.splats import Camera
from texsplat.textures import MaterialTextureSet, TextureConfig
from texsplat.visibility import VisibilityMesh, make_box_mesh


def _facing_splat(albedo=(0.8, 0.2, 0.1), roughness=0.5, metallic=0.25,
                  opacity=0.6, sh0=0.5, tilt_deg=0.0):
    """One splat at the origin whose normal faces the camera placed on
    the +z side, optionally tilted about the x axis."""
    b = np.deg2rad(tilt_deg)
    return Scene(
        positions=np.zeros((1, 3)),
        tangent_u=np.array([[1.0, 0.0, 0.0]]),
        tangent_v=np.array([[0.0, np.cos(b), np.sin(b)]]),
        scales=np.full((1, 2), 0.8),
        opacities=np.array([opacity]),
        sh=np.full((1, 1, 3), sh0),
        sh_degree=0,
        textures=[MaterialTextureSet.constant(albedo, roughness, metallic,
                                              resolution=2)],
        texture_config=TextureConfig(resolution=2),
    )


def _front_camera():
    # On the normal side of the splat; the center ray hits head-on.
    return Camera.look_at((0.0, 0.0, 2.0), (0.0, 0.0, -1.0),
                          width=33, height=33, fov_x_deg=60.0)


def _random_env(rng, height=8, levels=3):
    env = EnvironmentLight.constant(0.3, height=height, levels=levels)
    for mip in env.spec_mips:
        mip[:] = rng.uniform(0.05, 1.0, mip.shape).astype(np.float32)
    env.diffuse[:] = rng.uniform(0.05, 1.0, env.diffuse.shape)
    return env


def _omega_o(camera, px, py):
    xs, ys = camera.pixel_plane_coords()
    return -camera.ray_dirs_world(np.array([xs[px]]), np.array([ys[py]]))[0]


def test_reflect_dir_hand_values():
    n = np.array([0.0, 0.0, 1.0])
    assert np.allclose(reflect_dir(n, n), n, atol=1e-15)
    w = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
    r = reflect_dir(n, w)
    assert np.allclose(r, [-w[0], 0.0, w[2]], atol=1e-15)
    # Batched rows reflect independently.
    batch = reflect_dir(np.tile(n, (2, 1)), np.stack([n, w]))
    assert batch.shape == (2, 3)
    assert np.allclose(batch[1], r, atol=1e-15)


def test_shade_pixel_composition(lut, rng):
    """shade_pixel must equal the documented formula assembled from the
    public LUT / environment sampling calls."""
    env = _random_env(rng)
    for vis in (1.0, 0.0, 0.5):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        w = rng.normal(size=3)
        w /= np.linalg.norm(w)
        albedo = rng.uniform(0.1, 0.9, 3)
        metal = rng.uniform(0.0, 1.0)
        rough = rng.uniform(0.05, 0.95)
        ind = rng.uniform(0.0, 0.5, 3)

        l_d, l_s = shade_pixel(albedo, metal, rough, n, ind, w, vis,
                               env, lut)

        cos = np.clip(np.dot(n, w), COS_MIN, 1.0)
        a, b, _ = lut.sample(np.array([cos]), np.array([rough]))
        w_r = 2.0 * np.dot(n, w) * n - w
        spec_env, _ = env.sample_specular(w_r[None], np.array([rough]))
        irr, _ = env.sample_diffuse(n[None])
        f0 = 0.04 * (1.0 - metal) + albedo * metal
        spec_in = vis * spec_env[0] + (1.0 - vis) * ind
        assert np.allclose(l_s, (f0 * a[0] + b[0]) * spec_in, atol=1e-14)
        assert np.allclose(l_d, albedo / np.pi * (1.0 - metal) * irr[0],
                           atol=1e-14)


def test_back_facing_normal_clamps_cos(lut, rng):
    # n.view < 0 clamps to COS_MIN instead of sampling outside the LUT.
    env = _random_env(rng)
    n = np.array([0.0, 0.0, 1.0])
    w = np.array([0.0, 0.0, -1.0])
    l_d, l_s = shade_pixel((0.5, 0.5, 0.5), 0.3, 0.4, n, (0.0, 0.0, 0.0),
                           w, 1.0, env, lut)
    assert np.all(np.isfinite(l_d)) and np.all(np.isfinite(l_s))
    a, b, _ = lut.sample(np.array([COS_MIN]), np.array([0.4]))
    w_r = 2.0 * np.dot(n, w) * n - w
    spec_env, _ = env.sample_specular(w_r[None], np.array([0.4]))
    f0 = 0.04 * (1.0 - 0.3) + 0.5 * 0.3
    assert np.allclose(l_s, (f0 * a[0] + b[0]) * spec_env[0], atol=1e-14)


def test_mirror_limit_reproduces_constant_env(lut):
    # Unit-albedo metal at roughness 0 gives F0 = 1, so the specular lobe
    # is (A + B) * env(reflect) and A + B is within a few percent of 1.
    env = EnvironmentLight.constant(0.7, height=32, levels=4)
    l_d, l_s = shade_pixel((1.0, 1.0, 1.0), 1.0, 0.0, (0.0, 0.0, 1.0),
                           (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 1.0, env, lut)
    assert np.allclose(l_s, 0.7, rtol=3e-2)
    # Fully metallic kills the diffuse term exactly.
    assert np.array_equal(l_d, np.zeros(3))


def test_zero_albedo_metal_goes_dark(lut):
    # With F0 = albedo * metallic, a black metal mirror reflects almost
    # nothing: only the B fit term survives.
    env = EnvironmentLight.constant(0.7, height=32, levels=4)
    _, l_s = shade_pixel((0.0, 0.0, 0.0), 1.0, 0.0, (0.0, 0.0, 1.0),
                         (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 1.0, env, lut)
    assert np.all(l_s < 2e-2 * 0.7)


def test_constant_env_diffuse_identity(lut):
    # Unit-albedo dielectric under constant radiance L0: irradiance is
    # pi * L0 so L_d = L0 up to the equirect quadrature error (<1%).
    env = EnvironmentLight.constant(0.4, height=64, levels=4)
    for n in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0],
              np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)):
        l_d, _ = shade_pixel((1.0, 1.0, 1.0), 0.0, 1.0, n,
                             (0.0, 0.0, 0.0), n, 1.0, env, lut)
        assert np.allclose(l_d, 0.4, rtol=1e-2)
    # Albedo scales the diffuse term linearly.
    l_half, _ = shade_pixel((0.5, 0.5, 0.5), 0.0, 1.0, (0.0, 0.0, 1.0),
                            (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 1.0, env, lut)
    assert np.allclose(l_half, 0.2, rtol=1e-2)


def test_occluded_specular_uses_indirect(lut):
    env = EnvironmentLight.constant(0.7, height=32, levels=4)
    ind = np.array([0.05, 0.10, 0.15])
    _, l_s = shade_pixel((0.6, 0.6, 0.6), 1.0, 0.2, (0.0, 0.0, 1.0),
                         ind, (0.0, 0.0, 1.0), 0.0, env, lut)
    a, b, _ = lut.sample(np.array([1.0]), np.array([0.2]))
    assert np.allclose(l_s, (0.6 * a[0] + b[0]) * ind, atol=1e-14)
    # Zero indirect radiance means a fully occluded pixel goes black.
    _, dark = shade_pixel((0.6, 0.6, 0.6), 1.0, 0.2, (0.0, 0.0, 1.0),
                          (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.0, env, lut)
    assert np.array_equal(dark, np.zeros(3))


def test_shade_gbuffer_matches_pixel_oracle(lut, rng):
    scene = _facing_splat()
    cam = _front_camera()
    gbuf = render_forward(scene, cam)
    env = _random_env(rng)
    bg = np.array([0.1, 0.2, 0.3])
    res = shade_gbuffer(gbuf, cam, env, lut, background=bg)

    for px, py in ((16, 16), (20, 12)):
        a = gbuf.alpha[py, px]
        assert a > 0.0
        albedo = gbuf.albedo[py, px] / a
        metal = gbuf.metallic[py, px] / a
        rough = gbuf.roughness[py, px] / a
        ind = gbuf.indirect[py, px] / a
        n = gbuf.normal[py, px]
        n = n / np.linalg.norm(n)
        l_d, l_s = shade_pixel(albedo, metal, rough, n, ind,
                               _omega_o(cam, px, py), 1.0, env, lut)
        assert np.allclose(res.color[py, px],
                           a * (l_d + l_s) + (1.0 - a) * bg, atol=1e-12)
        assert np.allclose(res.diffuse[py, px], a * l_d, atol=1e-12)
        assert np.allclose(res.specular[py, px], a * l_s, atol=1e-12)


def test_shade_gbuffer_uncovered_pixels_show_background(lut, rng):
    scene = _facing_splat()
    scene.scales[:] = 0.05
    cam = _front_camera()
    gbuf = render_forward(scene, cam)
    assert gbuf.alpha[0, 0] == 0.0
    env = _random_env(rng)
    bg = np.array([0.25, 0.5, 0.75])
    res = shade_gbuffer(gbuf, cam, env, lut, background=bg)
    assert np.array_equal(res.color[0, 0], bg)
    assert np.array_equal(res.diffuse[0, 0], np.zeros(3))
    assert np.array_equal(res.specular[0, 0], np.zeros(3))
    # Default background is black.
    res0 = shade_gbuffer(gbuf, cam, env, lut)
    assert np.array_equal(res0.color[0, 0], np.zeros(3))


def test_shade_gbuffer_empty_coverage(lut, rng):
    cam = _front_camera()
    gbuf = GBuffer(np.zeros((33, 33, NUM_CHANNELS)))
    env = _random_env(rng)
    res = shade_gbuffer(gbuf, cam, env, lut, background=(0.2, 0.2, 0.2))
    assert np.array_equal(res.color, np.full((33, 33, 3), 0.2))
    dgbuf, env_grads = shade_backward(res, cam, env, lut,
                                      np.ones((33, 33, 3)))
    assert np.array_equal(dgbuf, np.zeros_like(gbuf.data))
    assert all(np.all(g == 0.0) for g in env_grads.spec_mips)
    assert np.all(env_grads.diffuse == 0.0)


def test_degenerate_normal_falls_back_to_view(lut, rng):
    # A covered pixel with a zero normal shades as if facing the camera
    # and contributes no normal gradient.
    cam = _front_camera()
    data = np.zeros((33, 33, NUM_CHANNELS))
    data[5, 7, 0:3] = [0.4, 0.3, 0.2]
    data[5, 7, 3] = 0.1
    data[5, 7, 4] = 0.6
    data[5, 7, 8:11] = [0.02, 0.03, 0.04]
    data[5, 7, 12] = 1.0
    env = _random_env(rng)
    res = shade_gbuffer(GBuffer(data), cam, env, lut)
    w = _omega_o(cam, 7, 5)
    l_d, l_s = shade_pixel([0.4, 0.3, 0.2], 0.1, 0.6, w,
                           [0.02, 0.03, 0.04], w, 1.0, env, lut)
    assert np.allclose(res.color[5, 7], l_d + l_s, atol=1e-12)
    dgbuf, _ = shade_backward(res, cam, env, lut, np.ones((33, 33, 3)))
    assert np.array_equal(dgbuf[5, 7, 5:8], np.zeros(3))
    assert np.any(dgbuf[5, 7, 0:3] != 0.0)


def test_mesh_occlusion_switches_to_indirect(lut):
    scene = _facing_splat(sh0=0.5)
    cam = _front_camera()
    gbuf = render_forward(scene, cam)
    env = EnvironmentLight.constant(0.7, height=32, levels=4)
    # A closed box around everything blocks every reflected ray.
    box = VisibilityMesh(make_box_mesh((0.0, 0.0, 0.0), 10.0))
    res_open = shade_gbuffer(gbuf, cam, env, lut)
    res_box = shade_gbuffer(gbuf, cam, env, lut, mesh=box)

    px = py = 16
    a = gbuf.alpha[py, px]
    ind = gbuf.indirect[py, px] / a
    albedo = gbuf.albedo[py, px] / a
    metal = gbuf.metallic[py, px] / a
    rough = gbuf.roughness[py, px] / a
    n = gbuf.normal[py, px] / np.linalg.norm(gbuf.normal[py, px])
    l_d, l_s = shade_pixel(albedo, metal, rough, n, ind,
                           _omega_o(cam, px, py), 0.0, env, lut)
    assert np.allclose(res_box.specular[py, px], a * l_s, atol=1e-12)
    # Diffuse is unaffected by the occlusion query.
    assert np.array_equal(res_box.diffuse, res_open.diffuse)
    assert not np.allclose(res_box.specular[py, px],
                           res_open.specular[py, px], atol=1e-4)


def test_shade_backward_finite_difference(lut, rng):
    # Roughness 0.37 keeps the lookup off the integer mip boundary where
    # the piecewise-linear level blend has a derivative kink; the tilt
    # keeps the normal away from the equirect pole where the azimuth of
    # the irradiance lookup is discontinuous.
    scene = _facing_splat(roughness=0.37, tilt_deg=15.0)
    cam = _front_camera()
    gbuf = render_forward(scene, cam)
    env = _random_env(rng)
    bg = np.array([0.1, 0.2, 0.3])
    weights = rng.uniform(0.5, 1.5, (33, 33, 3))

    def loss(data, e):
        res = shade_gbuffer(GBuffer(data), cam, e, lut, background=bg)
        return float(np.sum(weights * res.color))

    res = shade_gbuffer(gbuf, cam, env, lut, background=bg)
    dgbuf, env_grads = shade_backward(res, cam, env, lut, weights)

    # Covered-pixel gbuffer channels, off the optical axis so the clamped
    # n.view gradient is live.
    py, px = 12, 20
    for ch in (0, 3, 4, 5, 6, 12):
        h = 1e-6
        up = gbuf.data.copy()
        dn = gbuf.data.copy()
        up[py, px, ch] += h
        dn[py, px, ch] -= h
        fd = (loss(up, env) - loss(dn, env)) / (2.0 * h)
        an = dgbuf[py, px, ch]
        assert an == pytest.approx(fd, rel=1e-4, abs=1e-7), f"channel {ch}"
    # Indirect channels only matter under occlusion; unoccluded gradient
    # is exactly zero.
    assert np.array_equal(dgbuf[py, px, 8:11], np.zeros(3))

    # Environment texels accumulate through both the diffuse irradiance
    # and the prefiltered specular lookups (float32 maps: larger step).
    j, i, c = np.unravel_index(np.argmax(np.abs(env_grads.diffuse)),
                               env_grads.diffuse.shape)
    h = 1e-3
    up_env = env.copy()
    up_env.diffuse[j, i, c] += h
    dn_env = env.copy()
    dn_env.diffuse[j, i, c] -= h
    fd = (loss(gbuf.data, up_env) - loss(gbuf.data, dn_env)) / (2.0 * h)
    assert env_grads.diffuse[j, i, c] == pytest.approx(fd, rel=2e-3)

    lv = int(np.argmax([np.abs(g).max() for g in env_grads.spec_mips]))
    j, i, c = np.unravel_index(np.argmax(np.abs(env_grads.spec_mips[lv])),
                               env_grads.spec_mips[lv].shape)
    up_env = env.copy()
    up_env.spec_mips[lv][j, i, c] += h
    dn_env = env.copy()
    dn_env.spec_mips[lv][j, i, c] -= h
    fd = (loss(gbuf.data, up_env) - loss(gbuf.data, dn_env)) / (2.0 * h)
    assert env_grads.spec_mips[lv][j, i, c] == pytest.approx(fd, rel=2e-3)


def test_shade_backward_alpha_gradient_sign(lut):
    # Raising alpha on a dark-surface pixel against a bright background
    # must lower the color, so the alpha gradient is negative.
    scene = _facing_splat(albedo=(0.01, 0.01, 0.01), sh0=0.0)
    cam = _front_camera()
    gbuf = render_forward(scene, cam)
    env = EnvironmentLight.constant(0.05, height=16, levels=3)
    bg = np.array([5.0, 5.0, 5.0])
    res = shade_gbuffer(gbuf, cam, env, lut, background=bg)
    dgbuf, _ = shade_backward(res, cam, env, lut, np.ones((33, 33, 3)))
    assert dgbuf[16, 16, 12] < 0.0
