"""Deferred shading of blended splat attributes under image-based lighting.

Covered pixels de-premultiply the G-buffer by accumulated alpha, then

    diffuse  L_d = (albedo / pi) * (1 - metallic) * E(normal)
    specular L_s = (F0 * A + B) * (V * env(reflect, rough) + (1-V) * L_ind)
    color    = alpha * (L_d + L_s) + (1 - alpha) * background

with F0 = mix(0.04, albedo, metallic), (A, B) the split-sum LUT at
(clamped n.view, roughness), E the diffuse irradiance map, and V a binary
mesh occlusion query along the reflected ray (no gradient). Uncovered
pixels show the background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import BrdfLut, EnvironmentLight
from .rasterize import GBuffer, NUM_CHANNELS
from .splats import Camera
from .visibility import visibility

# Lower clamp on n.view for the LUT lookup; grazing rows of the table are
# noisy and the split-sum fit is not trusted below this.
COS_MIN = 1e-4
# Pixels with accumulated alpha at or below this hold no surface.
COVER_EPS = 1e-8


def reflect_dir(normal, omega_o):
    """Mirror omega_o about the (unit) normal: 2 (n.w) n - w."""
    normal = np.asarray(normal, dtype=np.float64)
    omega_o = np.asarray(omega_o, dtype=np.float64)
    d = np.sum(normal * omega_o, axis=-1, keepdims=True)
    return 2.0 * d * normal - omega_o


@dataclass
class ShadeResult:
    """Linear-radiance outputs; diffuse/specular are coverage-weighted."""

    color: np.ndarray     # (H, W, 3)
    diffuse: np.ndarray   # (H, W, 3) alpha * L_d
    specular: np.ndarray  # (H, W, 3) alpha * L_s
    cache: tuple = None


def _shade_core(albedo, metallic, roughness, normal_unit, indirect, omega_o,
                vis, env: EnvironmentLight, lut: BrdfLut):
    """Shared shading math on flat (n, ...) attribute rows."""
    cos_raw = np.sum(normal_unit * omega_o, axis=-1)
    cos_cl = np.clip(cos_raw, COS_MIN, 1.0)
    w_r = 2.0 * cos_raw[:, None] * normal_unit - omega_o

    f0 = 0.04 * (1.0 - metallic[:, None]) + albedo * metallic[:, None]
    lut_a, lut_b, lut_cache = lut.sample(cos_cl, roughness)
    spec_env, spec_cache = env.sample_specular(w_r, roughness)
    irr, diff_cache = env.sample_diffuse(normal_unit)

    spec_in = vis[:, None] * spec_env + (1.0 - vis[:, None]) * indirect
    l_s = (f0 * lut_a[:, None] + lut_b[:, None]) * spec_in
    l_d = (albedo / np.pi) * (1.0 - metallic[:, None]) * irr
    cache = (albedo, metallic, roughness, normal_unit, indirect, omega_o,
             vis, cos_raw, f0, lut_a, lut_b, lut_cache, spec_cache,
             irr, diff_cache, spec_in)
    return l_d, l_s, cache


def _shade_core_backward(cache, dl_d, dl_s, env: EnvironmentLight,
                         lut: BrdfLut, env_grads):
    """Adjoint of _shade_core; scatters environment gradients in place.

    Returns gradients on (albedo, metallic, roughness, normal_unit,
    indirect). omega_o and visibility carry no gradient.
    """
    (albedo, metallic, roughness, normal_unit, indirect, omega_o, vis,
     cos_raw, f0, lut_a, lut_b, lut_cache, spec_cache, irr, diff_cache,
     spec_in) = cache

    m_e = metallic[:, None]
    dalbedo = dl_d * (1.0 - m_e) * irr / np.pi
    dmetal = -np.sum(dl_d * albedo * irr, axis=-1) / np.pi
    dirr = dl_d * albedo * (1.0 - m_e) / np.pi
    dn_diff = env.sample_diffuse_grad(diff_cache, dirr, env_grads)

    df0 = dl_s * lut_a[:, None] * spec_in
    dlut_a = np.sum(dl_s * f0 * spec_in, axis=-1)
    dlut_b = np.sum(dl_s * spec_in, axis=-1)
    dspec_in = dl_s * (f0 * lut_a[:, None] + lut_b[:, None])
    dspec_env = vis[:, None] * dspec_in
    dindirect = (1.0 - vis[:, None]) * dspec_in
    dalbedo += df0 * m_e
    dmetal += np.sum(df0 * (albedo - 0.04), axis=-1)

    dcos_cl, drough_lut = lut.sample_grad(lut_cache, dlut_a, dlut_b)
    dw_r, drough_env = env.sample_specular_grad(spec_cache, dspec_env,
                                                env_grads)
    drough = drough_lut + drough_env

    # w_r = 2 cos_raw n - omega_o
    dn = 2.0 * np.sum(dw_r * normal_unit, axis=-1, keepdims=True) * omega_o \
        + 2.0 * cos_raw[:, None] * dw_r
    dcos_raw = np.where((cos_raw > COS_MIN) & (cos_raw < 1.0), dcos_cl, 0.0)
    dn += dcos_raw[:, None] * omega_o
    dn += dn_diff
    return dalbedo, dmetal, drough, dn, dindirect


def shade_pixel(albedo, metallic, roughness, normal, indirect, omega_o,
                vis, env: EnvironmentLight, lut: BrdfLut):
    """Shade one surface sample; returns (l_diffuse, l_specular)."""
    l_d, l_s, _ = _shade_core(
        np.asarray(albedo, np.float64).reshape(1, 3),
        np.asarray([metallic], np.float64),
        np.asarray([roughness], np.float64),
        np.asarray(normal, np.float64).reshape(1, 3),
        np.asarray(indirect, np.float64).reshape(1, 3),
        np.asarray(omega_o, np.float64).reshape(1, 3),
        np.asarray([vis], np.float64), env, lut)
    return l_d[0], l_s[0]


def shade_gbuffer(gbuf: GBuffer, camera: Camera, env: EnvironmentLight,
                  lut: BrdfLut, mesh=None, background=None) -> ShadeResult:
    """Shade a G-buffer into final linear radiance."""
    H, W = gbuf.data.shape[:2]
    bg = np.zeros(3) if background is None else \
        np.asarray(background, dtype=np.float64)
    color = np.empty((H, W, 3))
    color[:] = bg
    diffuse = np.zeros((H, W, 3))
    specular = np.zeros((H, W, 3))

    a_img = gbuf.alpha
    cov = np.flatnonzero(a_img.ravel() > COVER_EPS)
    if cov.size == 0:
        return ShadeResult(color, diffuse, specular,
                           cache=(cov, None, None, (H, W), bg))

    flat = gbuf.data.reshape(-1, NUM_CHANNELS)[cov]
    a = flat[:, 12]
    albedo = flat[:, 0:3] / a[:, None]
    metallic = flat[:, 3] / a
    roughness = flat[:, 4] / a
    indirect = flat[:, 8:11] / a[:, None]

    xs, ys = camera.pixel_plane_coords()
    px = cov % W
    py = cov // W
    x = xs[px]
    y = ys[py]
    omega_o = -camera.ray_dirs_world(x, y)

    nb = flat[:, 5:8]
    nn = np.linalg.norm(nb, axis=-1)
    degen = nn < 1e-12
    n_unit = np.where(degen[:, None], omega_o,
                      nb / np.maximum(nn, 1e-30)[:, None])

    if mesh is not None:
        zbar = flat[:, 11] / a
        p_view = np.stack([x * zbar, y * zbar, zbar], axis=1)
        p_world = (p_view - camera.world_to_view[:3, 3]) @ camera.rotation
        cos_raw = np.sum(n_unit * omega_o, axis=-1)
        w_r = 2.0 * cos_raw[:, None] * n_unit - omega_o
        vis = visibility(p_world, w_r, mesh)
    else:
        vis = np.ones(cov.size)

    l_d, l_s, core_cache = _shade_core(albedo, metallic, roughness, n_unit,
                                       indirect, omega_o, vis, env, lut)
    l_o = l_d + l_s
    cflat = color.reshape(-1, 3)
    cflat[cov] = a[:, None] * l_o + (1.0 - a)[:, None] * bg
    diffuse.reshape(-1, 3)[cov] = a[:, None] * l_d
    specular.reshape(-1, 3)[cov] = a[:, None] * l_s

    cache = (cov, core_cache, (a, nb, nn, degen, l_o, l_d, l_s),
             (H, W), bg)
    return ShadeResult(color, diffuse, specular, cache=cache)


def shade_backward(result: ShadeResult, camera: Camera,
                   env: EnvironmentLight, lut: BrdfLut, dcolor):
    """Backpropagate a gradient on ShadeResult.color.

    Returns:
        (dgbuf (H, W, NUM_CHANNELS), EnvGrads)
    """
    cov, core_cache, extras, (H, W), bg = result.cache
    env_grads = env.zero_grads()
    dgbuf = np.zeros((H, W, NUM_CHANNELS))
    if cov.size == 0:
        return dgbuf, env_grads
    a, nb, nn, degen, l_o, l_d, l_s = extras
    dcov = np.asarray(dcolor, dtype=np.float64).reshape(-1, 3)[cov]

    dl_o = a[:, None] * dcov
    da = np.sum(dcov * (l_o - bg), axis=-1)
    dalbedo, dmetal, drough, dn, dindirect = _shade_core_backward(
        core_cache, dl_o, dl_o, env, lut, env_grads)

    # n_unit = nb / |nb| (degenerate pixels carry no normal gradient).
    nsafe = np.maximum(nn, 1e-30)[:, None]
    n_unit = nb / nsafe
    dnb = (dn - n_unit * np.sum(n_unit * dn, axis=-1, keepdims=True)) / nsafe
    dnb[degen] = 0.0

    # De-premultiplied attributes q = b / a give db = dq / a and
    # da -= dq . q / a per channel group.
    albedo, metallic, roughness, indirect = (core_cache[0], core_cache[1],
                                             core_cache[2], core_cache[4])
    flat = dgbuf.reshape(-1, NUM_CHANNELS)
    a_e = a[:, None]
    flat[cov, 0:3] = dalbedo / a_e
    da -= np.sum(dalbedo * albedo, axis=-1) / a
    flat[cov, 3] = dmetal / a
    da -= dmetal * metallic / a
    flat[cov, 4] = drough / a
    da -= drough * roughness / a
    flat[cov, 5:8] = dnb
    flat[cov, 8:11] = dindirect / a_e
    da -= np.sum(dindirect * indirect, axis=-1) / a
    flat[cov, 12] = da
    return dgbuf, env_grads
