"""Fitting losses and image metrics, all with analytic gradients.

Photometric supervision happens in display space: linear radiance passes
through a gamma 2.2 transform (with a linear toe near zero, so the slope
stays bounded) and is compared against the target with

    L_image = (1 - w) * L1 + w * (1 - SSIM) / 2.

SSIM uses the standard 11-tap Gaussian window (sigma 1.5, zero padding) and
constants C1 = 0.01^2, C2 = 0.03^2; its gradient is derived in closed form
via the blurred-moment chain (the window is symmetric, so the blur operator
is self-adjoint). Geometric regularizers compare rendered normals against
normals reconstructed from rendered depth and penalize normal variation
where the target image is flat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

DISPLAY_GAMMA = 2.2
# Below this radiance the transform is linear (slope-matched), keeping the
# gradient finite at zero.
DISPLAY_TOE = 1e-4
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


@dataclass
class LossWeights:
    dssim: float = 0.2
    normal: float = 0.05
    smooth: float = 0.02


def linear_to_display(x) -> np.ndarray:
    """Gamma-encode linear radiance; no upper clamp."""
    x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    p = 1.0 / DISPLAY_GAMMA
    toe_slope = DISPLAY_TOE ** (p - 1.0)
    return np.where(x >= DISPLAY_TOE, np.power(np.maximum(x, DISPLAY_TOE), p),
                    toe_slope * x)


def linear_to_display_grad(x, upstream) -> np.ndarray:
    """Adjoint of linear_to_display."""
    x = np.asarray(x, dtype=np.float64)
    p = 1.0 / DISPLAY_GAMMA
    toe_slope = DISPLAY_TOE ** (p - 1.0)
    slope = np.where(x >= DISPLAY_TOE,
                     p * np.power(np.maximum(x, DISPLAY_TOE), p - 1.0),
                     toe_slope)
    slope = np.where(x < 0.0, 0.0, slope)
    return np.asarray(upstream, dtype=np.float64) * slope


def _gaussian_window(radius: int = 5, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _blur(img) -> np.ndarray:
    """Separable Gaussian blur with zero padding, same size."""
    out = correlate1d(np.asarray(img, dtype=np.float64), _WINDOW, axis=0,
                      mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def ssim(a, b, return_parts: bool = False):
    """Mean SSIM between images in display space.

    Args:
        a, b: (H, W) or (H, W, C) arrays.
    Returns:
        scalar, or (scalar, parts) when return_parts (for the backward).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a = _blur(a)
    mu_b = _blur(b)
    saa = _blur(a * a) - mu_a * mu_a
    sbb = _blur(b * b) - mu_b * mu_b
    sab = _blur(a * b) - mu_a * mu_b
    p = 2.0 * mu_a * mu_b + SSIM_C1
    q = 2.0 * sab + SSIM_C2
    r = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    s = saa + sbb + SSIM_C2
    m = (p * q) / (r * s)
    value = float(m.mean())
    if return_parts:
        return value, (a, b, mu_a, mu_b, p, q, r, s, m)
    return value


def ssim_backward(parts, upstream: float) -> np.ndarray:
    """Gradient of mean SSIM w.r.t. the first image."""
    a, b, mu_a, mu_b, p, q, r, s, m = parts
    g = upstream / m.size
    rs = r * s
    g_p = g * q / rs
    g_q = g * p / rs
    g_r = -g * m / r
    g_s = -g * m / s

    g_sab = 2.0 * g_q
    g_saa = g_s
    g_mu_a = 2.0 * mu_b * g_p + 2.0 * mu_a * g_r \
        - mu_b * g_sab - 2.0 * mu_a * g_saa
    return _blur(g_mu_a) + 2.0 * a * _blur(g_saa) + b * _blur(g_sab)


def image_loss(pred_display, target_display, dssim_weight: float = 0.2):
    """(1-w) L1 + w (1-SSIM)/2 in display space.

    Returns:
        (loss, dloss/dpred)
    """
    pred = np.asarray(pred_display, dtype=np.float64)
    target = np.asarray(target_display, dtype=np.float64)
    diff = pred - target
    l1 = float(np.abs(diff).mean())
    mssim, parts = ssim(pred, target, return_parts=True)
    loss = (1.0 - dssim_weight) * l1 + dssim_weight * 0.5 * (1.0 - mssim)
    dpred = (1.0 - dssim_weight) * np.sign(diff) / diff.size \
        + ssim_backward(parts, -0.5 * dssim_weight)
    return loss, dpred


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio on [0, 1] images, capped at 99 dB."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def depth_to_normal(depth, camera, cover):
    """Normals from forward differences of backprojected view-space points.

    Args:
        depth: (H, W) coverage-normalized view depth.
        cover: (H, W) bool, pixels with a surface.
    Returns:
        (normals (H, W, 3) world space, valid (H, W) bool). A pixel is
        valid when itself and its +x / +y neighbors are covered. Normals
        are oriented to face the camera.
    """
    H, W = depth.shape
    xs, ys = camera.pixel_plane_coords()
    px = np.empty((H, W, 3))
    px[..., 0] = xs[None, :] * depth
    px[..., 1] = ys[:, None] * depth
    px[..., 2] = depth

    dx = px[:, 1:, :] - px[:, :-1, :]
    dy = px[1:, :, :] - px[:-1, :, :]
    n_view = np.zeros((H, W, 3))
    n_view[:-1, :-1] = np.cross(dx[:-1, :, :], dy[:, :-1, :])

    valid = np.zeros((H, W), dtype=bool)
    valid[:-1, :-1] = cover[:-1, :-1] & cover[:-1, 1:] & cover[1:, :-1]

    # Flip toward the camera: the view ray to the pixel is px itself.
    flip = np.sum(n_view * px, axis=-1) > 0.0
    n_view = np.where(flip[..., None], -n_view, n_view)
    mag = np.linalg.norm(n_view, axis=-1, keepdims=True)
    ok = valid & (mag[..., 0] > 1e-12)
    unit_v = np.where(ok[..., None], n_view / np.maximum(mag, 1e-30), 0.0)
    n_world = unit_v @ camera.rotation  # R^T per row
    cache = (depth, px, n_view, flip, mag, ok, camera)
    return n_world, ok, cache


def depth_to_normal_backward(cache, upstream):
    """Adjoint of depth_to_normal w.r.t. the depth image."""
    depth, px, n_view, flip, mag, ok, camera = cache
    H, W = depth.shape
    up_v = np.asarray(upstream, dtype=np.float64) @ camera.rotation.T
    up_v[~ok] = 0.0

    unit = np.where(ok[..., None], n_view / np.maximum(mag, 1e-30), 0.0)
    dn_v = np.where(
        ok[..., None],
        (up_v - unit * np.sum(unit * up_v, axis=-1, keepdims=True))
        / np.maximum(mag, 1e-30),
        0.0)
    dn_v = np.where(flip[..., None], -dn_v, dn_v)

    dx = _dx_block(px)
    dy = _dy_block(px)
    g = dn_v[:-1, :-1]
    # n_view[:-1,:-1] = cross(dx[:-1,:], dy[:,:-1]); cross adjoints.
    ddx = np.zeros((H, W - 1, 3))
    ddy = np.zeros((H - 1, W, 3))
    ddx[:-1, :, :] = np.cross(dy[:, :-1, :], g)
    ddy[:, :-1, :] = np.cross(g, dx[:-1, :, :])
    dpx = np.zeros_like(px)
    dpx[:, 1:, :] += ddx
    dpx[:, :-1, :] -= ddx
    dpx[1:, :, :] += ddy
    dpx[:-1, :, :] -= ddy

    xs, ys = camera.pixel_plane_coords()
    ddepth = dpx[..., 0] * xs[None, :] + dpx[..., 1] * ys[:, None] \
        + dpx[..., 2]
    return ddepth


def _dx_block(px):
    return px[:, 1:, :] - px[:, :-1, :]


def _dy_block(px):
    return px[1:, :, :] - px[:-1, :, :]


def normal_consistency_loss(n_render, n_ref, valid):
    """Mean (1 - n_render . n_ref) over valid pixels.

    Returns:
        (loss, d/dn_render, d/dn_ref)
    """
    valid = np.asarray(valid, dtype=bool)
    n = max(int(valid.sum()), 1)
    dots = np.sum(n_render * n_ref, axis=-1)
    loss = float(np.where(valid, 1.0 - dots, 0.0).sum() / n)
    scale = np.where(valid, -1.0 / n, 0.0)[..., None]
    return loss, scale * n_ref, scale * n_render


def smoothness_loss(n_img, target_display, valid):
    """Edge-aware normal smoothness.

    Penalizes mean ||forward-difference of n|| weighted by
    exp(-||forward-difference of target||) where both neighbors are valid.

    Returns:
        (loss, d/dn_img)
    """
    valid = np.asarray(valid, dtype=bool)
    tgt = np.asarray(target_display, dtype=np.float64)
    dx = n_img[:, 1:, :] - n_img[:, :-1, :]
    dy = n_img[1:, :, :] - n_img[:-1, :, :]
    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]

    tx = np.linalg.norm(tgt[:, 1:] - tgt[:, :-1], axis=-1)
    ty = np.linalg.norm(tgt[1:, :] - tgt[:-1, :], axis=-1)
    wx = np.exp(-tx) * vx
    wy = np.exp(-ty) * vy

    mx = np.linalg.norm(dx, axis=-1)
    my = np.linalg.norm(dy, axis=-1)
    count = max(int(vx.sum() + vy.sum()), 1)
    loss = float((wx * mx).sum() / count + (wy * my).sum() / count)

    dn = np.zeros_like(n_img)
    # d||v|| / dv = v / ||v||, zero at v = 0.
    gx = np.where((mx > 1e-12) & vx, wx / np.maximum(mx, 1e-30), 0.0)[..., None] \
        * dx / count
    gy = np.where((my > 1e-12) & vy, wy / np.maximum(my, 1e-30), 0.0)[..., None] \
        * dy / count
    dn[:, 1:, :] += gx
    dn[:, :-1, :] -= gx
    dn[1:, :, :] += gy
    dn[:-1, :, :] -= gy
    return loss, dn
