"""Tile-based splat rasterization with exact reverse-mode gradients.

Forward pass: splats are depth-sorted (front to back, splat id breaks
ties), conservatively binned into fixed 32-pixel tiles, and composited per
tile with per-pixel transmittance. Twelve attribute channels plus coverage
blend with weights alpha_i * T_i:

    0:3 albedo   3 metallic   4 roughness   5:8 world normal
    8:11 indirect radiance    11 view depth 12 accumulated alpha

Tiles own disjoint pixels, so the forward pass parallelizes freely and is
bitwise independent of the thread count. Saturated tiles (max transmittance
below TRANSMIT_EPS) stop consuming splats early; fragments are skipped per
pixel once their transmittance is spent.

Backward pass: a per-tile tape records each composited fragment set. The
adjoint walks tapes back to front, using the suffix identity

    dL/dalpha_i = sum_ch g_ch * (x_i,ch * T_i - S_i,ch / (1 - alpha_i)),
    S_i = sum_{j>i} x_j alpha_j T_j,

then chains through texture fetch, normal decode/rotation, the Gaussian
falloff and the closed-form intersection into splat parameters. Tiles are
reduced in fixed tile order, so gradients are deterministic too.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import sh as shlib
from .splats import (ALPHA_CUTOFF, DENOM_EPS, Camera, PROJ_FLATTEN,
                     build_homography_batch, fold_matrix_backward)
from .textures import (TextureConfig, decode_tangent_normal,
                       decode_tangent_normal_grad, lerp_corners, texel_coords,
                       uv_to_st, uv_to_st_grad)

TILE = 32
# Pixels with transmittance at or below this are saturated; later fragments
# are invisible there.
TRANSMIT_EPS = 1e-4
# Bounding rects extend this many sigma from the center: covers every
# fragment that can reach ALPHA_CUTOFF (exp(-3.33^2/2) * 1 < 1/255).
RECT_SIGMA = 3.4
RECT_PAD_PX = 2
# How often the per-tile saturation early-out is evaluated.
SAT_CHECK_EVERY = 16

NUM_CHANNELS = 13
CH_ALBEDO = slice(0, 3)
CH_METALLIC = 3
CH_ROUGHNESS = 4
CH_NORMAL = slice(5, 8)
CH_INDIRECT = slice(8, 11)
CH_DEPTH = 11
CH_ALPHA = 12


@dataclass
class GBuffer:
    """Blended attribute buffers; all channels are coverage-premultiplied."""

    data: np.ndarray  # (H, W, NUM_CHANNELS)
    fragment_count: int = 0

    @property
    def albedo(self):
        return self.data[..., CH_ALBEDO]

    @property
    def metallic(self):
        return self.data[..., CH_METALLIC]

    @property
    def roughness(self):
        return self.data[..., CH_ROUGHNESS]

    @property
    def normal(self):
        return self.data[..., CH_NORMAL]

    @property
    def indirect(self):
        return self.data[..., CH_INDIRECT]

    @property
    def depth(self):
        return self.data[..., CH_DEPTH]

    @property
    def alpha(self):
        return self.data[..., CH_ALPHA]


@dataclass
class DrawOrder:
    """Visible splat ids sorted by center view depth, ids break ties."""

    indices: np.ndarray  # (K,) int64
    view_z: np.ndarray   # (K,) matching depths


@dataclass
class PreparedScene:
    """Per-camera per-splat quantities shared by forward and backward."""

    order: DrawOrder
    M: np.ndarray            # (P, 4, 4) folded PROJ_FLATTEN @ W @ H
    rects: np.ndarray        # (P, 4) int pixel rects x0, x1, y0, y1
    frames: np.ndarray       # (P, 3, 3) columns t_u, t_v, t_u x t_v
    n_unit: np.ndarray       # (P, 3) unit geometric normals
    cross_norm: np.ndarray   # (P,) |t_u x t_v|
    omega_o: np.ndarray      # (P, 3) unit splat-to-camera directions
    cam_dist: np.ndarray     # (P,) |camera - position|
    omega_r: np.ndarray      # (P, 3) per-splat reflect directions
    l_ind: np.ndarray        # (P, 3) clamped indirect radiance
    raw_ind: np.ndarray      # (P, 3) unclamped SH sums
    flat_attrs: np.ndarray   # (P, 11) constant attributes for flat mode
    texture_mode: str = "perprim"
    tex_flats: list = field(default_factory=list)   # per splat map tuple
    atlas_ctx: tuple = ()    # atlas page arrays + offsets when mode=atlas


def sort_and_cull(scene, camera: Camera) -> DrawOrder:
    """Depth-sort splats, dropping those behind the near plane or with a
    support rect that misses the viewport."""
    rects, view_z, keep = _cull_rects(scene, camera)
    ids = np.flatnonzero(keep)
    z = view_z[ids]
    order = np.lexsort((ids, z))
    return DrawOrder(indices=ids[order], view_z=z[order])


def _cull_rects(scene, camera: Camera):
    P = scene.num_splats
    R = camera.rotation
    t = camera.world_to_view[:3, 3]
    centers_v = scene.positions @ R.T + t
    view_z = centers_v[:, 2]

    du = RECT_SIGMA * scene.scales[:, 0:1] * scene.tangent_u
    dv = RECT_SIGMA * scene.scales[:, 1:2] * scene.tangent_v
    # (P, 4, 3) corner offsets (+u+v, +u-v, -u+v, -u-v) in view space.
    corners = np.stack([du + dv, du - dv, -du + dv, -du - dv], axis=1) @ R.T \
        + centers_v[:, None, :]

    rects = np.zeros((P, 4), dtype=np.int64)
    keep = view_z > camera.near
    cz = corners[:, :, 2]
    safe = keep & (cz > camera.near).all(axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * corners[:, :, 0] / cz + camera.cx - 0.5
        py = camera.fy * corners[:, :, 1] / cz + camera.cy - 0.5
    x0 = np.where(safe, np.floor(px.min(axis=1)) - RECT_PAD_PX, 0)
    x1 = np.where(safe, np.ceil(px.max(axis=1)) + RECT_PAD_PX + 1,
                  camera.width)
    y0 = np.where(safe, np.floor(py.min(axis=1)) - RECT_PAD_PX, 0)
    y1 = np.where(safe, np.ceil(py.max(axis=1)) + RECT_PAD_PX + 1,
                  camera.height)
    rects[:, 0] = np.clip(np.nan_to_num(x0, nan=0), 0, camera.width)
    rects[:, 1] = np.clip(np.nan_to_num(x1, nan=0), 0, camera.width)
    rects[:, 2] = np.clip(np.nan_to_num(y0, nan=0), 0, camera.height)
    rects[:, 3] = np.clip(np.nan_to_num(y1, nan=0), 0, camera.height)
    keep &= (rects[:, 0] < rects[:, 1]) & (rects[:, 2] < rects[:, 3])
    return rects, view_z, keep


def prepare(scene, camera: Camera, texture_mode: str = "perprim",
            atlas_set=None) -> PreparedScene:
    """Assemble the per-splat quantities one frame needs."""
    if texture_mode not in ("flat", "perprim", "atlas"):
        raise ValueError(f"unknown texture mode {texture_mode!r}")
    P = scene.num_splats
    rects, view_z, keep = _cull_rects(scene, camera)
    ids = np.flatnonzero(keep)
    z = view_z[ids]
    order = np.lexsort((ids, z))
    draw = DrawOrder(indices=ids[order], view_z=z[order])

    WH = build_homography_batch(scene.positions, scene.tangent_u,
                                scene.tangent_v, scene.scales, camera)
    M = WH[:, (0, 1, 2, 2), :]

    cross = np.cross(scene.tangent_u, scene.tangent_v)
    cross_norm = np.linalg.norm(cross, axis=1)
    n_unit = cross / np.maximum(cross_norm, 1e-30)[:, None]
    frames = np.stack([scene.tangent_u, scene.tangent_v, cross], axis=2)

    to_cam = camera.center[None, :] - scene.positions
    cam_dist = np.linalg.norm(to_cam, axis=1)
    omega_o = to_cam / np.maximum(cam_dist, 1e-30)[:, None]
    ndoto = np.sum(n_unit * omega_o, axis=1, keepdims=True)
    omega_r = 2.0 * ndoto * n_unit - omega_o
    l_ind, raw_ind = shlib.eval_radiance(scene.sh, omega_r, scene.sh_degree)

    flat_attrs = np.zeros((P, 11))
    tex_flats = []
    atlas_ctx = ()
    if texture_mode == "flat":
        for k, tex in enumerate(scene.textures):
            flat_attrs[k, 0:3] = tex.albedo.data.reshape(-1, 3).mean(axis=0)
            flat_attrs[k, 3] = tex.metallic.data.mean()
            flat_attrs[k, 4] = tex.roughness.data.mean()
        flat_attrs[:, 5:8] = cross
        flat_attrs[:, 8:11] = l_ind
    elif texture_mode == "perprim":
        T = scene.texture_config.resolution
        for tex in scene.textures:
            tex_flats.append((
                tex.albedo.data.reshape(T * T, 3),
                tex.roughness.data.reshape(T * T),
                tex.metallic.data.reshape(T * T),
                tex.tangent_normal.data.reshape(T * T, 2),
            ))
    else:
        if atlas_set is None:
            raise ValueError("atlas mode needs a packed atlas_set")
        T = atlas_set.resolution
        if T != scene.texture_config.resolution:
            raise ValueError("atlas resolution mismatch with scene")
        entries = atlas_set.indirection.entries
        page_w = atlas_set.family_a[0].texels.shape[1]
        offsets = (entries[:, 1].astype(np.int64) * T * page_w
                   + entries[:, 0].astype(np.int64) * T)
        # Concatenate both 4-channel family pages so sampling is a single
        # 8-channel gather (the software analog of one bound atlas).
        flats_ab = [np.concatenate([pa.texels.reshape(-1, 4),
                                    pb.texels.reshape(-1, 4)], axis=1)
                    for pa, pb in zip(atlas_set.family_a,
                                      atlas_set.family_b)]
        atlas_ctx = (flats_ab, offsets,
                     entries[:, 2].astype(np.int64), page_w)

    return PreparedScene(order=draw, M=M, rects=rects, frames=frames,
                         n_unit=n_unit, cross_norm=cross_norm,
                         omega_o=omega_o, cam_dist=cam_dist, omega_r=omega_r,
                         l_ind=l_ind, raw_ind=raw_ind, flat_attrs=flat_attrs,
                         texture_mode=texture_mode, tex_flats=tex_flats,
                         atlas_ctx=atlas_ctx)


def _tile_lists(prep: PreparedScene, width, height, tile):
    """Draw-ordered splat ids per tile (conservative rect binning)."""
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    lists = [[] for _ in range(tiles_x * tiles_y)]
    rects = prep.rects
    for k in prep.order.indices:
        x0, x1, y0, y1 = rects[k]
        for ty in range((y0 // tile), ((y1 - 1) // tile) + 1):
            base = ty * tiles_x
            for tx in range((x0 // tile), ((x1 - 1) // tile) + 1):
                lists[base + tx].append(int(k))
    return lists, tiles_x, tiles_y


def _fetch_attrs(scene, prep: PreparedScene, k: int, u, v, z):
    """Material attribute rows (n, 12) for one splat's fragments."""
    n = u.shape[0]
    x_attr = np.empty((n, 12))
    mode = prep.texture_mode
    if mode == "flat":
        x_attr[:, 0:11] = prep.flat_attrs[k]
        x_attr[:, 11] = z
        return x_attr

    cfg = scene.texture_config
    T = cfg.resolution
    s, t = uv_to_st(u, v, cfg)
    i0, i1, fs, j0, j1, ft = texel_coords(s, t, T)
    fs_e = fs[:, None]
    ft_e = ft[:, None]

    # One gather per bound map: all four corners fetched with a single
    # stacked index, then mixed by the shared lerp (values are identical to
    # gathering corners one by one).
    corners = np.empty((4, n), dtype=np.int64)

    if mode == "perprim":
        np.add(j0 * T, i0, out=corners[0])
        np.add(j0 * T, i1, out=corners[1])
        np.add(j1 * T, i0, out=corners[2])
        np.add(j1 * T, i1, out=corners[3])
        alb, rough, metal, norm = prep.tex_flats[k]
        ca = alb[corners].astype(np.float64)
        cr = rough[corners].astype(np.float64)
        cm = metal[corners].astype(np.float64)
        cn = norm[corners].astype(np.float64)
        x_attr[:, 0:3] = lerp_corners(ca[0], ca[1], ca[2], ca[3], fs_e, ft_e)
        x_attr[:, 4] = lerp_corners(cr[0], cr[1], cr[2], cr[3], fs, ft)
        x_attr[:, 3] = lerp_corners(cm[0], cm[1], cm[2], cm[3], fs, ft)
        enc = lerp_corners(cn[0], cn[1], cn[2], cn[3], fs_e, ft_e)
    else:
        flats_ab, offsets, pages, page_w = prep.atlas_ctx
        base = offsets[k]
        r0 = base + j0 * page_w
        r1 = base + j1 * page_w
        np.add(r0, i0, out=corners[0])
        np.add(r0, i1, out=corners[1])
        np.add(r1, i0, out=corners[2])
        np.add(r1, i1, out=corners[3])
        g = flats_ab[pages[k]][corners].astype(np.float64)
        v = lerp_corners(g[0], g[1], g[2], g[3], fs_e, ft_e)
        x_attr[:, 0:3] = v[:, 0:3]
        x_attr[:, 4] = v[:, 3]
        x_attr[:, 3] = v[:, 6]
        enc = v[:, 4:6]

    n_t = decode_tangent_normal(enc)
    x_attr[:, 5:8] = n_t @ prep.frames[k].T
    x_attr[:, 8:11] = prep.l_ind[k]
    x_attr[:, 11] = z
    return x_attr


def _render_tile(scene, camera, prep, splat_ids, xs, ys, bounds, with_tape):
    """Composite one tile; returns (out, records, fragment_count)."""
    tx0, ty0, tx1, ty1 = bounds
    tw = tx1 - tx0
    th = ty1 - ty0
    n_px = tw * th
    out = np.zeros((n_px, NUM_CHANNELS))
    trans = np.ones(n_px)
    records = []
    fragments = 0
    near = camera.near
    o_all = scene.opacities
    rects = prep.rects

    for step, k in enumerate(splat_ids):
        if step % SAT_CHECK_EVERY == 0 and trans.max() <= TRANSMIT_EPS:
            break
        x0, x1, y0, y1 = rects[k]
        rx0, rx1 = max(x0, tx0), min(x1, tx1)
        ry0, ry1 = max(y0, ty0), min(y1, ty1)
        if rx0 >= rx1 or ry0 >= ry1:
            continue
        M = prep.M[k]
        xr = xs[rx0:rx1]
        yr = ys[ry0:ry1]
        hu0 = xr * M[3, 0] - M[0, 0]
        hu1 = xr * M[3, 1] - M[0, 1]
        hu3 = xr * M[3, 3] - M[0, 3]
        hv0 = yr * M[3, 0] - M[1, 0]
        hv1 = yr * M[3, 1] - M[1, 1]
        hv3 = yr * M[3, 3] - M[1, 3]
        denom = hv1[:, None] * hu0[None, :] - hv0[:, None] * hu1[None, :]
        ok = np.abs(denom) > DENOM_EPS
        safe = np.where(ok, denom, 1.0)
        u = (hv3[:, None] * hu1[None, :] - hv1[:, None] * hu3[None, :]) / safe
        v = (hv0[:, None] * hu3[None, :] - hv3[:, None] * hu0[None, :]) / safe
        z = M[2, 3] + M[2, 0] * u + M[2, 1] * v
        g = np.exp(-0.5 * (u * u + v * v))
        a = o_all[k] * g
        live = ok & (z > near) & (a >= ALPHA_CUTOFF)
        if not live.any():
            continue

        rows = (np.arange(ry0, ry1) - ty0) * tw
        cols = np.arange(rx0, rx1) - tx0
        idx_grid = rows[:, None] + cols[None, :]
        live &= trans[idx_grid] > TRANSMIT_EPS
        sel = np.flatnonzero(live.ravel())
        if sel.size == 0:
            continue
        idx = idx_grid.ravel()[sel]
        u_m = u.ravel()[sel]
        v_m = v.ravel()[sel]
        z_m = z.ravel()[sel]
        a_m = a.ravel()[sel]
        t_m = trans[idx]

        x_attr = _fetch_attrs(scene, prep, k, u_m, v_m, z_m)
        w = a_m * t_m
        out[idx, 0:12] += w[:, None] * x_attr
        out[idx, CH_ALPHA] += w
        trans[idx] = t_m * (1.0 - a_m)
        fragments += sel.size
        if with_tape:
            records.append((k, idx, u_m, v_m, a_m, t_m, x_attr))
    return out, records, fragments


def _tile_bounds(ti, tiles_x, tile, width, height):
    ty, tx = divmod(ti, tiles_x)
    tx0 = tx * tile
    ty0 = ty * tile
    return (tx0, ty0, min(tx0 + tile, width), min(ty0 + tile, height))


def render_forward(scene, camera: Camera, texture_mode: str = "perprim",
                   atlas_set=None, threads: int = 1, tile: int = TILE,
                   with_tape: bool = False, prep: PreparedScene = None):
    """Rasterize the scene into a G-buffer.

    Args:
        texture_mode: "perprim" (default), "atlas", or "flat".
        threads: worker threads over tiles; output is identical for any
            count.
        with_tape: also return the replay tape for splat_backward.
    Returns:
        GBuffer, or (GBuffer, tape) when with_tape.
    """
    if prep is None:
        prep = prepare(scene, camera, texture_mode, atlas_set)
    H, W = camera.height, camera.width
    xs, ys = camera.pixel_plane_coords()
    lists, tiles_x, tiles_y = _tile_lists(prep, W, H, tile)
    buf = np.zeros((H, W, NUM_CHANNELS))
    tape = [None] * len(lists)
    counts = [0] * len(lists)

    def run(ti):
        bounds = _tile_bounds(ti, tiles_x, tile, W, H)
        return ti, bounds, _render_tile(scene, camera, prep, lists[ti],
                                        xs, ys, bounds, with_tape)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(lists))))
    else:
        results = [run(ti) for ti in range(len(lists))]

    for ti, bounds, (out, records, frags) in results:
        tx0, ty0, tx1, ty1 = bounds
        buf[ty0:ty1, tx0:tx1] = out.reshape(ty1 - ty0, tx1 - tx0,
                                            NUM_CHANNELS)
        tape[ti] = (bounds, records)
        counts[ti] = frags

    gbuf = GBuffer(data=buf, fragment_count=int(sum(counts)))
    if with_tape:
        return gbuf, tape
    return gbuf


@dataclass
class SceneGrads:
    """Gradients on every learnable splat parameter."""

    positions: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    texels: list  # per splat (T, T, 7) float64 or None

    @staticmethod
    def zeros(scene) -> "SceneGrads":
        P = scene.num_splats
        return SceneGrads(
            positions=np.zeros((P, 3)),
            tangent_u=np.zeros((P, 3)),
            tangent_v=np.zeros((P, 3)),
            scales=np.zeros((P, 2)),
            opacities=np.zeros(P),
            sh=np.zeros_like(scene.sh),
            texels=[None] * P,
        )

    def texel_grad(self, k: int, resolution: int) -> np.ndarray:
        if self.texels[k] is None:
            self.texels[k] = np.zeros((resolution, resolution, 7))
        return self.texels[k]


def splat_backward(scene, camera: Camera, prep: PreparedScene, tape,
                   dbuf) -> SceneGrads:
    """Backpropagate a G-buffer gradient to splat parameters.

    Args:
        tape: replay tape from render_forward(with_tape=True); the prepared
            scene must be the same one used forward. Requires texture mode
            "perprim".
        dbuf: (H, W, NUM_CHANNELS) float gradient on GBuffer.data.
    """
    if prep.texture_mode != "perprim":
        raise ValueError("gradients require the per-primitive texture path")
    grads = SceneGrads.zeros(scene)
    cfg = scene.texture_config
    T = cfg.resolution
    xs, ys = camera.pixel_plane_coords()
    dM = {}
    dframe_u = {}
    dframe_v = {}
    dl_ind = np.zeros((scene.num_splats, 3))
    touched = set()

    for bounds, records in tape:
        if not records:
            continue
        tx0, ty0, tx1, ty1 = bounds
        tw = tx1 - tx0
        g_tile = dbuf[ty0:ty1, tx0:tx1].reshape(-1, NUM_CHANNELS)
        if not np.any(g_tile):
            continue
        suffix = np.zeros_like(g_tile)
        for k, idx, u_m, v_m, a_m, t_m, x_attr in reversed(records):
            touched.add(k)
            gp = g_tile[idx]
            w = a_m * t_m
            x_full = np.concatenate([x_attr, np.ones((x_attr.shape[0], 1))],
                                    axis=1)
            dx = w[:, None] * gp[:, 0:12]
            da = np.einsum(
                "nc,nc->n", gp,
                t_m[:, None] * x_full
                - suffix[idx] / np.maximum(1.0 - a_m, 1e-30)[:, None])
            suffix[idx] += w[:, None] * x_full

            g_gauss = np.exp(-0.5 * (u_m * u_m + v_m * v_m))
            grads.opacities[k] += float(da @ g_gauss)
            du = -da * a_m * u_m
            dv = -da * a_m * v_m
            dz = dx[:, 11].copy()

            # Texture chains: recompute the fetch intermediates.
            s, t = uv_to_st(u_m, v_m, cfg)
            i0, i1, fs, j0, j1, ft = texel_coords(s, t, T)
            c00 = j0 * T + i0
            c01 = j0 * T + i1
            c10 = j1 * T + i0
            c11 = j1 * T + i1
            alb, rough, metal, norm = prep.tex_flats[k]
            enc = lerp_corners(
                norm[c00].astype(np.float64), norm[c01].astype(np.float64),
                norm[c10].astype(np.float64), norm[c11].astype(np.float64),
                fs[:, None], ft[:, None])
            n_t = decode_tangent_normal(enc)
            frame = prep.frames[k]

            dn_w = dx[:, 5:8]
            dn_t = dn_w @ frame
            dR = dn_w.T @ n_t  # (3 world, 3 tangent)
            dframe_u[k] = dframe_u.get(k, 0.0) + dR[:, 0]
            dframe_v[k] = dframe_v.get(k, 0.0) + dR[:, 1]
            dn3 = dR[:, 2]
            tu, tv = scene.tangent_u[k], scene.tangent_v[k]
            dframe_u[k] += np.cross(tv, dn3)
            dframe_v[k] += np.cross(dn3, tu)
            denc = decode_tangent_normal_grad(enc, dn_t)

            # Gradient on the combined 7-channel texel block.
            up7 = np.empty((dx.shape[0], 7))
            up7[:, 0:3] = dx[:, 0:3]
            up7[:, 3] = dx[:, 4]
            up7[:, 4] = dx[:, 3]
            up7[:, 5:7] = denc
            dtex = grads.texel_grad(k, T).reshape(T * T, 7)
            w00 = ((1.0 - fs) * (1.0 - ft))[:, None]
            w01 = (fs * (1.0 - ft))[:, None]
            w10 = ((1.0 - fs) * ft)[:, None]
            w11 = (fs * ft)[:, None]
            np.add.at(dtex, c00, up7 * w00)
            np.add.at(dtex, c01, up7 * w01)
            np.add.at(dtex, c10, up7 * w10)
            np.add.at(dtex, c11, up7 * w11)

            # Chart coordinate gradient needs the corner values of all
            # seven channels; assemble them in the same order as up7.
            t00 = _corner7(alb, rough, metal, norm, c00)
            t01 = _corner7(alb, rough, metal, norm, c01)
            t10 = _corner7(alb, rough, metal, norm, c10)
            t11 = _corner7(alb, rough, metal, norm, c11)
            ft_e = ft[:, None]
            fs_e = fs[:, None]
            dfs = np.sum(up7 * ((1.0 - ft_e) * (t01 - t00)
                                + ft_e * (t11 - t10)), axis=1)
            dft = np.sum(up7 * ((t10 - t00)
                                + fs_e * ((t11 - t10) - (t01 - t00))), axis=1)
            xs_t = s * T - 0.5
            yt_t = t * T - 0.5
            ds = np.where((xs_t > 0.0) & (xs_t < T - 1.0), dfs * T, 0.0)
            dt = np.where((yt_t > 0.0) & (yt_t < T - 1.0), dft * T, 0.0)
            du_st, dv_st = uv_to_st_grad(u_m, v_m, cfg, ds, dt)
            du += du_st
            dv += dv_st

            dl_ind[k] += dx[:, 8:11].sum(axis=0)

            gx = xs[tx0 + idx % tw]
            gy = ys[ty0 + idx // tw]
            dM[k] = dM.get(k, 0.0) + _intersect_backward_arrays(
                prep.M[k], gx, gy, du, dv, dz)

    _finish_param_grads(scene, camera, prep, grads, dM, dframe_u, dframe_v,
                        dl_ind, touched)
    return grads


def _corner7(alb, rough, metal, norm, c):
    out = np.empty((c.shape[0], 7))
    out[:, 0:3] = alb[c]
    out[:, 3] = rough[c]
    out[:, 4] = metal[c]
    out[:, 5:7] = norm[c]
    return out


def _intersect_backward_arrays(M, x, y, du, dv, dz):
    """Vectorized adjoint of the closed-form intersection (see splats)."""
    hu0 = x * M[3, 0] - M[0, 0]
    hu1 = x * M[3, 1] - M[0, 1]
    hu3 = x * M[3, 3] - M[0, 3]
    hv0 = y * M[3, 0] - M[1, 0]
    hv1 = y * M[3, 1] - M[1, 1]
    hv3 = y * M[3, 3] - M[1, 3]
    denom = hu0 * hv1 - hu1 * hv0
    u = (hu1 * hv3 - hu3 * hv1) / denom
    v = (hu3 * hv0 - hu0 * hv3) / denom

    du = du + dz * M[2, 0]
    dv = dv + dz * M[2, 1]
    dNu = du / denom
    dNv = dv / denom
    dD = -(u * du + v * dv) / denom

    dhu0 = dD * hv1 - dNv * hv3
    dhu1 = dNu * hv3 - dD * hv0
    dhu3 = dNv * hv0 - dNu * hv1
    dhv0 = dNv * hu3 - dD * hu1
    dhv1 = dD * hu0 - dNu * hu3
    dhv3 = dNu * hu1 - dNv * hu0

    dM_out = np.zeros((4, 4))
    for col, (dhu_j, dhv_j) in (((0, (dhu0, dhv0)), (1, (dhu1, dhv1)),
                                 (3, (dhu3, dhv3)))):
        dM_out[0, col] = -dhu_j.sum()
        dM_out[1, col] = -dhv_j.sum()
        dM_out[3, col] = x @ dhu_j + y @ dhv_j
    dM_out[2, 0] = dz @ u
    dM_out[2, 1] = dz @ v
    dM_out[2, 3] = dz.sum()
    return dM_out


def _finish_param_grads(scene, camera, prep, grads, dM, dframe_u, dframe_v,
                        dl_ind, touched):
    """Fold per-splat matrix/frame/SH gradients into parameter arrays."""
    w2v = camera.world_to_view
    for k in sorted(touched):
        if k in dM:
            dWH = fold_matrix_backward(dM[k])
            dH = w2v.T @ dWH
            grads.positions[k] += dH[:3, 3]
            grads.scales[k, 0] += scene.tangent_u[k] @ dH[:3, 0]
            grads.scales[k, 1] += scene.tangent_v[k] @ dH[:3, 1]
            grads.tangent_u[k] += scene.scales[k, 0] * dH[:3, 0]
            grads.tangent_v[k] += scene.scales[k, 1] * dH[:3, 1]
        if k in dframe_u:
            grads.tangent_u[k] += dframe_u[k]
            grads.tangent_v[k] += dframe_v[k]

        dl = dl_ind[k]
        if np.any(dl != 0.0):
            dsh, ddir = shlib.eval_radiance_grad(
                scene.sh[k], prep.omega_r[k], scene.sh_degree,
                prep.raw_ind[k], dl)
            grads.sh[k] += dsh
            n = prep.n_unit[k]
            wo = prep.omega_o[k]
            ndd = n @ ddir
            dn = 2.0 * ndd * wo + 2.0 * (n @ wo) * ddir
            dwo = 2.0 * ndd * n - ddir
            # n = cross / |cross|
            dcross = (dn - n * (n @ dn)) / max(prep.cross_norm[k], 1e-30)
            grads.tangent_u[k] += np.cross(scene.tangent_v[k], dcross)
            grads.tangent_v[k] += np.cross(dcross, scene.tangent_u[k])
            # omega_o = (c - p) / |c - p|; d/dp = -(I - oo^T)/dist
            dp = -(dwo - wo * (wo @ dwo)) / max(prep.cam_dist[k], 1e-30)
            grads.positions[k] += dp


def render_normal_map(scene, camera: Camera, **kw) -> np.ndarray:
    """Unit blended normals encoded to [0, 1]; uncovered pixels mid-gray."""
    gbuf = render_forward(scene, camera, **kw)
    n = gbuf.normal
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    covered = gbuf.alpha[..., None] > 1e-8
    unit = np.where(covered & (norm > 1e-12), n / np.maximum(norm, 1e-30),
                    0.0)
    return 0.5 * (unit + 1.0)


def render_depth_map(scene, camera: Camera, **kw) -> np.ndarray:
    """Coverage-normalized view depth; uncovered pixels are 0."""
    gbuf = render_forward(scene, camera, **kw)
    a = gbuf.alpha
    return np.where(a > 1e-8, gbuf.depth / np.maximum(a, 1e-30), 0.0)
