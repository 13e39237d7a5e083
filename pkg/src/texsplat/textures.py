"""Per-splat material textures: chart mapping, bilinear sampling, normals.

Each splat carries four small square maps (albedo RGB, roughness, metallic,
tangent-space normal in a 2-component encoding). Splat-local coordinates
(u, v) in units of sigma map to chart coordinates (s, t) covering the
+/-SUPPORT_SIGMA extent of the Gaussian, inset by half a texel so bilinear
lookups never leave the chart.

All sampling goes through the two-step lerp form

    a = t00 + fs * (t01 - t00);  b = t10 + fs * (t11 - t10)
    out = a + ft * (b - a)

which returns a stored texel value bitwise when all four corners are equal.
The atlas sampler reuses the same helper, so per-splat and atlas lookups of
identical texels agree exactly, not just to rounding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .splats import SUPPORT_SIGMA

# Combined per-splat texel block layout, float32:
#   0:3 albedo.rgb, 3 roughness, 4 metallic, 5:7 tangent normal (a, b)
COMBINED_CHANNELS = 7
BLOB_MAGIC = b"TTEX"

_SEMANTIC_CHANNELS = {
    "albedo": 3,
    "roughness": 1,
    "metallic": 1,
    "tangent_normal": 2,
}


@dataclass
class TextureConfig:
    """Chart parameters shared by every map of a splat."""

    resolution: int = 4
    support: float = SUPPORT_SIGMA

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("texture resolution must be >= 1")
        if self.support <= 0:
            raise ValueError("support must be positive")


@dataclass
class TextureMap:
    """A square float32 texture with a material semantic."""

    data: np.ndarray  # (T, T, C), float32, values in [0, 1]
    semantic: str

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    def validate(self):
        if self.semantic not in _SEMANTIC_CHANNELS:
            raise ValueError(f"unknown texture semantic {self.semantic!r}")
        c = _SEMANTIC_CHANNELS[self.semantic]
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError("texture data must be (T, T, C)")
        if self.data.shape[2] != c:
            raise ValueError(
                f"{self.semantic} expects {c} channels, got {self.data.shape[2]}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("texture contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("texture values must lie in [0, 1]")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


@dataclass
class MaterialTextureSet:
    """The four material maps of one splat, all at the same resolution."""

    albedo: TextureMap
    roughness: TextureMap
    metallic: TextureMap
    tangent_normal: TextureMap

    @property
    def resolution(self) -> int:
        return self.albedo.resolution

    def validate(self):
        for m in (self.albedo, self.roughness, self.metallic,
                  self.tangent_normal):
            m.validate()
        res = {m.resolution for m in (self.albedo, self.roughness,
                                      self.metallic, self.tangent_normal)}
        if len(res) != 1:
            raise ValueError("all maps of a set must share one resolution")
        for m, s in ((self.albedo, "albedo"), (self.roughness, "roughness"),
                     (self.metallic, "metallic"),
                     (self.tangent_normal, "tangent_normal")):
            if m.semantic != s:
                raise ValueError(f"map in slot {s} has semantic {m.semantic!r}")

    @staticmethod
    def constant(albedo, roughness, metallic, normal=(0.5, 0.5),
                 resolution: int = 4) -> "MaterialTextureSet":
        """Uniform maps holding one value per channel."""
        T = resolution

        def fill(vals, semantic):
            arr = np.empty((T, T, len(vals)), dtype=np.float32)
            arr[...] = np.asarray(vals, dtype=np.float32)
            return TextureMap(arr, semantic)

        return MaterialTextureSet(
            albedo=fill(np.atleast_1d(albedo), "albedo"),
            roughness=fill([roughness], "roughness"),
            metallic=fill([metallic], "metallic"),
            tangent_normal=fill(normal, "tangent_normal"),
        )

    def combined(self) -> np.ndarray:
        """Pack the four maps into one (T, T, 7) float32 block."""
        return np.concatenate(
            [self.albedo.data, self.roughness.data, self.metallic.data,
             self.tangent_normal.data], axis=2)

    @staticmethod
    def from_combined(block: np.ndarray) -> "MaterialTextureSet":
        if block.ndim != 3 or block.shape[2] != COMBINED_CHANNELS:
            raise ValueError("combined block must be (T, T, 7)")
        block = np.ascontiguousarray(block, dtype=np.float32)
        return MaterialTextureSet(
            albedo=TextureMap(block[:, :, 0:3].copy(), "albedo"),
            roughness=TextureMap(block[:, :, 3:4].copy(), "roughness"),
            metallic=TextureMap(block[:, :, 4:5].copy(), "metallic"),
            tangent_normal=TextureMap(block[:, :, 5:7].copy(),
                                      "tangent_normal"),
        )

    def copy(self) -> "MaterialTextureSet":
        return MaterialTextureSet.from_combined(self.combined())


def uv_to_st(u, v, config: TextureConfig):
    """Map splat-local (u, v) to chart coordinates (s, t).

    The chart spans u, v in [-support, +support]; results are clamped to the
    half-texel inset [0.5/T, 1 - 0.5/T] so bilinear taps stay on the chart.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    half_texel = 0.5 / config.resolution
    inv = 1.0 / (2.0 * config.support)
    s = np.clip((u + config.support) * inv, half_texel, 1.0 - half_texel)
    t = np.clip((v + config.support) * inv, half_texel, 1.0 - half_texel)
    return s, t


def uv_to_st_grad(u, v, config: TextureConfig, ds, dt):
    """Adjoint of uv_to_st: zero where the clamp was active."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    half_texel = 0.5 / config.resolution
    inv = 1.0 / (2.0 * config.support)
    s_raw = (u + config.support) * inv
    t_raw = (v + config.support) * inv
    lo, hi = half_texel, 1.0 - half_texel
    du = np.where((s_raw > lo) & (s_raw < hi), ds * inv, 0.0)
    dv = np.where((t_raw > lo) & (t_raw < hi), dt * inv, 0.0)
    return du, dv


def texel_coords(s, t, resolution: int):
    """Corner indices and fractions for bilinear lookup at (s, t).

    Texel centers sit at ((i + 0.5) / T, (j + 0.5) / T); coordinates are
    clamped to the edge-center range so out-of-[0,1] inputs clamp rather
    than wrap.

    Returns:
        i0, i1, fs (s axis / columns), j0, j1, ft (t axis / rows).
    """
    T = resolution
    xs = np.clip(np.asarray(s, dtype=np.float64) * T - 0.5, 0.0, T - 1.0)
    yt = np.clip(np.asarray(t, dtype=np.float64) * T - 0.5, 0.0, T - 1.0)
    i0 = np.floor(xs).astype(np.int64)
    j0 = np.floor(yt).astype(np.int64)
    fs = xs - i0
    ft = yt - j0
    i1 = np.minimum(i0 + 1, T - 1)
    j1 = np.minimum(j0 + 1, T - 1)
    return i0, i1, fs, j0, j1, ft


def lerp_corners(t00, t01, t10, t11, fs, ft):
    """Two-step bilinear mix; exact when all four corners are equal.

    Corner naming: t{row}{col} with rows along t and columns along s.
    fs/ft must already be broadcast-compatible with the corner arrays.
    """
    a = t00 + fs * (t01 - t00)
    b = t10 + fs * (t11 - t10)
    return a + ft * (b - a)


def bilinear_sample(tex: TextureMap, s, t) -> np.ndarray:
    """Sample a map at chart coordinates; returns float64 (..., C)."""
    data = tex.data
    T = data.shape[0]
    i0, i1, fs, j0, j1, ft = texel_coords(s, t, T)
    flat = data.reshape(T * T, data.shape[2])
    t00 = flat[j0 * T + i0].astype(np.float64)
    t01 = flat[j0 * T + i1].astype(np.float64)
    t10 = flat[j1 * T + i0].astype(np.float64)
    t11 = flat[j1 * T + i1].astype(np.float64)
    return lerp_corners(t00, t01, t10, t11, fs[..., None], ft[..., None])


def bilinear_sample_grad(tex: TextureMap, s, t, upstream):
    """Adjoint of bilinear_sample.

    Args:
        upstream: (..., C) gradient on the sampled values.
    Returns:
        (dtexels (T, T, C) float64, ds, dt) where ds/dt match the shape of
        s/t and are zero wherever the edge clamp was active.
    """
    data = tex.data
    T, C = data.shape[0], data.shape[2]
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    i0, i1, fs, j0, j1, ft = texel_coords(s, t, T)
    flat = data.reshape(T * T, C)
    t00 = flat[j0 * T + i0].astype(np.float64)
    t01 = flat[j0 * T + i1].astype(np.float64)
    t10 = flat[j1 * T + i0].astype(np.float64)
    t11 = flat[j1 * T + i1].astype(np.float64)

    fs_e = fs[..., None]
    ft_e = ft[..., None]
    dgrid = np.zeros((T * T, C))
    np.add.at(dgrid, j0 * T + i0, upstream * (1.0 - fs_e) * (1.0 - ft_e))
    np.add.at(dgrid, j0 * T + i1, upstream * fs_e * (1.0 - ft_e))
    np.add.at(dgrid, j1 * T + i0, upstream * (1.0 - fs_e) * ft_e)
    np.add.at(dgrid, j1 * T + i1, upstream * fs_e * ft_e)

    dfs = np.sum(upstream * ((1.0 - ft_e) * (t01 - t00) + ft_e * (t11 - t10)),
                 axis=-1)
    dft = np.sum(upstream * ((t10 - t00) + fs_e * ((t11 - t10) - (t01 - t00))),
                 axis=-1)
    # Clamp regions of texel_coords have zero slope.
    xs = s * T - 0.5
    yt = t * T - 0.5
    ds = np.where((xs > 0.0) & (xs < T - 1.0), dfs * T, 0.0)
    dt = np.where((yt > 0.0) & (yt < T - 1.0), dft * T, 0.0)
    return dgrid.reshape(T, T, C), ds, dt


def decode_tangent_normal(enc):
    """Decode a 2-channel normal: n_xy = 2*enc - 1, n_z completes the unit vector.

    Encodings outside the unit disk are projected back onto it (n_z = 0).

    Args:
        enc: (..., 2) values in [0, 1].
    Returns:
        (..., 3) unit tangent-space normals with n_z >= 0.
    """
    enc = np.asarray(enc, dtype=np.float64)
    nx = 2.0 * enc[..., 0] - 1.0
    ny = 2.0 * enc[..., 1] - 1.0
    d2 = nx * nx + ny * ny
    over = d2 > 1.0
    scale = np.where(over, 1.0 / np.sqrt(np.maximum(d2, 1.0)), 1.0)
    nx = nx * scale
    ny = ny * scale
    nz = np.sqrt(np.maximum(0.0, 1.0 - nx * nx - ny * ny))
    return np.stack([nx, ny, nz], axis=-1)


def decode_tangent_normal_grad(enc, upstream):
    """Adjoint of decode_tangent_normal.

    Args:
        enc: (..., 2) encoded values.
        upstream: (..., 3) gradient on the decoded normal.
    Returns:
        (..., 2) gradient on the encoding.
    """
    enc = np.asarray(enc, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    px = 2.0 * enc[..., 0] - 1.0
    py = 2.0 * enc[..., 1] - 1.0
    d2 = px * px + py * py
    over = d2 > 1.0

    gx, gy, gz = upstream[..., 0], upstream[..., 1], upstream[..., 2]

    # Interior: nz = sqrt(1 - px^2 - py^2); dnz/dpx = -px / nz.
    nz = np.sqrt(np.maximum(1e-12, 1.0 - np.minimum(d2, 1.0)))
    dpx_in = gx - gz * px / nz
    dpy_in = gy - gz * py / nz

    # Exterior: (nx, ny) = (px, py)/d, nz = 0 (gz sees a flat zero).
    d = np.sqrt(np.maximum(d2, 1e-12))
    nx, ny = px / d, py / d
    gdot = gx * nx + gy * ny
    dpx_out = (gx - gdot * nx) / d
    dpy_out = (gy - gdot * ny) / d

    dpx = np.where(over, dpx_out, dpx_in)
    dpy = np.where(over, dpy_out, dpy_in)
    return np.stack([2.0 * dpx, 2.0 * dpy], axis=-1)


def normal_to_world(tangent_u, tangent_v, n_tangent):
    """Rotate tangent-space normals into world space.

    The frame is (t_u, t_v, t_u x t_v); for an orthonormal pair the third
    axis is the unit geometric normal.

    Args:
        tangent_u, tangent_v: (3,) frame vectors.
        n_tangent: (..., 3) tangent-space normals.
    Returns:
        (..., 3) world-space normals.
    """
    tangent_u = np.asarray(tangent_u, dtype=np.float64)
    tangent_v = np.asarray(tangent_v, dtype=np.float64)
    n_tangent = np.asarray(n_tangent, dtype=np.float64)
    n3 = np.cross(tangent_u, tangent_v)
    return (n_tangent[..., 0:1] * tangent_u
            + n_tangent[..., 1:2] * tangent_v
            + n_tangent[..., 2:3] * n3)


def normal_to_world_grad(tangent_u, tangent_v, n_tangent, upstream):
    """Adjoint of normal_to_world for one frame.

    Args:
        n_tangent: (n, 3) tangent normals, upstream: (n, 3) world gradients.
    Returns:
        (dn_tangent (n, 3), dtangent_u (3,), dtangent_v (3,))
    """
    tangent_u = np.asarray(tangent_u, dtype=np.float64)
    tangent_v = np.asarray(tangent_v, dtype=np.float64)
    n_tangent = np.asarray(n_tangent, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    n3 = np.cross(tangent_u, tangent_v)

    dn_t = np.stack([upstream @ tangent_u, upstream @ tangent_v,
                     upstream @ n3], axis=-1)
    dtu = n_tangent[:, 0] @ upstream
    dtv = n_tangent[:, 1] @ upstream
    dn3 = n_tangent[:, 2] @ upstream
    # c = t_u x t_v: dL/dt_u = t_v x dL/dc, dL/dt_v = dL/dc x t_u.
    dtu = dtu + np.cross(tangent_v, dn3)
    dtv = dtv + np.cross(dn3, tangent_u)
    return dn_t, dtu, dtv


def save_texture_blob(path, sets: "list[MaterialTextureSet]"):
    """Write texture sets as raw float32 blocks with a fixed header.

    Layout: magic 'TTEX', uint32 resolution, uint32 channels (7),
    uint32 count, then count blocks of (T*T*7) little-endian float32.
    All sets must share one resolution.
    """
    if not sets:
        raise ValueError("no texture sets to save")
    T = sets[0].resolution
    for s in sets:
        s.validate()
        if s.resolution != T:
            raise ValueError("texture sets must share one resolution")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<III", T, COMBINED_CHANNELS, len(sets)))
        for s in sets:
            f.write(np.ascontiguousarray(
                s.combined(), dtype="<f4").tobytes())


def load_texture_blob(path) -> "list[MaterialTextureSet]":
    """Read texture sets written by save_texture_blob."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BLOB_MAGIC:
            raise ValueError(f"bad texture blob magic {magic!r}")
        T, C, count = struct.unpack("<III", f.read(12))
        if C != COMBINED_CHANNELS:
            raise ValueError(f"texture blob has {C} channels, expected 7")
        payload = f.read()
    expected = count * T * T * C * 4
    if len(payload) != expected:
        raise ValueError("texture blob payload size mismatch")
    blocks = np.frombuffer(payload, dtype="<f4").reshape(count, T, T, C)
    return [MaterialTextureSet.from_combined(blocks[i].copy())
            for i in range(count)]
