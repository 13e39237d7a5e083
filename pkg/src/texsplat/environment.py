"""Image-based lighting: equirectangular environment maps and the BRDF LUT.

The environment is stored z-up in equirectangular parameterization,
theta = arccos(z) over rows, phi = atan2(y, x) over columns. Specular
lookups run on a pyramid of independently learnable mip grids (level =
roughness * (levels-1), trilinear); diffuse lighting reads a learnable
irradiance map. Initial mip/irradiance content comes from GGX-weighted and
cosine-weighted quadrature of a base map.

The split-sum BRDF scale/bias table is precomputed by GGX importance
sampling over a Hammersley sequence and sampled bilinearly at shade time;
it is a derived constant, not a learnable parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .textures import lerp_corners

TWO_PI = 2.0 * np.pi
# arccos argument clip; keeps the pole derivative finite.
_POLE_EPS = 1e-9


def equirect_dirs(height: int, width: int) -> np.ndarray:
    """Unit directions at texel centers of an equirect grid, (H, W, 3)."""
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * TWO_PI
    st, ct = np.sin(theta), np.cos(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    return np.stack([st[:, None] * cp[None, :],
                     st[:, None] * sp[None, :],
                     np.broadcast_to(ct[:, None], (height, width))], axis=-1)


def equirect_solid_angles(height: int, width: int) -> np.ndarray:
    """Per-texel solid angle sin(theta) * dtheta * dphi, (H, W)."""
    theta = (np.arange(height) + 0.5) / height * np.pi
    w = np.sin(theta) * (np.pi / height) * (TWO_PI / width)
    return np.broadcast_to(w[:, None], (height, width)).copy()


def _dir_to_grid(dirs, height: int, width: int):
    """Continuous (row, col) lookup coordinates for unit directions."""
    z = np.clip(dirs[..., 2], -1.0 + _POLE_EPS, 1.0 - _POLE_EPS)
    theta = np.arccos(z)
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    phi = np.mod(phi, TWO_PI)
    row = theta / np.pi * height - 0.5
    col = phi / TWO_PI * width - 0.5
    return row, col


def _equirect_taps(dirs, height: int, width: int):
    """Bilinear taps: rows clamp at the poles, columns wrap in phi."""
    row, col = _dir_to_grid(dirs, height, width)
    rowc = np.clip(row, 0.0, height - 1.0)
    r0 = np.floor(rowc).astype(np.int64)
    fr = rowc - r0
    r1 = np.minimum(r0 + 1, height - 1)
    colf = np.floor(col)
    fc = col - colf
    c0 = colf.astype(np.int64) % width
    c1 = (c0 + 1) % width
    row_interior = (row > 0.0) & (row < height - 1.0)
    return r0, r1, fr, c0, c1, fc, row_interior


def sample_equirect(grid, dirs):
    """Bilinear sample of an equirect grid at unit directions.

    Args:
        grid: (H, W, 3) float array (any float dtype; result is float64).
        dirs: (..., 3) unit directions.
    Returns:
        (values (..., 3), cache) with cache consumed by the grad variant.
    """
    h, w = grid.shape[:2]
    r0, r1, fr, c0, c1, fc, interior = _equirect_taps(dirs, h, w)
    flat = grid.reshape(h * w, 3)
    t00 = flat[r0 * w + c0].astype(np.float64)
    t01 = flat[r0 * w + c1].astype(np.float64)
    t10 = flat[r1 * w + c0].astype(np.float64)
    t11 = flat[r1 * w + c1].astype(np.float64)
    vals = lerp_corners(t00, t01, t10, t11, fc[..., None], fr[..., None])
    cache = (dirs, r0, r1, fr, c0, c1, fc, interior,
             (t00, t01, t10, t11), (h, w))
    return vals, cache


def sample_equirect_grad(cache, upstream, dgrid):
    """Adjoint of sample_equirect.

    Args:
        upstream: (..., 3) gradient on sampled values.
        dgrid: (H, W, 3) float64 accumulator, scattered into in place.
    Returns:
        ddirs (..., 3).
    """
    dirs, r0, r1, fr, c0, c1, fc, interior, corners, (h, w) = cache
    t00, t01, t10, t11 = corners
    fr_e = fr[..., None]
    fc_e = fc[..., None]
    flat = dgrid.reshape(h * w, 3)
    np.add.at(flat, r0 * w + c0, upstream * (1.0 - fc_e) * (1.0 - fr_e))
    np.add.at(flat, r0 * w + c1, upstream * fc_e * (1.0 - fr_e))
    np.add.at(flat, r1 * w + c0, upstream * (1.0 - fc_e) * fr_e)
    np.add.at(flat, r1 * w + c1, upstream * fc_e * fr_e)

    dfc = np.sum(upstream * ((1.0 - fr_e) * (t01 - t00) + fr_e * (t11 - t10)),
                 axis=-1)
    dfr = np.sum(upstream * ((t10 - t00) + fc_e * ((t11 - t10) - (t01 - t00))),
                 axis=-1)
    drow = np.where(interior, dfr, 0.0)
    dcol = dfc  # phi wrap is seamless; the slope never clamps

    dtheta = drow * (h / np.pi)
    dphi = dcol * (w / TWO_PI)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zc = np.clip(z, -1.0 + _POLE_EPS, 1.0 - _POLE_EPS)
    at_pole = np.abs(z) >= 1.0 - _POLE_EPS
    dz = np.where(at_pole, 0.0, -dtheta / np.sqrt(1.0 - zc * zc))
    r2 = np.maximum(x * x + y * y, 1e-30)
    dx = -y / r2 * dphi
    dy = x / r2 * dphi
    return np.stack([dx, dy, dz], axis=-1)


def downsample2(grid) -> np.ndarray:
    """Average 2x2 blocks; trims odd trailing rows/cols if present."""
    h, w = grid.shape[:2]
    h2, w2 = h // 2, w // 2
    g = grid[:h2 * 2, :w2 * 2].astype(np.float64)
    return g.reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))


def ggx_ndf(cos_h, alpha):
    """GGX normal distribution, alpha = roughness^2."""
    a2 = alpha * alpha
    d = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (np.pi * d * d)


def prefilter_specular(base, roughness: float, out_height: int,
                       out_width: int, chunk: int = 512) -> np.ndarray:
    """GGX-weighted quadrature prefilter of an equirect radiance map.

    Follows the reflect-direction approximation (normal = view = reflect):
    out(R) = sum_j L_j D(cos_h) (R.w_j)+ dOmega_j / sum_j weights, with
    h the half vector of R and w_j. A 2x downsampled copy of the base is
    the quadrature grid, which keeps the cost quadratic in a small number
    of texels.
    """
    if roughness <= 0.0:
        raise ValueError("prefilter needs roughness > 0; level 0 is the base")
    src = downsample2(base)
    sh, sw = src.shape[:2]
    in_dirs = equirect_dirs(sh, sw).reshape(-1, 3)
    in_rad = src.reshape(-1, 3)
    d_omega = equirect_solid_angles(sh, sw).reshape(-1)
    out_dirs = equirect_dirs(out_height, out_width).reshape(-1, 3)
    alpha = roughness * roughness

    out = np.empty((out_dirs.shape[0], 3))
    for start in range(0, out_dirs.shape[0], chunk):
        R = out_dirs[start:start + chunk]
        cos_rw = np.clip(R @ in_dirs.T, -1.0, 1.0)
        up = cos_rw > 0.0
        cos_h = np.sqrt(0.5 * (1.0 + cos_rw))
        w = np.where(up, ggx_ndf(cos_h, alpha) * cos_rw, 0.0) * d_omega
        norm = w.sum(axis=1, keepdims=True)
        out[start:start + chunk] = (w @ in_rad) / np.maximum(norm, 1e-30)
    return out.reshape(out_height, out_width, 3)


def diffuse_irradiance(base, out_height: int, out_width: int,
                       chunk: int = 1024) -> np.ndarray:
    """Cosine-weighted irradiance E(N) = sum_j L_j (N.w_j)+ dOmega_j.

    A constant radiance L0 integrates to pi * L0 (to quadrature accuracy).
    """
    src = downsample2(base)
    sh, sw = src.shape[:2]
    in_dirs = equirect_dirs(sh, sw).reshape(-1, 3)
    in_rad = src.reshape(-1, 3) * equirect_solid_angles(sh, sw).reshape(-1, 1)
    out_dirs = equirect_dirs(out_height, out_width).reshape(-1, 3)
    out = np.empty((out_dirs.shape[0], 3))
    for start in range(0, out_dirs.shape[0], chunk):
        N = out_dirs[start:start + chunk]
        cosw = np.maximum(N @ in_dirs.T, 0.0)
        out[start:start + chunk] = cosw @ in_rad
    return out.reshape(out_height, out_width, 3)


@dataclass
class EnvGrads:
    """Gradient accumulators matching EnvironmentLight parameters."""

    spec_mips: "list[np.ndarray]"
    diffuse: np.ndarray

    def scaled(self, s: float) -> "EnvGrads":
        return EnvGrads([g * s for g in self.spec_mips], self.diffuse * s)


class EnvironmentLight:
    """Learnable environment: specular mip pyramid plus diffuse irradiance.

    spec_mips[0] answers mirror lookups; level l covers roughness
    l / (levels - 1). All grids are independent float32 parameters.
    """

    def __init__(self, spec_mips, diffuse):
        self.spec_mips = [np.ascontiguousarray(m, dtype=np.float32)
                          for m in spec_mips]
        self.diffuse = np.ascontiguousarray(diffuse, dtype=np.float32)
        for m in self.spec_mips:
            if m.ndim != 3 or m.shape[2] != 3:
                raise ValueError("mip grids must be (H, W, 3)")
        if self.diffuse.ndim != 3 or self.diffuse.shape[2] != 3:
            raise ValueError("diffuse grid must be (H, W, 3)")

    @property
    def levels(self) -> int:
        return len(self.spec_mips)

    @staticmethod
    def from_base(base, levels: int = 6, diffuse_height: int = 32
                  ) -> "EnvironmentLight":
        """Build the pyramid from a base radiance map (H, W, 3), W = 2H."""
        base = np.asarray(base, dtype=np.float64)
        h, w = base.shape[:2]
        mips = [base.astype(np.float32)]
        for level in range(1, levels):
            r = level / (levels - 1)
            oh = max(4, h >> level)
            ow = max(8, w >> level)
            mips.append(prefilter_specular(base, r, oh, ow).astype(np.float32))
        dh = min(diffuse_height, h)
        diff = diffuse_irradiance(base, dh, 2 * dh).astype(np.float32)
        return EnvironmentLight(mips, diff)

    @staticmethod
    def constant(value, height: int = 64, levels: int = 6) -> "EnvironmentLight":
        """Uniform radiance in every direction (mips are exact)."""
        value = np.asarray(value, dtype=np.float32) * np.ones(3, np.float32)
        mips = []
        for level in range(levels):
            oh = max(4, height >> level)
            ow = 2 * oh
            mips.append(np.broadcast_to(value, (oh, ow, 3)).copy())
        dh = min(32, height)
        diff = np.full((dh, 2 * dh, 3), np.pi, dtype=np.float64) * value
        return EnvironmentLight(mips, diff.astype(np.float32))

    def parameters(self):
        return list(self.spec_mips) + [self.diffuse]

    def copy(self) -> "EnvironmentLight":
        return EnvironmentLight([m.copy() for m in self.spec_mips],
                                self.diffuse.copy())

    def zero_grads(self) -> EnvGrads:
        return EnvGrads([np.zeros(m.shape) for m in self.spec_mips],
                        np.zeros(self.diffuse.shape))

    def sample_specular(self, dirs, roughness):
        """Trilinear lookup: bilinear within mips, linear across levels.

        Args:
            dirs: (n, 3) unit reflect directions.
            roughness: (n,) in [0, 1].
        Returns:
            (values (n, 3), cache)
        """
        dirs = np.asarray(dirs, dtype=np.float64)
        rough = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0)
        L = self.levels
        f = rough * (L - 1)
        l0 = np.minimum(np.floor(f).astype(np.int64), L - 1)
        fl = f - l0
        l1 = np.minimum(l0 + 1, L - 1)

        vals = np.zeros(dirs.shape[:-1] + (3,))
        level_caches = []
        for level in range(L):
            w = np.where(l0 == level, 1.0 - fl, 0.0) \
                + np.where(l1 == level, fl, 0.0)
            idx = np.flatnonzero(w)
            if idx.size == 0:
                level_caches.append(None)
                continue
            sub, sc = sample_equirect(self.spec_mips[level], dirs[idx])
            vals[idx] += w[idx, None] * sub
            level_caches.append((idx, w[idx], sub, sc))
        cache = (level_caches, l0, l1, fl, rough, L)
        return vals, cache

    def sample_specular_grad(self, cache, upstream, grads: EnvGrads):
        """Adjoint of sample_specular; scatters into grads.spec_mips.

        Returns:
            (ddirs (n, 3), droughness (n,))
        """
        level_caches, l0, l1, fl, rough, L = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        n = upstream.shape[0]
        ddirs = np.zeros((n, 3))
        # d(level lerp)/dfl = val(l1) - val(l0); recovered from the per-level
        # partial sums below.
        val_l0 = np.zeros((n, 3))
        val_l1 = np.zeros((n, 3))
        for level in range(L):
            lc = level_caches[level]
            if lc is None:
                continue
            idx, w, sub, sc = lc
            dd = sample_equirect_grad(sc, upstream[idx] * w[:, None],
                                      grads.spec_mips[level])
            ddirs[idx] += dd
            m0 = l0[idx] == level
            val_l0[idx[m0]] = sub[m0]
            m1 = l1[idx] == level
            val_l1[idx[m1]] = sub[m1]
        dfl = np.sum(upstream * (val_l1 - val_l0), axis=-1)
        interior = (rough > 0.0) & (rough < 1.0) & (l0 != l1)
        drough = np.where(interior, dfl * (L - 1), 0.0)
        return ddirs, drough

    def sample_diffuse(self, dirs):
        """Bilinear irradiance lookup at unit normals; returns (vals, cache)."""
        return sample_equirect(self.diffuse, np.asarray(dirs, np.float64))

    def sample_diffuse_grad(self, cache, upstream, grads: EnvGrads):
        return sample_equirect_grad(cache, upstream, grads.diffuse)


def hammersley(n: int) -> np.ndarray:
    """First n points of the Hammersley set in [0,1)^2."""
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = ((bits << np.uint32(16)) | (bits >> np.uint32(16)))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) \
        | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) \
        | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) \
        | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) \
        | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    vdc = bits.astype(np.float64) * 2.3283064365386963e-10
    return np.stack([i.astype(np.float64) / n, vdc], axis=1)


def _smith_g1_ibl(cos_v, k):
    return cos_v / (cos_v * (1.0 - k) + k)


class BrdfLut:
    """Split-sum scale/bias table over (cos_theta, roughness).

    table[j, i] holds (A, B) for cos = (i+0.5)/res, rough = (j+0.5)/res.
    The specular response of a material with Fresnel F0 under a prefiltered
    environment is (F0 * A + B) * env.
    """

    def __init__(self, table: np.ndarray):
        if table.ndim != 3 or table.shape[2] != 2 \
                or table.shape[0] != table.shape[1]:
            raise ValueError("LUT table must be (res, res, 2)")
        self.table = np.asarray(table, dtype=np.float64)

    @property
    def resolution(self) -> int:
        return self.table.shape[0]

    @staticmethod
    def integrate_cell(cos_theta: float, roughness: float,
                       samples: int = 2048) -> "tuple[float, float]":
        """(A, B) for one (cos, roughness) pair by GGX importance sampling.

        Importance-samples half vectors from the GGX NDF over a Hammersley
        sequence; the D factor cancels against the pdf, leaving the Smith
        visibility and Fresnel-Schlick weights (k = roughness^2 / 2 for
        image-based lighting).
        """
        xi = hammersley(samples)
        alpha = roughness * roughness
        cos_v = max(cos_theta, 1e-8)
        sin_v = np.sqrt(max(0.0, 1.0 - cos_v * cos_v))
        V = np.array([sin_v, 0.0, cos_v])

        phi = TWO_PI * xi[:, 0]
        cos_h = np.sqrt((1.0 - xi[:, 1])
                        / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
        sin_h = np.sqrt(np.maximum(0.0, 1.0 - cos_h * cos_h))
        H = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h],
                     axis=1)
        VoH = H @ V
        Lv = 2.0 * VoH[:, None] * H - V
        NoL = Lv[:, 2]
        live = NoL > 0.0
        NoH = np.maximum(cos_h, 1e-8)
        VoH = np.maximum(VoH, 1e-8)

        k = alpha / 2.0
        G = _smith_g1_ibl(cos_v, k) * _smith_g1_ibl(np.maximum(NoL, 1e-8), k)
        g_vis = np.where(live, G * VoH / (NoH * cos_v), 0.0)
        fc = (1.0 - VoH) ** 5
        A = np.mean((1.0 - fc) * g_vis)
        B = np.mean(fc * g_vis)
        return float(A), float(B)

    @staticmethod
    def build(resolution: int = 64, samples: int = 2048) -> "BrdfLut":
        table = np.empty((resolution, resolution, 2))
        for j in range(resolution):
            r = (j + 0.5) / resolution
            for i in range(resolution):
                c = (i + 0.5) / resolution
                table[j, i] = BrdfLut.integrate_cell(c, r, samples)
        return BrdfLut(table)

    def sample(self, cos_theta, roughness):
        """Bilinear lookup clamped to cell centers; returns (A, B, cache)."""
        res = self.resolution
        x = np.clip(np.asarray(cos_theta, np.float64) * res - 0.5,
                    0.0, res - 1.0)
        y = np.clip(np.asarray(roughness, np.float64) * res - 0.5,
                    0.0, res - 1.0)
        i0 = np.floor(x).astype(np.int64)
        j0 = np.floor(y).astype(np.int64)
        fx = x - i0
        fy = y - j0
        i1 = np.minimum(i0 + 1, res - 1)
        j1 = np.minimum(j0 + 1, res - 1)
        flat = self.table.reshape(res * res, 2)
        t00 = flat[j0 * res + i0]
        t01 = flat[j0 * res + i1]
        t10 = flat[j1 * res + i0]
        t11 = flat[j1 * res + i1]
        vals = lerp_corners(t00, t01, t10, t11, fx[..., None], fy[..., None])
        cache = (cos_theta, roughness, (t00, t01, t10, t11), fx, fy, res)
        return vals[..., 0], vals[..., 1], cache

    def sample_grad(self, cache, dA, dB):
        """Adjoint of sample; returns (dcos_theta, droughness)."""
        cos_theta, roughness, corners, fx, fy, res = cache
        t00, t01, t10, t11 = corners
        up = np.stack([dA, dB], axis=-1)
        fx_e = fx[..., None]
        fy_e = fy[..., None]
        dfx = np.sum(up * ((1.0 - fy_e) * (t01 - t00) + fy_e * (t11 - t10)),
                     axis=-1)
        dfy = np.sum(up * ((t10 - t00) + fx_e * ((t11 - t10) - (t01 - t00))),
                     axis=-1)
        x = np.asarray(cos_theta, np.float64) * res - 0.5
        y = np.asarray(roughness, np.float64) * res - 0.5
        dcos = np.where((x > 0.0) & (x < res - 1.0), dfx * res, 0.0)
        drough = np.where((y > 0.0) & (y < res - 1.0), dfy * res, 0.0)
        return dcos, drough
