"""Planar Gaussian primitives, cameras, and closed-form ray intersection.

A splat is a textured elliptical disk: center p, orthonormal tangent frame
(t_u, t_v), per-axis scales (s_u, s_v), an opacity, a texture handle and
spherical-harmonic coefficients for view-dependent indirect radiance.

The object-to-world homography places splat-local coordinates (u, v) at

    P(u, v) = p + u * s_u * t_u + v * s_v * t_v,

i.e. H = [s_u*t_u | s_v*t_v | 0 | p] over homogeneous (u, v, 1, 1)^T.
Ray intersection works in homogeneous plane space: the pencil of planes
through the pixel ray, expressed on the splat, intersects in a line whose
closed form only needs two 4-vectors h_u, h_v (see ray_splat_intersect).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Rays with |denominator| at or below this are treated as parallel to the
# splat plane and marked invalid.
DENOM_EPS = 1e-9
# Fragments with effective opacity below 1/255 contribute nothing visible
# and are skipped by the rasterizer.
ALPHA_CUTOFF = 1.0 / 255.0
# Splat-local support radius in units of sigma; the texture chart and the
# screen bounding rect both extend this far.
SUPPORT_SIGMA = 3.0

# Projective flattening composed into M = PROJ_FLATTEN @ W @ H. Row 3
# duplicates view-space z so the 4th homogeneous component of a transformed
# point is its depth; the pixel planes (-1,0,0,x) and (0,-1,0,y) then encode
# X/Z = x and Y/Z = y, the perspective ray through camera-plane (x, y).
PROJ_FLATTEN = np.array(
    [[1.0, 0.0, 0.0, 0.0],
     [0.0, 1.0, 0.0, 0.0],
     [0.0, 0.0, 1.0, 0.0],
     [0.0, 0.0, 1.0, 0.0]]
)


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-view transform.

    View space: x right, y down, z forward (positive depth in front).
    Pixel (px, py) covers camera-plane coordinates
    x = (px + 0.5 - cx) / fx, y = (py + 0.5 - cy) / fy at its center.
    """

    world_to_view: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_view = np.asarray(self.world_to_view, dtype=np.float64)
        if self.world_to_view.shape != (4, 4):
            raise ValueError("world_to_view must be 4x4")
        R = self.world_to_view[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_view rotation block is not orthonormal")
        if not np.allclose(self.world_to_view[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("world_to_view last row must be (0,0,0,1)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fov_x_deg=60.0,
                width=256, height=256, near=0.01, far=100.0) -> "Camera":
        """Build a camera at `eye` looking toward `target`."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("eye and target coincide")
        fwd = fwd / n
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("up is parallel to the view direction")
        right = right / rn
        down = np.cross(fwd, right)  # completes x-right / y-down / z-forward
        R = np.stack([right, down, fwd])
        t = -R @ eye
        w2v = np.eye(4)
        w2v[:3, :3] = R
        w2v[:3, 3] = t
        fx = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return Camera(w2v, fx=fx, fy=fx, cx=0.5 * width, cy=0.5 * height,
                      width=width, height=height, near=near, far=far)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_view[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        R = self.world_to_view[:3, :3]
        t = self.world_to_view[:3, 3]
        return -R.T @ t

    def pixel_plane_coords(self):
        """Per-axis camera-plane coordinates of all pixel centers.

        Returns:
            xs: (width,) x for each column, ys: (height,) y for each row.
        """
        xs = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        return xs, ys

    def ray_dirs_world(self, x, y) -> np.ndarray:
        """Unit world-space ray directions through camera-plane (x, y).

        Args:
            x, y: broadcastable arrays of camera-plane coordinates.
        Returns:
            (..., 3) unit directions.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        d_view = np.stack(np.broadcast_arrays(x, y, np.ones_like(x + y)), axis=-1)
        d_world = d_view @ self.rotation  # == R^T applied to each row
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


@dataclass
class Splat:
    """One textured planar Gaussian primitive."""

    position: np.ndarray      # (3,) world center
    tangent_u: np.ndarray     # (3,) unit
    tangent_v: np.ndarray     # (3,) unit, orthogonal to tangent_u
    scale: np.ndarray         # (2,) positive (s_u, s_v)
    opacity: float            # in [0, 1]
    texture_id: int = -1      # index into the scene texture table, -1 = none
    indirect_sh: np.ndarray = field(
        default_factory=lambda: np.zeros((1, 3)))  # (n_coeff, 3)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.indirect_sh = np.asarray(self.indirect_sh, dtype=np.float64)

    def validate(self):
        if abs(np.linalg.norm(self.tangent_u) - 1.0) > 1e-6:
            raise ValueError("tangent_u is not unit length")
        if abs(np.linalg.norm(self.tangent_v) - 1.0) > 1e-6:
            raise ValueError("tangent_v is not unit length")
        if abs(float(self.tangent_u @ self.tangent_v)) > 1e-6:
            raise ValueError("tangent frame is not orthogonal")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")


@dataclass
class SplatHomography:
    """Object-to-world homography H and its view composition WH = W @ H."""

    H: np.ndarray   # (4,4)
    WH: np.ndarray  # (4,4)


@dataclass
class IntersectionFrame:
    """Per-pixel ray-splat intersection results (vectorized over pixels).

    u, v are splat-local coordinates in units of (s_u, s_v); z is view-space
    depth of the hit point. Entries with valid == False hold unspecified
    values and must be ignored.
    """

    h_u: np.ndarray   # (..., 4)
    h_v: np.ndarray   # (..., 4)
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    valid: np.ndarray


def build_homography(splat: Splat, camera: Camera) -> SplatHomography:
    """Assemble H = [s_u*t_u | s_v*t_v | 0 | p] and WH = world_to_view @ H."""
    H = np.zeros((4, 4))
    H[:3, 0] = splat.scale[0] * splat.tangent_u
    H[:3, 1] = splat.scale[1] * splat.tangent_v
    H[:3, 3] = splat.position
    H[3, 3] = 1.0
    return SplatHomography(H=H, WH=camera.world_to_view @ H)


def build_homography_batch(positions, tangent_u, tangent_v, scales,
                           camera: Camera) -> np.ndarray:
    """Vectorized WH for P splats.

    Args:
        positions: (P,3), tangent_u/tangent_v: (P,3), scales: (P,2).
    Returns:
        (P,4,4) stack of W @ H matrices.
    """
    P = positions.shape[0]
    H = np.zeros((P, 4, 4))
    H[:, :3, 0] = scales[:, 0:1] * tangent_u
    H[:, :3, 1] = scales[:, 1:2] * tangent_v
    H[:, :3, 3] = positions
    H[:, 3, 3] = 1.0
    return np.einsum("ij,pjk->pik", camera.world_to_view, H)


def ray_splat_intersect(hom: SplatHomography, camera: Camera, x, y
                        ) -> IntersectionFrame:
    """Intersect pixel rays with a splat plane in homogeneous plane space.

    The pixel ray through camera-plane (x, y) is the intersection of the two
    view-space planes X = x*Z and Y = y*Z. Pulled back to splat-local
    coordinates through M = PROJ_FLATTEN @ WH these become

        h_u = M^T (-1, 0, 0, x)^T,   h_v = M^T (0, -1, 0, y)^T,

    and the hit point solves h_u . (u, v, 1, 1) = h_v . (u, v, 1, 1) = 0.
    Column 2 of H is zero, so the 2x2 system involves only components
    0, 1, 3 of each plane:

        u = (h_u[1] h_v[3] - h_u[3] h_v[1]) / D
        v = (h_u[3] h_v[0] - h_u[0] h_v[3]) / D
        D = h_u[0] h_v[1] - h_u[1] h_v[0]

    Depth is the view z of the hit point, linear in (u, v). Intersections
    with |D| <= DENOM_EPS (ray parallel to the plane) or z <= near are
    invalid.

    Args:
        hom: splat homography (uses hom.WH).
        camera: supplies near plane.
        x, y: camera-plane coordinates, broadcastable arrays or scalars.
    Returns:
        IntersectionFrame of the broadcast shape.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    M = PROJ_FLATTEN @ hom.WH  # rows 0,1,2 of WH then row 2 again

    # h_u[j] = -M[0,j] + x * M[3,j]; h_v[j] = -M[1,j] + y * M[3,j].
    hu0 = x * M[3, 0] - M[0, 0]
    hu1 = x * M[3, 1] - M[0, 1]
    hu3 = x * M[3, 3] - M[0, 3]
    hv0 = y * M[3, 0] - M[1, 0]
    hv1 = y * M[3, 1] - M[1, 1]
    hv3 = y * M[3, 3] - M[1, 3]

    denom = hu0 * hv1 - hu1 * hv0
    ok = np.abs(denom) > DENOM_EPS
    safe = np.where(ok, denom, 1.0)
    u = (hu1 * hv3 - hu3 * hv1) / safe
    v = (hu3 * hv0 - hu0 * hv3) / safe

    # Depth is linear on the plane: z = c0 + cu*u + cv*v in view space.
    z = M[2, 3] + M[2, 0] * u + M[2, 1] * v
    valid = ok & (z > camera.near)

    zeros = np.zeros_like(x)
    h_u = np.stack([hu0, hu1, zeros, hu3], axis=-1)
    h_v = np.stack([hv0, hv1, zeros, hv3], axis=-1)
    return IntersectionFrame(h_u=h_u, h_v=h_v, u=u, v=v, z=z, valid=valid)


def intersect_backward(M, x, y, du, dv, dz):
    """Adjoint of ray_splat_intersect w.r.t. the folded matrix M.

    Recomputes the forward intermediates (cheap) and pushes upstream
    gradients (du, dv, dz) per pixel back to a single dM. Pixels where the
    forward pass was invalid must carry zero upstream gradient.

    Args:
        M: (4,4) folded matrix PROJ_FLATTEN @ WH.
        x, y: (n,) camera-plane coordinates of the contributing pixels.
        du, dv, dz: (n,) upstream gradients.
    Returns:
        dM: (4,4). Rows 0,1,3 and columns 0,1,3 can be nonzero.
    """
    hu0 = x * M[3, 0] - M[0, 0]
    hu1 = x * M[3, 1] - M[0, 1]
    hu3 = x * M[3, 3] - M[0, 3]
    hv0 = y * M[3, 0] - M[1, 0]
    hv1 = y * M[3, 1] - M[1, 1]
    hv3 = y * M[3, 3] - M[1, 3]
    denom = hu0 * hv1 - hu1 * hv0
    u = (hu1 * hv3 - hu3 * hv1) / denom
    v = (hu3 * hv0 - hu0 * hv3) / denom

    # z = M[2,3] + M[2,0]*u + M[2,1]*v contributes to du/dv and to dM row 2.
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

    dM = np.zeros((4, 4))
    for j, (dhu_j, dhv_j) in enumerate(
            ((dhu0, dhv0), (dhu1, dhv1), (dhu3, dhv3))):
        col = (0, 1, 3)[j]
        dM[0, col] = -dhu_j.sum()
        dM[1, col] = -dhv_j.sum()
        dM[3, col] = (x * dhu_j + y * dhv_j).sum()
    dM[2, 0] = (dz * u).sum()
    dM[2, 1] = (dz * v).sum()
    dM[2, 3] = dz.sum()
    return dM


def fold_matrix_backward(dM):
    """Map a gradient on M = PROJ_FLATTEN @ WH back to WH."""
    dWH = dM[:3].copy()
    dWH[2] += dM[3]
    return np.vstack([dWH, np.zeros((1, 4))])


def homography_param_backward(dWH, splat: Splat, camera: Camera):
    """Push a WH gradient back to splat parameters.

    WH = W @ H with H columns (s_u*t_u, s_v*t_v, 0, p), so dH = W^T dWH and
    the parameter gradients read off the columns of dH.

    Returns:
        (dposition (3,), dtangent_u (3,), dtangent_v (3,), dscale (2,))
    """
    dH = camera.world_to_view.T @ dWH
    dp = dH[:3, 3]
    dsu = float(splat.tangent_u @ dH[:3, 0])
    dsv = float(splat.tangent_v @ dH[:3, 1])
    dtu = splat.scale[0] * dH[:3, 0]
    dtv = splat.scale[1] * dH[:3, 1]
    return dp, dtu, dtv, np.array([dsu, dsv])


def gaussian_weight(u, v):
    """Unnormalized Gaussian falloff exp(-(u^2 + v^2) / 2)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.exp(-0.5 * (u * u + v * v))


def effective_opacity(splat: Splat, frame: IntersectionFrame):
    """Per-fragment alpha = opacity * gaussian_weight; 0 where invalid."""
    a = splat.opacity * gaussian_weight(frame.u, frame.v)
    return np.where(frame.valid, a, 0.0)


def geometric_normal(splat: Splat) -> np.ndarray:
    """Unnormalized plane normal t_u x t_v (unit when the frame is exact)."""
    return np.cross(splat.tangent_u, splat.tangent_v)


def orthonormalize_tangents(tangent_u, tangent_v):
    """Gram-Schmidt re-orthonormalization of (P,3) tangent pairs.

    tangent_u is normalized first; tangent_v has its tangent_u component
    removed and is then normalized. Optimizer steps call this to return
    frames to the constraint manifold.
    """
    tu = tangent_u / np.linalg.norm(tangent_u, axis=-1, keepdims=True)
    tv = tangent_v - np.sum(tu * tangent_v, axis=-1, keepdims=True) * tu
    tv = tv / np.linalg.norm(tv, axis=-1, keepdims=True)
    return tu, tv
