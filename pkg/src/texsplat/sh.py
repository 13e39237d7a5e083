"""Real spherical harmonics up to degree 3 for view-dependent radiance.

Basis functions use the standard real-SH constants with Condon-Shortley
signs folded in. Directions must be unit length. Radiance evaluation clamps
to zero per channel; there is no DC offset.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}]")
    return (degree + 1) ** 2


def basis(dirs, degree: int) -> np.ndarray:
    """Evaluate the SH basis at unit directions.

    Args:
        dirs: (..., 3) unit vectors.
    Returns:
        (..., (degree+1)^2) basis values.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    n = num_coeffs(degree)
    out = np.empty(dirs.shape[:-1] + (n,))
    out[..., 0] = C0
    if degree >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * x * y * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def basis_grad(dirs, degree: int) -> np.ndarray:
    """Directional gradients of the SH basis.

    Returns:
        (..., (degree+1)^2, 3) with d(basis_k)/d(dir component).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    n = num_coeffs(degree)
    g = np.zeros(dirs.shape[:-1] + (n, 3))
    if degree >= 1:
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 4, :] = C2[0] * np.stack([y, x, zero], axis=-1)
        g[..., 5, :] = C2[1] * np.stack([zero, z, y], axis=-1)
        g[..., 6, :] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1)
        g[..., 7, :] = C2[3] * np.stack([z, zero, x], axis=-1)
        g[..., 8, :] = C2[4] * np.stack([2 * x, -2 * y, zero], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, :] = C3[0] * np.stack(
            [6 * x * y, 3 * xx - 3 * yy, zero], axis=-1)
        g[..., 10, :] = C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
        g[..., 11, :] = C3[2] * np.stack(
            [-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=-1)
        g[..., 12, :] = C3[3] * np.stack(
            [-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=-1)
        g[..., 13, :] = C3[4] * np.stack(
            [4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=-1)
        g[..., 14, :] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy],
                                         axis=-1)
        g[..., 15, :] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero],
                                         axis=-1)
    return g


def eval_radiance(coeffs, dirs, degree: int):
    """Per-channel radiance max(0, sum_k c_k * basis_k(dir)).

    Args:
        coeffs: (..., K, 3) SH coefficients, K = (degree+1)^2.
        dirs: (..., 3) unit directions (broadcast against coeffs).
    Returns:
        (value (..., 3), raw (..., 3)) where raw is the unclamped sum.
    """
    b = basis(dirs, degree)
    raw = np.einsum("...k,...kc->...c", b, np.asarray(coeffs, dtype=np.float64))
    return np.maximum(raw, 0.0), raw


def eval_radiance_grad(coeffs, dirs, degree: int, raw, upstream):
    """Adjoint of eval_radiance.

    Args:
        raw: unclamped sums from the forward pass.
        upstream: (..., 3) gradient on the clamped value.
    Returns:
        (dcoeffs (..., K, 3), ddirs (..., 3))
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    live = np.where(np.asarray(raw) > 0.0, np.asarray(upstream, dtype=np.float64),
                    0.0)
    b = basis(dirs, degree)
    dcoeffs = b[..., :, None] * live[..., None, :]
    gb = basis_grad(dirs, degree)  # (..., K, 3)
    # ddir_j = sum_c live_c * sum_k coeffs_kc * dbasis_k/ddir_j
    ddirs = np.einsum("...c,...kc,...kj->...j", live, coeffs, gb)
    return dcoeffs, ddirs
