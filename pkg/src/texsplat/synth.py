"""Procedural scenes, camera rigs and dataset rendering.

Everything here is seeded and deterministic; tests and the CLI use these
builders as ground truth for fitting, gradient checks and benchmarks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .environment import BrdfLut, EnvironmentLight, equirect_dirs
from .imgio import write_png
from .losses import linear_to_display
from .rasterize import render_forward
from .scene import Scene, save_manifest, save_scene
from .shading import shade_gbuffer
from .splats import Camera
from .textures import MaterialTextureSet, TextureConfig, TextureMap


def camera_ring(count: int, radius: float = 3.0, tilt_deg: float = 30.0,
                target=(0.0, 0.0, 0.0), width: int = 64, height: int = 64,
                fov_deg: float = 45.0, near: float = 0.05,
                far: float = 100.0):
    """Cameras on a cone around +z looking at the target.

    The ring sits at polar angle tilt_deg from the +z axis, so a scene
    built on the z = 0 plane (facing +z) stays front-facing in all views.
    """
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(count):
        phi = 2.0 * np.pi * k / count + 0.37
        theta = np.deg2rad(tilt_deg)
        offset = radius * np.array([np.sin(theta) * np.cos(phi),
                                    np.sin(theta) * np.sin(phi),
                                    np.cos(theta)])
        cams.append(Camera.look_at(
            target + offset, target, up=(0.0, 1.0, 0.0),
            fov_x_deg=fov_deg, width=width, height=height,
            near=near, far=far))
    return cams


def _lobe_environment(rng, height: int = 16, levels: int = 4,
                      ambient_range=(0.15, 0.4)) -> EnvironmentLight:
    """Smooth positive radiance from a few random cosine lobes."""
    dirs = equirect_dirs(height, 2 * height).reshape(-1, 3)
    base = np.full((dirs.shape[0], 3), rng.uniform(*ambient_range, size=3))
    for _ in range(3):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        amp = rng.uniform(0.3, 1.6, size=3)
        power = rng.uniform(1.0, 4.0)
        cos = np.maximum(dirs @ axis, 0.0)
        base += amp * (cos ** power)[:, None]
    base = base.reshape(height, 2 * height, 3)
    return EnvironmentLight.from_base(base, levels=levels)


def _frame_from_normal(normal, ref, rng_angle=0.0):
    """Orthonormal (t_u, t_v) with t_u x t_v = normal."""
    n = normal / np.linalg.norm(normal)
    t_u = ref - np.dot(ref, n) * n
    t_u /= np.linalg.norm(t_u)
    if rng_angle != 0.0:
        t_v0 = np.cross(n, t_u)
        t_u = np.cos(rng_angle) * t_u + np.sin(rng_angle) * t_v0
    t_v = np.cross(n, t_u)
    return t_u, t_v


def _random_texture(rng, resolution: int,
                    normal_spread: float = 0.15) -> MaterialTextureSet:
    T = resolution
    lo, hi = 0.5 - normal_spread, 0.5 + normal_spread
    return MaterialTextureSet(
        albedo=TextureMap(
            rng.uniform(0.15, 0.9, (T, T, 3)).astype(np.float32), "albedo"),
        roughness=TextureMap(
            rng.uniform(0.25, 0.85, (T, T, 1)).astype(np.float32),
            "roughness"),
        metallic=TextureMap(
            rng.uniform(0.0, 0.3, (T, T, 1)).astype(np.float32), "metallic"),
        tangent_normal=TextureMap(
            rng.uniform(lo, hi, (T, T, 2)).astype(np.float32),
            "tangent_normal"),
    )


def make_plane_scene(nx: int = 3, ny: int = 3, texture_res: int = 4,
                     seed: int = 7, sh_degree: int = 1,
                     textured: bool = True, env_levels: int = 4,
                     metallic_max: float = 0.3,
                     normal_spread: float = 0.15) -> Scene:
    """Curved patch of overlapping splats facing +z, lit by a smooth env.

    A grid of nx * ny splats tiles a box on a shallow paraboloid. With
    textured=False every chart is 1x1 (constant materials).
    """
    rng = np.random.default_rng(seed)
    P = nx * ny
    half_x = 0.8 if nx > 1 else 0.0
    half_y = 0.8 * ny / nx if ny > 1 else 0.0
    xs = np.linspace(-half_x, half_x, nx) if nx > 1 else np.zeros(1)
    ys = np.linspace(-half_y, half_y, ny) if ny > 1 else np.zeros(1)
    pitch = max(xs[1] - xs[0] if nx > 1 else 1.0,
                ys[1] - ys[0] if ny > 1 else 1.0)

    positions = np.empty((P, 3))
    tangent_u = np.empty((P, 3))
    tangent_v = np.empty((P, 3))
    i = 0
    for gy in ys:
        for gx in xs:
            x = gx + rng.uniform(-0.05, 0.05) * pitch
            y = gy + rng.uniform(-0.05, 0.05) * pitch
            z = 0.12 * (x * x + y * y)
            positions[i] = (x, y, z)
            # Paraboloid normal, +z facing.
            n = np.array([-0.24 * x, -0.24 * y, 1.0])
            tangent_u[i], tangent_v[i] = _frame_from_normal(
                n, np.array([1.0, 0.0, 0.0]),
                rng.uniform(-0.4, 0.4))
            i += 1

    scales = rng.uniform(0.6, 0.9, (P, 2)) * pitch
    opacities = rng.uniform(0.7, 0.95, P)
    K = (sh_degree + 1) ** 2
    sh = np.zeros((P, K, 3))
    sh[:, 0, :] = rng.uniform(0.05, 0.25, (P, 3))
    if K > 1:
        sh[:, 1:, :] = rng.uniform(-0.03, 0.03, (P, K - 1, 3))

    T = texture_res if textured else 1
    textures = []
    for k in range(P):
        if textured:
            tex = _random_texture(rng, T, normal_spread)
        else:
            tex = MaterialTextureSet.constant(
                albedo=rng.uniform(0.2, 0.85, 3),
                roughness=rng.uniform(0.3, 0.8),
                metallic=rng.uniform(0.0, metallic_max),
                resolution=1)
        textures.append(tex)

    return Scene(
        positions=positions, tangent_u=tangent_u, tangent_v=tangent_v,
        scales=scales, opacities=opacities, sh=sh, sh_degree=sh_degree,
        textures=textures, texture_config=TextureConfig(resolution=T),
        environment=_lobe_environment(rng, levels=env_levels),
        background=np.array([0.02, 0.02, 0.03]),
    )


def make_gradcheck_scene(seed: int = 11) -> Scene:
    """8 splats with 4x4 textures, tuned for finite differences: interior
    texel values, strictly positive indirect radiance, nothing at a clamp."""
    scene = make_plane_scene(nx=4, ny=2, texture_res=4, seed=seed,
                             sh_degree=1, textured=True, env_levels=3)
    scene.opacities = np.clip(scene.opacities, 0.3, 0.9)
    return scene


def make_fit_scene(seed: int = 5, texture_res: int = 4) -> Scene:
    """32-splat ground truth with spatially varying albedo and normals."""
    return make_plane_scene(nx=8, ny=4, texture_res=texture_res, seed=seed,
                            sh_degree=1, textured=True, env_levels=4,
                            metallic_max=0.1, normal_spread=0.3)


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly uniform unit directions."""
    k = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * k + 1.0) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def make_shell_scene(n_splats: int = 10000, texture_res: int = 16,
                     seed: int = 3, radius: float = 1.0) -> Scene:
    """Dense opaque sphere shell for sampling benchmarks.

    Splats tile the sphere with heavy overlap so most fragments are
    occluded, which is the regime where texture-fetch cost dominates.
    """
    rng = np.random.default_rng(seed)
    normals = fibonacci_sphere(n_splats)
    positions = radius * normals
    tangent_u = np.empty((n_splats, 3))
    tangent_v = np.empty((n_splats, 3))
    ref = np.array([0.31, 0.53, 0.79])
    for i in range(n_splats):
        n = normals[i]
        r = ref if abs(np.dot(ref, n)) < 0.95 else np.array([1.0, 0.0, 0.0])
        tangent_u[i], tangent_v[i] = _frame_from_normal(n, r)

    area = 4.0 * np.pi * radius * radius / n_splats
    s = 1.3 * np.sqrt(area)
    scales = np.full((n_splats, 2), s) * rng.uniform(0.9, 1.1,
                                                     (n_splats, 2))
    opacities = np.full(n_splats, 0.95)
    sh = np.zeros((n_splats, 1, 3))
    sh[:, 0, :] = 0.1
    textures = [_random_texture(rng, texture_res) for _ in range(n_splats)]
    return Scene(
        positions=positions, tangent_u=tangent_u, tangent_v=tangent_v,
        scales=scales, opacities=opacities, sh=sh, sh_degree=0,
        textures=textures,
        texture_config=TextureConfig(resolution=texture_res),
        environment=None,
        background=np.zeros(3),
    )


def bench_cameras(count: int = 3, width: int = 200, height: int = 200):
    return camera_ring(count, radius=2.8, tilt_deg=55.0, width=width,
                       height=height, fov_deg=42.0)


def render_targets(scene: Scene, cameras, lut: BrdfLut = None,
                   threads: int = 1):
    """Display-space renders of the scene, one per camera."""
    lut = lut or BrdfLut.build()
    out = []
    for cam in cameras:
        gbuf = render_forward(scene, cam, threads=threads)
        shade = shade_gbuffer(gbuf, cam, scene.environment, lut,
                              mesh=scene.mesh, background=scene.background)
        out.append(linear_to_display(shade.color))
    return out


def write_dataset(out_dir, scene: Scene, cameras, lut: BrdfLut = None,
                  threads: int = 1):
    """Save the scene, rendered target PNGs and a camera manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out_dir / "scene")
    targets = render_targets(scene, cameras, lut, threads)
    names = []
    for i, img in enumerate(targets):
        name = f"view_{i:03d}.png"
        write_png(out_dir / name, np.clip(img, 0.0, 1.0))
        names.append(name)
    save_manifest(out_dir / "manifest.json", cameras, names)
    return out_dir
