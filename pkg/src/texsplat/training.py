"""End-to-end fitting: Adam on splats, texel grids and the environment.

The schedule has two stages. Stage 1 fits geometry and per-splat material
means with 1x1 textures (and prunes nearly transparent splats); at the
boundary every chart is broadcast to the target resolution, texel moments
are reset, and stage 2 refines the full grids jointly. Because constant
charts sample exactly to their value, the broadcast does not change the
rendered image.

All gradients come from the hand-written backward passes in rasterize,
shading and losses; this module owns parameter bookkeeping (update rule,
projections, pruning) plus a finite-difference checker over the full
render -> shade -> display chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .environment import BrdfLut, EnvironmentLight
from .losses import (LossWeights, image_loss, linear_to_display,
                     linear_to_display_grad, psnr, depth_to_normal,
                     depth_to_normal_backward, normal_consistency_loss,
                     smoothness_loss)
from .rasterize import prepare, render_forward, splat_backward
from .scene import Scene
from .shading import shade_backward, shade_gbuffer
from .textures import MaterialTextureSet

# Minimum coverage for a pixel to join the geometric regularizers.
REG_COVER_ALPHA = 0.5
SCALE_FLOOR = 1e-6


@dataclass
class TrainConfig:
    """Optimization schedule and learning rates."""

    iterations: int = 400
    stage_split: int = -1            # -1: iterations // 2
    texture_resolution: int = 4
    use_textures: bool = True        # False keeps 1x1 charts throughout
    lr_position: float = 1.6e-4      # scaled by initial scene extent
    lr_frame: float = 1e-3
    lr_scale: float = 1e-3
    lr_opacity: float = 5e-2
    lr_texel: float = 2.5e-3
    lr_sh: float = 2.5e-3
    lr_env: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    prune_interval: int = 500
    prune_opacity: float = 0.005
    optimize_environment: bool = True
    optimize_geometry: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    threads: int = 1

    def split_iteration(self) -> int:
        return self.iterations // 2 if self.stage_split < 0 \
            else self.stage_split


class Adam:
    """Adam with per-parameter state keyed by name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray,
             lr: float) -> np.ndarray:
        """One update; returns the new parameter value (no projections)."""
        grad = np.asarray(grad, dtype=np.float64)
        if name not in self.state:
            self.state[name] = [np.zeros(param.shape), np.zeros(param.shape),
                                0]
        m, v, t = self.state[name]
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.state[name] = [m, v, t]
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def keep_rows(self, name: str, keep: np.ndarray):
        if name in self.state:
            m, v, t = self.state[name]
            self.state[name] = [m[keep], v[keep], t]

    def reset(self, name: str):
        self.state.pop(name, None)


def _texel_tensor(scene: Scene) -> np.ndarray:
    """Stack all charts into one (P, T, T, 7) float32 parameter."""
    return np.stack([t.combined() for t in scene.textures], axis=0)


def _write_texels(scene: Scene, texels: np.ndarray):
    scene.textures = [MaterialTextureSet.from_combined(texels[k])
                      for k in range(texels.shape[0])]


def _normal_image(gbuf):
    """Unit normals from the blended buffer plus the normalize cache."""
    nb = gbuf.normal
    mag = np.linalg.norm(nb, axis=-1, keepdims=True)
    ok = mag[..., 0] > 1e-12
    unit = np.where(ok[..., None], nb / np.maximum(mag, 1e-30), 0.0)
    return unit, ok, (nb, mag, unit, ok)


def _normal_image_backward(cache, upstream):
    nb, mag, unit, ok = cache
    dn = (upstream - unit * np.sum(unit * upstream, axis=-1, keepdims=True)) \
        / np.maximum(mag, 1e-30)
    dn[~ok] = 0.0
    return dn


def compute_step(scene: Scene, camera, target_display, lut: BrdfLut,
                 weights: LossWeights = None, threads: int = 1):
    """Full forward + backward for one view.

    Returns:
        (metrics dict, SceneGrads, EnvGrads)
    """
    weights = weights or LossWeights()
    prep = prepare(scene, camera, "perprim")
    gbuf, tape = render_forward(scene, camera, "perprim", threads=threads,
                                with_tape=True, prep=prep)
    shade = shade_gbuffer(gbuf, camera, scene.environment, lut,
                          mesh=scene.mesh, background=scene.background)
    disp = linear_to_display(shade.color)
    l_img, ddisp = image_loss(disp, target_display, weights.dssim)
    dcolor = linear_to_display_grad(shade.color, ddisp)
    dgbuf, env_grads = shade_backward(shade, camera, scene.environment, lut,
                                      dcolor)

    l_normal = 0.0
    l_smooth = 0.0
    if weights.normal > 0.0 or weights.smooth > 0.0:
        alpha = gbuf.alpha
        cover = alpha > REG_COVER_ALPHA
        n_img, n_ok, n_cache = _normal_image(gbuf)
        a_safe = np.maximum(alpha, 1e-30)
        zbar = np.where(cover, gbuf.depth / a_safe, 0.0)
        n_ref, d_ok, d_cache = depth_to_normal(zbar, camera, cover)

        dn_img = np.zeros_like(n_img)
        if weights.normal > 0.0:
            valid = n_ok & d_ok & cover
            l_normal, dnr, dnd = normal_consistency_loss(n_img, n_ref, valid)
            dn_img += weights.normal * dnr
            ddepth = depth_to_normal_backward(d_cache, weights.normal * dnd)
            dz = np.where(cover, ddepth, 0.0)
            dgbuf[..., 11] += dz / a_safe
            dgbuf[..., 12] -= np.where(cover, dz * zbar / a_safe, 0.0)
        if weights.smooth > 0.0:
            l_smooth, dns = smoothness_loss(n_img, target_display,
                                            n_ok & cover)
            dn_img += weights.smooth * dns
        dgbuf[..., 5:8] += _normal_image_backward(n_cache, dn_img)

    grads = splat_backward(scene, camera, prep, tape, dgbuf)
    loss = l_img + weights.normal * l_normal + weights.smooth * l_smooth
    metrics = {
        "loss": float(loss),
        "image": float(l_img),
        "normal": float(l_normal),
        "smooth": float(l_smooth),
        "psnr": psnr(disp, np.asarray(target_display)),
        "fragments": gbuf.fragment_count,
    }
    return metrics, grads, env_grads


def _prune(scene: Scene, texels, adam: Adam, threshold: float):
    keep = scene.opacities > threshold
    if keep.all() or keep.sum() == 0:
        return scene, texels
    scene.positions = scene.positions[keep]
    scene.tangent_u = scene.tangent_u[keep]
    scene.tangent_v = scene.tangent_v[keep]
    scene.scales = scene.scales[keep]
    scene.opacities = scene.opacities[keep]
    scene.sh = scene.sh[keep]
    scene.textures = [t for t, k in zip(scene.textures, keep) if k]
    texels = texels[keep]
    for name in ("positions", "tangent_u", "tangent_v", "scales",
                 "opacities", "sh", "texels"):
        adam.keep_rows(name, keep)
    return scene, texels


def broadcast_textures(scene: Scene, texels: np.ndarray,
                       resolution: int) -> np.ndarray:
    """Grow every chart to resolution x resolution, repeating values."""
    T0 = texels.shape[1]
    if T0 == resolution:
        return texels
    if resolution % T0 != 0:
        reps = resolution
        texels = texels[:, :1, :1, :]
    else:
        reps = resolution // T0
    grown = np.repeat(np.repeat(texels, reps, axis=1), reps, axis=2)
    grown = np.ascontiguousarray(grown[:, :resolution, :resolution, :],
                                 dtype=np.float32)
    scene.texture_config.resolution = resolution
    _write_texels(scene, grown)
    return grown


def train(scene: Scene, cameras, targets_display, config: TrainConfig,
          lut: BrdfLut = None, log_path=None):
    """Two-stage fit against display-space target images.

    Args:
        cameras: list of Camera, one per target.
        targets_display: list of (H, W, 3) display-space images.
    Returns:
        (fitted Scene, history list of per-iteration metric dicts)
    """
    scene = scene.copy()
    lut = lut or BrdfLut.build()
    adam = Adam(config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    extent = scene.world_extent()
    split = config.split_iteration()
    texels = _texel_tensor(scene)
    history = []

    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["iteration", "stage", "loss", "image", "normal",
                         "smooth", "psnr", "splats"])

    try:
        for it in range(config.iterations):
            stage = 1 if it < split else 2
            if it == split and config.use_textures:
                texels = broadcast_textures(scene, texels,
                                            config.texture_resolution)
                adam.reset("texels")

            view = int(rng.integers(0, len(cameras)))
            metrics, grads, env_grads = compute_step(
                scene, cameras[view], targets_display[view], lut,
                config.weights, config.threads)
            if not np.isfinite(metrics["loss"]):
                raise RuntimeError(
                    f"loss diverged at iteration {it}: {metrics['loss']}")

            if config.optimize_geometry:
                scene.positions = adam.step(
                    "positions", scene.positions, grads.positions,
                    config.lr_position * extent)
                scene.tangent_u = adam.step(
                    "tangent_u", scene.tangent_u, grads.tangent_u,
                    config.lr_frame)
                scene.tangent_v = adam.step(
                    "tangent_v", scene.tangent_v, grads.tangent_v,
                    config.lr_frame)
                scene.renormalize_tangents()
                scene.scales = np.maximum(
                    adam.step("scales", scene.scales, grads.scales,
                              config.lr_scale), SCALE_FLOOR)
                scene.opacities = np.clip(
                    adam.step("opacities", scene.opacities, grads.opacities,
                              config.lr_opacity), 0.0, 1.0)
            scene.sh = adam.step("sh", scene.sh, grads.sh, config.lr_sh)

            T = scene.texture_config.resolution
            tex_grad = np.zeros(texels.shape)
            for k in range(scene.num_splats):
                if grads.texels[k] is not None:
                    tex_grad[k] = grads.texels[k]
            new_tex = adam.step("texels", texels.astype(np.float64),
                                tex_grad, config.lr_texel)
            texels = np.clip(new_tex, 0.0, 1.0).astype(np.float32)
            _write_texels(scene, texels)

            if config.optimize_environment and scene.environment is not None:
                env = scene.environment
                for li, g in enumerate(env_grads.spec_mips):
                    env.spec_mips[li] = adam.step(
                        f"env_spec{li}", env.spec_mips[li].astype(np.float64),
                        g, config.lr_env).astype(np.float32)
                env.diffuse = adam.step(
                    "env_diffuse", env.diffuse.astype(np.float64),
                    env_grads.diffuse, config.lr_env).astype(np.float32)

            if stage == 1 and it > 0 and it % config.prune_interval == 0:
                scene, texels = _prune(scene, texels, adam,
                                       config.prune_opacity)

            row = {"iteration": it, "stage": stage, **metrics,
                   "splats": scene.num_splats}
            history.append(row)
            if writer is not None:
                writer.writerow([it, stage, metrics["loss"],
                                 metrics["image"], metrics["normal"],
                                 metrics["smooth"], metrics["psnr"],
                                 scene.num_splats])
    finally:
        if log_file is not None:
            log_file.close()

    return scene, history


def evaluate(scene: Scene, cameras, targets_display, lut: BrdfLut = None,
             threads: int = 1) -> dict:
    """Mean PSNR / SSIM of the current scene against targets."""
    from .losses import ssim as ssim_fn

    lut = lut or BrdfLut.build()
    ps, ss = [], []
    for cam, tgt in zip(cameras, targets_display):
        gbuf = render_forward(scene, cam, threads=threads)
        shade = shade_gbuffer(gbuf, cam, scene.environment, lut,
                              mesh=scene.mesh, background=scene.background)
        disp = linear_to_display(shade.color)
        ps.append(psnr(disp, tgt))
        ss.append(ssim_fn(np.clip(disp, 0.0, 1.0), np.clip(tgt, 0.0, 1.0)))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


# ---------------------------------------------------------------------------
# Finite-difference verification


def _objective(scene, camera, lut, weight_img) -> float:
    gbuf = render_forward(scene, camera)
    shade = shade_gbuffer(gbuf, camera, scene.environment, lut,
                          mesh=scene.mesh, background=scene.background)
    return float(np.sum(weight_img * linear_to_display(shade.color)))


def _analytic_grads(scene, camera, lut, weight_img):
    prep = prepare(scene, camera, "perprim")
    gbuf, tape = render_forward(scene, camera, with_tape=True, prep=prep)
    shade = shade_gbuffer(gbuf, camera, scene.environment, lut,
                          mesh=scene.mesh, background=scene.background)
    dcolor = linear_to_display_grad(shade.color, weight_img)
    dgbuf, env_grads = shade_backward(shade, camera, scene.environment, lut,
                                      dcolor)
    grads = splat_backward(scene, camera, prep, tape, dgbuf)
    return grads, env_grads


GRADCHECK_CLASSES = ("positions", "tangent_u", "tangent_v", "scales",
                     "opacities", "sh", "texels", "env_spec", "env_diffuse")


def gradcheck(scene: Scene, camera, lut: BrdfLut = None, classes=None,
              samples: int = 16, h: float = 1e-6, texel_h: float = 1e-4,
              seed: int = 0) -> dict:
    """Compare analytic gradients against central finite differences.

    The objective is a seeded weighted sum of the display-space image, so
    every parameter class feeds it through the full pipeline. float32
    parameters (texels, environment) use the realized grid step as the
    divisor.

    Returns:
        report dict: per-class {n, max_rel, max_abs} plus overall max_rel.
    """
    lut = lut or BrdfLut.build()
    classes = list(classes or GRADCHECK_CLASSES)
    rng = np.random.default_rng(seed)
    weight_img = rng.uniform(-1.0, 1.0, (camera.height, camera.width, 3))

    grads, env_grads = _analytic_grads(scene, camera, lut, weight_img)
    T = scene.texture_config.resolution
    texel_grad = np.zeros((scene.num_splats, T, T, 7))
    for k in range(scene.num_splats):
        if grads.texels[k] is not None:
            texel_grad[k] = grads.texels[k]

    report = {}
    texels = _texel_tensor(scene)

    def entry_stats(an, fd):
        err = abs(an - fd)
        if err <= 1e-7:
            return 0.0, err
        return err / max(abs(an), abs(fd), 1e-10), err

    def check_entries(param, grad, count, step, f32=False,
                      after_write=None, keep_interior=False):
        """FD a random subset of one flat parameter array."""
        flat_p = param.reshape(-1)
        flat_g = np.asarray(grad, dtype=np.float64).ravel()
        count = min(count, flat_p.size)
        idx = rng.choice(flat_p.size, size=count, replace=False)
        rels, errs = [], []
        for i in idx:
            base = float(flat_p[i])
            use_h = step
            if keep_interior:
                # Shrink the step near the [0, 1] clamp; skip entries whose
                # usable step collapses (sitting on the boundary).
                use_h = min(step, base, 1.0 - base)
                if use_h < 0.5 * step:
                    continue
            if f32:
                hi, lo = np.float32(base + use_h), np.float32(base - use_h)
                realized = float(np.float64(hi) - np.float64(lo))
            else:
                hi, lo = base + use_h, base - use_h
                realized = 2.0 * use_h
            evals = []
            for val in (hi, lo):
                flat_p[i] = val
                if after_write is not None:
                    after_write()
                evals.append(_objective(scene, camera, lut, weight_img))
            flat_p[i] = flat_p.dtype.type(base)
            if after_write is not None:
                after_write()
            fd = (evals[0] - evals[1]) / realized
            rel, err = entry_stats(float(flat_g[i]), fd)
            rels.append(rel)
            errs.append(err)
        return {"n": len(rels),
                "max_rel": float(max(rels) if rels else 0.0),
                "max_abs": float(max(errs) if errs else 0.0)}

    for cls in classes:
        if cls == "positions":
            report[cls] = check_entries(scene.positions, grads.positions,
                                        samples, h)
        elif cls == "tangent_u":
            report[cls] = check_entries(scene.tangent_u, grads.tangent_u,
                                        samples, h)
        elif cls == "tangent_v":
            report[cls] = check_entries(scene.tangent_v, grads.tangent_v,
                                        samples, h)
        elif cls == "scales":
            report[cls] = check_entries(scene.scales, grads.scales,
                                        samples, h)
        elif cls == "opacities":
            report[cls] = check_entries(scene.opacities, grads.opacities,
                                        samples, h, keep_interior=True)
        elif cls == "sh":
            report[cls] = check_entries(scene.sh, grads.sh, samples, h)
        elif cls == "texels":
            report[cls] = check_entries(
                texels, texel_grad, samples, texel_h, f32=True,
                after_write=lambda: _write_texels(scene, texels),
                keep_interior=True)
        elif cls == "env_spec":
            env = scene.environment
            per_level = max(2, samples // env.levels)
            merged = {"n": 0, "max_rel": 0.0, "max_abs": 0.0}
            for li, mip in enumerate(env.spec_mips):
                part = check_entries(mip, env_grads.spec_mips[li],
                                     per_level, texel_h, f32=True)
                merged["n"] += part["n"]
                merged["max_rel"] = max(merged["max_rel"], part["max_rel"])
                merged["max_abs"] = max(merged["max_abs"], part["max_abs"])
            report[cls] = merged
        elif cls == "env_diffuse":
            report[cls] = check_entries(scene.environment.diffuse,
                                        env_grads.diffuse, samples, texel_h,
                                        f32=True)
        else:
            raise ValueError(f"unknown gradcheck class: {cls}")

    report["max_rel"] = float(max(report[c]["max_rel"] for c in classes))
    return report
