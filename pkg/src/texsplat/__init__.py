"""Differentiable renderer and fitter for textured 2D Gaussian splats.

Splats are flat Gaussian primitives with per-primitive material textures
(albedo, roughness, metallic, tangent-space normal). Rendering rasterizes
them into a multi-channel G-buffer via exact ray-splat intersection,
shades with a split-sum environment model, and every stage carries a
hand-written backward pass so scenes can be fitted end to end.
"""

from .atlas import (AtlasSet, IndirectionBuffer, TextureAtlas, atlas_coords,
                    atlas_sample, bench_matrix, bench_sampling, chart_grid, load_atlases,
                    pack_atlases, save_atlases)
from .environment import (BrdfLut, EnvGrads, EnvironmentLight,
                          diffuse_irradiance, equirect_dirs,
                          equirect_solid_angles, prefilter_specular)
from .losses import (LossWeights, depth_to_normal, image_loss,
                     linear_to_display, linear_to_display_grad,
                     normal_consistency_loss, psnr, smoothness_loss, ssim)
from .rasterize import (GBuffer, NUM_CHANNELS, PreparedScene, SceneGrads,
                        prepare, render_depth_map, render_forward,
                        render_normal_map, sort_and_cull, splat_backward)
from .scene import (MissingReferenceError, Scene, SchemaError, VersionError,
                    load_manifest, load_scene, save_manifest, save_scene)
from .shading import ShadeResult, shade_backward, shade_gbuffer, shade_pixel
from .splats import (Camera, IntersectionFrame, Splat, SplatHomography,
                     build_homography, build_homography_batch,
                     effective_opacity, gaussian_weight, geometric_normal,
                     intersect_backward, orthonormalize_tangents,
                     ray_splat_intersect)
from .textures import (MaterialTextureSet, TextureConfig, TextureMap,
                       bilinear_sample, bilinear_sample_grad,
                       decode_tangent_normal, load_texture_blob,
                       save_texture_blob, uv_to_st)
from .training import (Adam, TrainConfig, compute_step, evaluate, gradcheck,
                       train)
from .visibility import VisibilityMesh, load_obj, make_box_mesh, visibility

__version__ = "0.1.0"

__all__ = [
    "AtlasSet", "IndirectionBuffer", "TextureAtlas", "atlas_coords",
    "atlas_sample", "bench_matrix", "bench_sampling", "chart_grid", "load_atlases",
    "pack_atlases", "save_atlases",
    "BrdfLut", "EnvGrads", "EnvironmentLight", "diffuse_irradiance",
    "equirect_dirs", "equirect_solid_angles", "prefilter_specular",
    "LossWeights", "depth_to_normal", "image_loss", "linear_to_display",
    "linear_to_display_grad", "normal_consistency_loss", "psnr",
    "smoothness_loss", "ssim",
    "GBuffer", "NUM_CHANNELS", "PreparedScene", "SceneGrads", "prepare",
    "render_depth_map", "render_forward", "render_normal_map",
    "sort_and_cull", "splat_backward",
    "MissingReferenceError", "Scene", "SchemaError", "VersionError",
    "load_manifest", "load_scene", "save_manifest", "save_scene",
    "ShadeResult", "shade_backward", "shade_gbuffer", "shade_pixel",
    "Camera", "IntersectionFrame", "Splat", "SplatHomography",
    "build_homography", "build_homography_batch", "effective_opacity",
    "gaussian_weight", "geometric_normal", "intersect_backward",
    "orthonormalize_tangents", "ray_splat_intersect",
    "MaterialTextureSet", "TextureConfig", "TextureMap", "bilinear_sample",
    "bilinear_sample_grad", "decode_tangent_normal", "load_texture_blob",
    "save_texture_blob", "uv_to_st",
    "Adam", "TrainConfig", "compute_step", "evaluate", "gradcheck", "train",
    "VisibilityMesh", "load_obj", "make_box_mesh", "visibility",
    "__version__",
]
