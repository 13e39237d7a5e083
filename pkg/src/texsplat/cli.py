"""Command-line interface.

Subcommands: render, fit, gradcheck, pack-atlas, bench-atlas. Every
command prints a machine-readable JSON summary on stdout; diagnostics go
to stderr. Thread count falls back to the TEXSPLAT_THREADS environment
variable when --threads is not given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .atlas import bench_matrix, pack_atlases, save_atlases
from .environment import BrdfLut
from .imgio import read_png, write_png
from .losses import linear_to_display
from .rasterize import render_forward
from .scene import load_manifest, load_scene, save_scene
from .shading import shade_gbuffer
from .synth import (bench_cameras, camera_ring, make_gradcheck_scene,
                    make_plane_scene, make_shell_scene)
from .training import TrainConfig, evaluate, gradcheck, train


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("TEXSPLAT_THREADS", "1"))


def _emit(summary: dict):
    print(json.dumps(summary, indent=2, sort_keys=True))


def _load_cameras(args):
    if args.manifest:
        cameras, image_names = load_manifest(args.manifest)
        return cameras, image_names
    return camera_ring(1, width=128, height=128), None


def _to_png(img):
    return np.clip(img, 0.0, 1.0)


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    cameras, _ = _load_cameras(args)
    out_dir = Path(args.out or "render_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = _threads(args)
    lut = BrdfLut.build()

    atlas_set = pack_atlases(scene.textures) if args.atlas else None
    mode = "atlas" if args.atlas else "perprim"
    written = []
    for vi, cam in enumerate(cameras):
        gbuf = render_forward(scene, cam, texture_mode=mode,
                              atlas_set=atlas_set, threads=threads)
        shade = shade_gbuffer(gbuf, cam, scene.environment, lut,
                              mesh=scene.mesh, background=scene.background)
        final = linear_to_display(shade.color)
        if args.decompose:
            alpha = np.maximum(gbuf.alpha[..., None], 1e-8)
            cov = gbuf.alpha[..., None] > 1e-8
            buffers = {
                "albedo": np.where(cov, gbuf.albedo / alpha, 0.0),
                "normal": np.where(
                    cov, 0.5 * (gbuf.normal / np.maximum(np.linalg.norm(
                        gbuf.normal, axis=-1, keepdims=True), 1e-12) + 1.0),
                    0.5),
                "roughness": np.where(cov[..., 0],
                                      gbuf.roughness / alpha[..., 0], 0.0),
                "metallic": np.where(cov[..., 0],
                                     gbuf.metallic / alpha[..., 0], 0.0),
                "diffuse": linear_to_display(shade.diffuse),
                "specular": linear_to_display(shade.specular),
                "final": final,
            }
            for name, img in buffers.items():
                path = out_dir / f"view_{vi:03d}_{name}.png"
                write_png(path, _to_png(img))
                written.append(str(path))
        else:
            path = out_dir / f"view_{vi:03d}.png"
            write_png(path, _to_png(final))
            written.append(str(path))
    _emit({"command": "render", "views": len(cameras), "atlas": bool(
        args.atlas), "decompose": bool(args.decompose), "files": written})
    return 0


def _default_init_scene(seed: int, texture_res: int):
    """Neutral-material patch used when fit gets no initial scene."""
    scene = make_plane_scene(nx=6, ny=6, texture_res=1, seed=seed,
                             sh_degree=1, textured=False, env_levels=4)
    for tex in scene.textures:
        tex.albedo.data[:] = 0.5
        tex.roughness.data[:] = 0.5
        tex.metallic.data[:] = 0.05
        tex.tangent_normal.data[:] = 0.5
    return scene


def _train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            if not hasattr(config, key):
                raise SystemExit(f"unknown config key: {key}")
            setattr(config, key, value)
    if args.texture_res is not None:
        config.texture_resolution = args.texture_res
    if args.seed is not None:
        config.seed = args.seed
    config.threads = _threads(args)
    return config


def cmd_fit(args) -> int:
    if not args.manifest:
        raise SystemExit("fit requires --manifest")
    # load_manifest returns image paths already resolved against the
    # manifest directory.
    cameras, image_paths = load_manifest(args.manifest)
    targets = [read_png(p) for p in image_paths]
    config = _train_config(args)
    if args.scene:
        init = load_scene(args.scene)
    else:
        init = _default_init_scene(config.seed, config.texture_resolution)
    out_dir = Path(args.out or "fit_out")
    out_dir.mkdir(parents=True, exist_ok=True)

    fitted, history = train(init, cameras, targets, config,
                            log_path=out_dir / "train_log.csv")
    save_scene(fitted, out_dir / "scene")
    final = evaluate(fitted, cameras, targets, threads=config.threads)
    _emit({
        "command": "fit",
        "iterations": config.iterations,
        "splats": fitted.num_splats,
        "loss": history[-1]["loss"] if history else None,
        "psnr": final["psnr"],
        "ssim": final["ssim"],
        "checkpoint": str(out_dir / "scene"),
        "log": str(out_dir / "train_log.csv"),
    })
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.scene:
        scene = load_scene(args.scene)
    else:
        scene = make_gradcheck_scene()
    cam = camera_ring(1, width=16, height=16)[0]
    report = gradcheck(scene, cam, seed=seed)
    tol = {"positions": 5e-3}
    ok = all(report[cls]["max_rel"] <= tol.get(cls, 1e-3)
             for cls in report if isinstance(report[cls], dict))
    report["pass"] = bool(ok)
    _emit({"command": "gradcheck", **report})
    return 0 if ok else 1


def cmd_pack_atlas(args) -> int:
    scene = load_scene(args.scene)
    atlas_set = pack_atlases(scene.textures)
    out_dir = Path(args.out or "atlas_out")
    sidecar = save_atlases(atlas_set, out_dir)
    _emit({
        "command": "pack-atlas",
        "splats": scene.num_splats,
        "resolution": atlas_set.resolution,
        "pages": len(atlas_set.family_a) + len(atlas_set.family_b),
        "charts_x": atlas_set.family_a[0].charts_x,
        "charts_y": atlas_set.family_a[0].charts_y,
        "sidecar": str(sidecar),
    })
    return 0


def cmd_bench_atlas(args) -> int:
    res = args.texture_res if args.texture_res is not None else 16
    seed = args.seed if args.seed is not None else 3
    threads = _threads(args)
    opts = {"splats": 10000, "views": 2, "width": 128, "rounds": 3}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        unknown = set(raw) - set(opts)
        if unknown:
            raise SystemExit(f"unknown bench config keys: {sorted(unknown)}")
        opts.update({k: int(v) for k, v in raw.items()})
    print(f"building benchmark scene ({opts['splats']} splats, T={res})...",
          file=sys.stderr)
    scene = make_shell_scene(n_splats=opts["splats"], texture_res=res,
                             seed=seed)
    cameras = bench_cameras(opts["views"], width=opts["width"],
                            height=opts["width"])
    print("timing flat / per-primitive / atlas (interleaved)...",
          file=sys.stderr)
    matrix = bench_matrix(scene, cameras, rounds=opts["rounds"],
                          threads=threads)
    summary = {
        "command": "bench-atlas",
        "texture_res": res,
        "splats": scene.num_splats,
        "baseline": matrix["flat"],
        "software": matrix["perprim"],
        "atlas": matrix["atlas"],
        "atlas_vs_software": matrix["ratios"]["atlas_vs_perprim"],
        "software_vs_baseline": matrix["ratios"]["perprim_vs_flat"],
        "atlas_vs_baseline": matrix["ratios"]["atlas_vs_flat"],
    }
    _emit(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texsplat",
        description="Textured 2D Gaussian splat renderer and fitter.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scene", help="scene directory")
        p.add_argument("--manifest", help="dataset manifest JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--atlas", action="store_true",
                       help="sample textures through packed atlases")
        p.add_argument("--decompose", action="store_true",
                       help="also write per-buffer images")
        p.add_argument("--texture-res", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", help="JSON training config overrides")

    for name, fn in (("render", cmd_render), ("fit", cmd_fit),
                     ("gradcheck", cmd_gradcheck),
                     ("pack-atlas", cmd_pack_atlas),
                     ("bench-atlas", cmd_bench_atlas)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
