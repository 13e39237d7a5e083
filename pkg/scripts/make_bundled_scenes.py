"""Regenerate the small scene checkpoints bundled under scenes/.

Run from the repository root:

    python3 scripts/make_bundled_scenes.py
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from texsplat.scene import save_scene
from texsplat.synth import make_plane_scene


def main():
    root = pathlib.Path(__file__).resolve().parents[1] / "scenes"
    specs = {
        "patch_small": dict(nx=3, ny=3, texture_res=4, seed=7, sh_degree=1),
        "patch_large": dict(nx=6, ny=6, texture_res=8, seed=21, sh_degree=2),
        "patch_flat": dict(nx=4, ny=4, texture_res=4, seed=9, sh_degree=0,
                           textured=False),
    }
    for name, kwargs in specs.items():
        scene = make_plane_scene(**kwargs)
        path = save_scene(scene, root / name)
        print(f"{name}: {scene.num_splats} splats -> {path}")


if __name__ == "__main__":
    main()
