"""Scene container and on-disk formats.

A scene bundles splat parameter arrays, one texture set per splat, an
optional environment and occluder mesh, and a background color. Checkpoints
are a JSON master file plus binary sidecars in the same directory:

    scene.json          master (version, counts, background, file names)
    scene.splats.bin    'TSPL' header + float64 parameter arrays
    scene.textures.bin  'TTEX' header + float32 texel blocks
    env.spec<l>.pfm     specular mip grids (float32)
    env.diffuse.pfm     diffuse irradiance grid
    mesh.obj            occluder copy, when present

All binary payloads are little endian; JSON keys are sorted, so identical
scenes serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sh as shlib
from .environment import EnvironmentLight
from .imgio import read_pfm, write_pfm
from .splats import Camera, Splat, orthonormalize_tangents
from .textures import (MaterialTextureSet, TextureConfig, load_texture_blob,
                       save_texture_blob)
from .visibility import VisibilityMesh

SCENE_VERSION = 1
MANIFEST_VERSION = 1
SPLATS_MAGIC = b"TSPL"


class SchemaError(ValueError):
    """A file parsed but its content violates the format contract."""


class VersionError(ValueError):
    """A file declares an unsupported format version."""


class MissingReferenceError(FileNotFoundError):
    """A master file references a sidecar that does not exist."""


@dataclass
class Scene:
    """Splat parameters plus shared lighting and texture state."""

    positions: np.ndarray    # (P, 3)
    tangent_u: np.ndarray    # (P, 3)
    tangent_v: np.ndarray    # (P, 3)
    scales: np.ndarray       # (P, 2)
    opacities: np.ndarray    # (P,)
    sh: np.ndarray           # (P, K, 3)
    sh_degree: int
    textures: "list[MaterialTextureSet]"
    texture_config: TextureConfig
    environment: "EnvironmentLight | None" = None
    mesh: "VisibilityMesh | None" = None
    background: np.ndarray = field(
        default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.opacities = np.asarray(self.opacities, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)

    @property
    def num_splats(self) -> int:
        return self.positions.shape[0]

    def splat(self, i: int) -> Splat:
        return Splat(position=self.positions[i], tangent_u=self.tangent_u[i],
                     tangent_v=self.tangent_v[i], scale=self.scales[i],
                     opacity=float(self.opacities[i]), texture_id=i,
                     indirect_sh=self.sh[i])

    def validate(self):
        P = self.num_splats
        k = shlib.num_coeffs(self.sh_degree)
        shapes = {
            "positions": (self.positions, (P, 3)),
            "tangent_u": (self.tangent_u, (P, 3)),
            "tangent_v": (self.tangent_v, (P, 3)),
            "scales": (self.scales, (P, 2)),
            "opacities": (self.opacities, (P,)),
            "sh": (self.sh, (P, k, 3)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise SchemaError(f"{name} has shape {arr.shape}, want {want}")
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"{name} contains non-finite values")
        if np.any(self.scales <= 0.0):
            raise SchemaError("scales must be positive")
        if self.opacities.min() < 0.0 or self.opacities.max() > 1.0:
            raise SchemaError("opacities must lie in [0, 1]")
        dots = np.abs(np.sum(self.tangent_u * self.tangent_v, axis=1))
        norms_u = np.abs(np.linalg.norm(self.tangent_u, axis=1) - 1.0)
        norms_v = np.abs(np.linalg.norm(self.tangent_v, axis=1) - 1.0)
        if P and max(dots.max(), norms_u.max(), norms_v.max()) > 1e-6:
            raise SchemaError("tangent frames must be orthonormal")
        if len(self.textures) != P:
            raise SchemaError(
                f"{len(self.textures)} texture sets for {P} splats")
        for t in self.textures:
            t.validate()
            if t.resolution != self.texture_config.resolution:
                raise SchemaError("texture set resolution mismatch")
        if self.background.shape != (3,):
            raise SchemaError("background must be (3,)")

    def copy(self) -> "Scene":
        return Scene(
            positions=self.positions.copy(),
            tangent_u=self.tangent_u.copy(),
            tangent_v=self.tangent_v.copy(),
            scales=self.scales.copy(),
            opacities=self.opacities.copy(),
            sh=self.sh.copy(),
            sh_degree=self.sh_degree,
            textures=[t.copy() for t in self.textures],
            texture_config=TextureConfig(self.texture_config.resolution,
                                         self.texture_config.support),
            environment=None if self.environment is None
            else self.environment.copy(),
            mesh=self.mesh,
            background=self.background.copy(),
        )

    def renormalize_tangents(self):
        self.tangent_u, self.tangent_v = orthonormalize_tangents(
            self.tangent_u, self.tangent_v)

    def world_extent(self) -> float:
        """Diagonal of the splat-center bounding box (learning-rate scale)."""
        if self.num_splats == 0:
            return 1.0
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(max(np.linalg.norm(span), 1e-6))


def _write_splats_bin(path, scene: Scene):
    k = scene.sh.shape[1]
    with open(path, "wb") as f:
        f.write(SPLATS_MAGIC)
        f.write(struct.pack("<III", SCENE_VERSION, scene.num_splats, k))
        for arr in (scene.positions, scene.tangent_u, scene.tangent_v,
                    scene.scales, scene.opacities, scene.sh):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_splats_bin(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPLATS_MAGIC:
            raise SchemaError(f"bad splat blob magic {magic!r}")
        version, count, k = struct.unpack("<III", f.read(12))
        if version != SCENE_VERSION:
            raise VersionError(f"splat blob version {version} unsupported")
        payload = f.read()
    sizes = [count * 3, count * 3, count * 3, count * 2, count,
             count * k * 3]
    if len(payload) != sum(sizes) * 8:
        raise SchemaError("splat blob payload size mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    out = []
    off = 0
    for n in sizes:
        out.append(flat[off:off + n].astype(np.float64))
        off += n
    pos, tu, tv, sc, op, sh = out
    return (pos.reshape(count, 3), tu.reshape(count, 3),
            tv.reshape(count, 3), sc.reshape(count, 2), op,
            sh.reshape(count, k, 3))


def save_scene(scene: Scene, out_dir) -> Path:
    """Write a checkpoint directory; returns the master JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_splats_bin(out_dir / "scene.splats.bin", scene)
    save_texture_blob(out_dir / "scene.textures.bin", scene.textures)
    meta = {
        "version": SCENE_VERSION,
        "num_splats": scene.num_splats,
        "sh_degree": scene.sh_degree,
        "texture_resolution": scene.texture_config.resolution,
        "texture_support": scene.texture_config.support,
        "background": [float(x) for x in scene.background],
        "splats": "scene.splats.bin",
        "textures": "scene.textures.bin",
    }
    if scene.environment is not None:
        env = scene.environment
        meta["environment"] = {
            "levels": env.levels,
            "spec": [f"env.spec{i}.pfm" for i in range(env.levels)],
            "diffuse": "env.diffuse.pfm",
        }
        for i, mip in enumerate(env.spec_mips):
            write_pfm(out_dir / f"env.spec{i}.pfm", mip)
        write_pfm(out_dir / "env.diffuse.pfm", env.diffuse)
    if scene.mesh is not None:
        meta["mesh"] = "mesh.obj"
        _write_obj(out_dir / "mesh.obj", scene.mesh.triangles)
    path = out_dir / "scene.json"
    with open(path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return path


def _write_obj(path, triangles):
    lines = []
    for tri in np.asarray(triangles, dtype=np.float64):
        for v in tri:
            lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for i in range(len(triangles)):
        b = 3 * i
        lines.append(f"f {b + 1} {b + 2} {b + 3}")
    Path(path).write_text("\n".join(lines) + "\n")


def _require(directory: Path, name: str) -> Path:
    p = directory / name
    if not p.exists():
        raise MissingReferenceError(f"scene references missing file {name}")
    return p


def load_scene(path) -> Scene:
    """Read a checkpoint from its master JSON (or its directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    if not path.exists():
        raise MissingReferenceError(f"no scene file at {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"scene master is not valid JSON: {e}") from e
    version = meta.get("version")
    if version != SCENE_VERSION:
        raise VersionError(f"scene version {version} unsupported")
    directory = path.parent

    pos, tu, tv, sc, op, sh_arr = _read_splats_bin(
        _require(directory, meta["splats"]))
    textures = load_texture_blob(_require(directory, meta["textures"]))
    if len(textures) != pos.shape[0]:
        raise SchemaError("texture count does not match splat count")

    env = None
    if "environment" in meta:
        e = meta["environment"]
        mips = [read_pfm(_require(directory, name)) for name in e["spec"]]
        diffuse = read_pfm(_require(directory, e["diffuse"]))
        env = EnvironmentLight(mips, diffuse)
    mesh = None
    if "mesh" in meta:
        mesh = VisibilityMesh.from_obj(_require(directory, meta["mesh"]))

    t_res = int(meta["texture_resolution"])
    if textures and textures[0].resolution != t_res:
        raise SchemaError("texture blob resolution mismatch with master")
    scene = Scene(
        positions=pos, tangent_u=tu, tangent_v=tv, scales=sc, opacities=op,
        sh=sh_arr, sh_degree=int(meta["sh_degree"]), textures=textures,
        texture_config=TextureConfig(t_res, float(meta["texture_support"])),
        environment=env, mesh=mesh,
        background=np.asarray(meta["background"], dtype=np.float64),
    )
    scene.validate()
    return scene


def save_manifest(path, cameras: "list[Camera]", image_names: "list[str]"):
    """Write a dataset manifest; all cameras must share intrinsics."""
    if len(cameras) != len(image_names):
        raise ValueError("need one image per camera")
    if not cameras:
        raise ValueError("empty dataset")
    c0 = cameras[0]
    for c in cameras:
        if (c.fx, c.fy, c.cx, c.cy, c.width, c.height) != \
                (c0.fx, c0.fy, c0.cx, c0.cy, c0.width, c0.height):
            raise ValueError("manifest cameras must share intrinsics")
    meta = {
        "version": MANIFEST_VERSION,
        "intrinsics": {
            "fx": c0.fx, "fy": c0.fy, "cx": c0.cx, "cy": c0.cy,
            "width": c0.width, "height": c0.height,
            "near": c0.near, "far": c0.far,
        },
        "views": [
            {"image": name, "world_to_view": cam.world_to_view.tolist()}
            for cam, name in zip(cameras, image_names)
        ],
    }
    with open(path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_manifest(path):
    """Read a manifest; returns (cameras, image paths)."""
    path = Path(path)
    if not path.exists():
        raise MissingReferenceError(f"no manifest at {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"manifest is not valid JSON: {e}") from e
    if meta.get("version") != MANIFEST_VERSION:
        raise VersionError(
            f"manifest version {meta.get('version')} unsupported")
    try:
        intr = meta["intrinsics"]
        views = meta["views"]
    except KeyError as e:
        raise SchemaError(f"manifest missing key {e}") from e
    cameras = []
    images = []
    for view in views:
        cameras.append(Camera(
            np.asarray(view["world_to_view"], dtype=np.float64),
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]),
            near=float(intr.get("near", 0.01)),
            far=float(intr.get("far", 100.0))))
        images.append(path.parent / view["image"])
    return cameras, images
