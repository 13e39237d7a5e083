"""Texture atlas packing and sampling.

Per-splat maps are packed into shared pages of TxT charts, four channels
each, in two families:

    family A: albedo.rgb + roughness
    family B: tangent_normal.ab + metallic + zero padding

Charts are assigned in splat-id order, row-major within a page, so packing
is deterministic. A per-splat indirection entry (chart_x, chart_y, page)
serves both families, which share one geometry.

atlas_sample resolves the chart through integer texel offsets and reuses
the per-splat bilinear helper, so a lookup returns bitwise the same value
as sampling the original per-splat map. atlas_coords exposes the normalized
atlas coordinates as their own (tested) operation; the sampler does not
round-trip through them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .textures import MaterialTextureSet, lerp_corners, texel_coords

FAMILY_A = "albedo_roughness"
FAMILY_B = "normal_metallic"


@dataclass
class TextureAtlas:
    """One packed page: a grid of charts_x by charts_y TxT charts."""

    texels: np.ndarray  # (charts_y*T, charts_x*T, 4) float32
    family: str
    page_index: int
    charts_x: int
    charts_y: int
    resolution: int

    def validate(self):
        if self.family not in (FAMILY_A, FAMILY_B):
            raise ValueError(f"unknown atlas family {self.family!r}")
        h, w, c = self.texels.shape
        if c != 4:
            raise ValueError("atlas pages carry 4 channels")
        if h != self.charts_y * self.resolution:
            raise ValueError("page height must equal charts_y * resolution")
        if w != self.charts_x * self.resolution:
            raise ValueError("page width must equal charts_x * resolution")
        if self.texels.dtype != np.float32:
            raise ValueError("atlas texels must be float32")


@dataclass
class IndirectionBuffer:
    """splat_id -> (chart_x, chart_y, page) for the packed atlases."""

    entries: np.ndarray  # (P, 3) int32
    charts_x: int
    charts_y: int
    pages: int

    def lookup(self, splat_id: int):
        if not 0 <= splat_id < self.entries.shape[0]:
            raise LookupError(f"splat id {splat_id} has no atlas entry")
        cx, cy, page = self.entries[splat_id]
        return int(cx), int(cy), int(page)

    def validate(self):
        if self.entries.ndim != 2 or self.entries.shape[1] != 3:
            raise ValueError("indirection entries must be (P, 3)")
        cx, cy, pg = self.entries[:, 0], self.entries[:, 1], self.entries[:, 2]
        if cx.size and (cx.min() < 0 or cx.max() >= self.charts_x):
            raise ValueError("chart_x out of range")
        if cy.size and (cy.min() < 0 or cy.max() >= self.charts_y):
            raise ValueError("chart_y out of range")
        if pg.size and (pg.min() < 0 or pg.max() >= self.pages):
            raise ValueError("page index out of range")


@dataclass
class AtlasSet:
    """Both page families plus the shared indirection."""

    family_a: "list[TextureAtlas]"
    family_b: "list[TextureAtlas]"
    indirection: IndirectionBuffer
    resolution: int

    @property
    def atlases(self) -> "list[TextureAtlas]":
        return list(self.family_a) + list(self.family_b)

    def validate(self):
        for page in self.atlases:
            page.validate()
        self.indirection.validate()
        if len(self.family_a) != len(self.family_b):
            raise ValueError("families must have the same page count")


def chart_grid(num_splats: int, resolution: int, max_dim: int):
    """Chart-grid dimensions and page count for P splats.

    charts_x fills the width limit; charts_y is capped both by the height
    limit and by the rows actually needed, so one splat does not allocate a
    max_dim-sized page.
    """
    if resolution > max_dim:
        raise ValueError("texture resolution exceeds the atlas dimension")
    if num_splats < 1:
        raise ValueError("need at least one splat to pack")
    charts_x = max_dim // resolution
    rows_needed = -(-num_splats // charts_x)
    charts_y = min(max_dim // resolution, rows_needed)
    per_page = charts_x * charts_y
    pages = -(-num_splats // per_page)
    return charts_x, charts_y, pages


def pack_atlases(sets: "list[MaterialTextureSet]", max_dim: int = 4096
                 ) -> AtlasSet:
    """Pack per-splat texture sets into shared pages.

    Splat k lands on page k // (charts_x*charts_y) at row-major chart
    index k % (charts_x*charts_y). Unused charts stay zero.
    """
    if not sets:
        raise ValueError("no texture sets to pack")
    T = sets[0].resolution
    for s in sets:
        if s.resolution != T:
            raise ValueError("texture sets must share one resolution")
    P = len(sets)
    charts_x, charts_y, pages = chart_grid(P, T, max_dim)
    per_page = charts_x * charts_y

    shape = (charts_y * T, charts_x * T, 4)
    pages_a = [np.zeros(shape, dtype=np.float32) for _ in range(pages)]
    pages_b = [np.zeros(shape, dtype=np.float32) for _ in range(pages)]
    entries = np.zeros((P, 3), dtype=np.int32)

    for k, s in enumerate(sets):
        page, idx = divmod(k, per_page)
        cy, cx = divmod(idx, charts_x)
        entries[k] = (cx, cy, page)
        ys = slice(cy * T, (cy + 1) * T)
        xs = slice(cx * T, (cx + 1) * T)
        pa = pages_a[page]
        pa[ys, xs, 0:3] = s.albedo.data
        pa[ys, xs, 3] = s.roughness.data[:, :, 0]
        pb = pages_b[page]
        pb[ys, xs, 0:2] = s.tangent_normal.data
        pb[ys, xs, 2] = s.metallic.data[:, :, 0]

    fam_a = [TextureAtlas(p, FAMILY_A, i, charts_x, charts_y, T)
             for i, p in enumerate(pages_a)]
    fam_b = [TextureAtlas(p, FAMILY_B, i, charts_x, charts_y, T)
             for i, p in enumerate(pages_b)]
    ind = IndirectionBuffer(entries, charts_x, charts_y, pages)
    return AtlasSet(fam_a, fam_b, ind, T)


def atlas_coords(chart_x, chart_y, s, t, resolution: int,
                 charts_x: int, charts_y: int):
    """Normalized atlas coordinates of chart-local (s, t).

    s_atlas = (chart_x*T + s*T) / (charts_x*T) and likewise for t.
    """
    T = float(resolution)
    s_a = (np.asarray(chart_x) * T + np.asarray(s, dtype=np.float64) * T) \
        / (charts_x * T)
    t_a = (np.asarray(chart_y) * T + np.asarray(t, dtype=np.float64) * T) \
        / (charts_y * T)
    return s_a, t_a


def atlas_sample(atlas: TextureAtlas, indirection: IndirectionBuffer,
                 splat_id: int, s, t) -> np.ndarray:
    """Sample a splat's chart from a packed page.

    The chart origin enters as an integer texel offset, so corner indices
    and interpolation weights are identical to sampling the original
    per-splat map; values match bitwise.

    Raises:
        LookupError: unknown splat id, or the splat lives on another page.
    """
    cx, cy, page = indirection.lookup(splat_id)
    if page != atlas.page_index:
        raise LookupError(
            f"splat {splat_id} is packed on page {page}, not "
            f"{atlas.page_index}")
    T = atlas.resolution
    i0, i1, fs, j0, j1, ft = texel_coords(s, t, T)
    ox, oy = cx * T, cy * T
    w = atlas.texels.shape[1]
    flat = atlas.texels.reshape(-1, 4)
    r0 = (oy + j0) * w + ox
    r1 = (oy + j1) * w + ox
    t00 = flat[r0 + i0].astype(np.float64)
    t01 = flat[r0 + i1].astype(np.float64)
    t10 = flat[r1 + i0].astype(np.float64)
    t11 = flat[r1 + i1].astype(np.float64)
    return lerp_corners(t00, t01, t10, t11, fs[..., None], ft[..., None])


def save_atlases(atlas_set: AtlasSet, out_dir, stem: str = "atlas"):
    """Write pages as PFM images plus a JSON sidecar.

    PFM holds 1 or 3 channels, so each 4-channel page is split into
    <stem>.<family>.<page>.rgb.pfm and <stem>.<family>.<page>.a.pfm.
    The sidecar records the grid, the file list and the indirection table.
    """
    from .imgio import write_pfm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pages = []
    for page in atlas_set.atlases:
        base = f"{stem}.{page.family}.{page.page_index}"
        write_pfm(out_dir / f"{base}.rgb.pfm", page.texels[:, :, 0:3])
        write_pfm(out_dir / f"{base}.a.pfm", page.texels[:, :, 3])
        pages.append({
            "family": page.family,
            "page": page.page_index,
            "rgb": f"{base}.rgb.pfm",
            "a": f"{base}.a.pfm",
        })
    ind = atlas_set.indirection
    sidecar = {
        "resolution": atlas_set.resolution,
        "charts_x": ind.charts_x,
        "charts_y": ind.charts_y,
        "pages": len(atlas_set.family_a),
        "page_files": pages,
        "indirection": {str(i): [int(p), int(cx), int(cy)]
                        for i, (cx, cy, p) in enumerate(ind.entries)},
    }
    side_path = out_dir / f"{stem}.json"
    with open(side_path, "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
    return side_path


def load_atlases(sidecar_path) -> AtlasSet:
    """Read an atlas set written by save_atlases."""
    from .imgio import read_pfm

    sidecar_path = Path(sidecar_path)
    with open(sidecar_path) as f:
        meta = json.load(f)
    directory = sidecar_path.parent
    T = int(meta["resolution"])
    charts_x, charts_y = int(meta["charts_x"]), int(meta["charts_y"])
    n_pages = int(meta["pages"])

    def page_array(entry):
        rgb = read_pfm(directory / entry["rgb"])
        a = read_pfm(directory / entry["a"])
        return np.concatenate([rgb, a[:, :, None]], axis=2).astype(np.float32)

    fam = {FAMILY_A: [None] * n_pages, FAMILY_B: [None] * n_pages}
    for entry in meta["page_files"]:
        page = TextureAtlas(page_array(entry), entry["family"],
                            int(entry["page"]), charts_x, charts_y, T)
        fam[entry["family"]][page.page_index] = page

    ids = sorted(meta["indirection"], key=int)
    entries = np.zeros((len(ids), 3), dtype=np.int32)
    for sid in ids:
        p, cx, cy = meta["indirection"][sid]
        entries[int(sid)] = (cx, cy, p)
    ind = IndirectionBuffer(entries, charts_x, charts_y, n_pages)
    return AtlasSet(fam[FAMILY_A], fam[FAMILY_B], ind, T)


def bench_sampling(scene, cameras, mode: str, frames: int = 8,
                   threads: int = 1, warmup: int = 1) -> dict:
    """Time forward render+shade over a camera path for one texture mode.

    Args:
        mode: "flat" (per-splat constants), "perprim", or "atlas".
        cameras: list of Camera; frames are drawn round-robin from it.
    Returns:
        dict with median/p95 frame ms, fps, fragment count and per-sample
        cost (texture modes only).
    """
    from .rasterize import render_forward

    if mode not in ("flat", "perprim", "atlas"):
        raise ValueError(f"unknown bench mode {mode!r}")
    atlas_set = pack_atlases(scene.textures) if mode == "atlas" else None

    times = []
    fragments = 0
    for i in range(warmup + frames):
        cam = cameras[i % len(cameras)]
        t0 = time.perf_counter()
        gbuf = render_forward(scene, cam, texture_mode=mode,
                              atlas_set=atlas_set, threads=threads)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
            fragments += gbuf.fragment_count
    times_ms = np.sort(np.array(times) * 1e3)
    median = float(np.median(times_ms))
    p95 = float(times_ms[min(len(times_ms) - 1,
                             int(np.ceil(0.95 * len(times_ms))) - 1)])
    mean_fragments = fragments / frames
    out = {
        "mode": mode,
        "frames": frames,
        "threads": threads,
        "ms_median": median,
        "ms_p95": p95,
        "fps": 1e3 / median if median > 0 else float("inf"),
        "fragments_per_frame": mean_fragments,
    }
    if mode != "flat" and mean_fragments > 0:
        out["ns_per_sample"] = median * 1e6 / mean_fragments
    return out


def bench_matrix(scene, cameras, modes=("flat", "perprim", "atlas"),
                 rounds: int = 4, threads: int = 1) -> dict:
    """Interleaved throughput comparison across texture modes.

    Modes are timed round-robin (one frame each per round) so slow drift in
    machine speed lands on every mode evenly; per-mode medians over rounds
    are far more stable than back-to-back runs. One warmup round is
    discarded.

    Returns:
        {mode: {ms_median, fps, fragments_per_frame}} plus a "ratios" entry
        keyed "<a>_vs_<b>" with fps ratios.
    """
    from .rasterize import render_forward

    atlas_set = pack_atlases(scene.textures) if "atlas" in modes else None
    times = {m: [] for m in modes}
    fragments = {m: 0 for m in modes}
    for r in range(rounds + 1):
        cam = cameras[r % len(cameras)]
        for mode in modes:
            t0 = time.perf_counter()
            gbuf = render_forward(scene, cam, texture_mode=mode,
                                  atlas_set=atlas_set, threads=threads)
            dt = time.perf_counter() - t0
            if r > 0:
                times[mode].append(dt)
                fragments[mode] += gbuf.fragment_count
    out = {}
    for mode in modes:
        ms = float(np.median(np.array(times[mode])) * 1e3)
        out[mode] = {
            "ms_median": ms,
            "fps": 1e3 / ms if ms > 0 else float("inf"),
            "fragments_per_frame": fragments[mode] / rounds,
        }
    ratios = {}
    for a in modes:
        for b in modes:
            if a != b:
                ratios[f"{a}_vs_{b}"] = out[a]["fps"] / out[b]["fps"]
    out["ratios"] = ratios
    return out
