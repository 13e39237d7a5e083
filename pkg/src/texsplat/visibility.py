"""Binary occlusion queries against a user-supplied triangle mesh.

A bounding-volume hierarchy (median split over centroid extent, small
leaves) accelerates any-hit queries; a brute-force path over all triangles
stays available as the reference implementation. Visibility is binary and
carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Ray origins are nudged along the ray before testing so a surface does not
# occlude itself.
RAY_OFFSET = 1e-4
# Minimum accepted hit distance after the offset.
T_MIN = 1e-7
_LEAF_SIZE = 4


def load_obj(path) -> np.ndarray:
    """Read triangles from a Wavefront OBJ file.

    Supports 'v' and 'f' records; faces with more than three vertices are
    fan-triangulated; texture/normal indices after '/' are ignored.

    Returns:
        (M, 3, 3) float64 triangle vertices.
    """
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append((idx[0], a, b))
    if not faces:
        raise ValueError(f"no faces found in {path}")
    v = np.asarray(verts, dtype=np.float64)
    return v[np.asarray(faces, dtype=np.int64)]


def _ray_tris_any(origin, direction, tris, t_max):
    """Moeller-Trumbore any-hit of one ray against a triangle batch."""
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    p = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - tris[:, 0]
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ direction) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > T_MIN)
    if t_max is not None:
        hit &= t < t_max
    return bool(hit.any())


@dataclass
class VisibilityMesh:
    """Triangle mesh with a BVH for binary any-hit queries."""

    triangles: np.ndarray  # (M, 3, 3)
    # BVH arrays, built in __post_init__:
    _nodes_min: np.ndarray = field(init=False, repr=False)
    _nodes_max: np.ndarray = field(init=False, repr=False)
    _nodes_child: np.ndarray = field(init=False, repr=False)  # (N,2) or leaf
    _nodes_range: np.ndarray = field(init=False, repr=False)  # (N,2) tri span
    _tri_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.float64)
        if self.triangles.ndim != 3 or self.triangles.shape[1:] != (3, 3):
            raise ValueError("triangles must be (M, 3, 3)")
        self._build()

    @staticmethod
    def from_obj(path) -> "VisibilityMesh":
        return VisibilityMesh(load_obj(path))

    def _build(self):
        tris = self.triangles
        m = tris.shape[0]
        tri_min = tris.min(axis=1)
        tri_max = tris.max(axis=1)
        centroids = tris.mean(axis=1)
        order = np.arange(m)

        nodes_min, nodes_max, child, rng = [], [], [], []

        def emit(start, end):
            """Build the subtree over order[start:end]; returns node id."""
            node = len(nodes_min)
            sel = order[start:end]
            nodes_min.append(tri_min[sel].min(axis=0))
            nodes_max.append(tri_max[sel].max(axis=0))
            child.append([-1, -1])
            rng.append([start, end])
            if end - start > _LEAF_SIZE:
                c = centroids[sel]
                axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
                mid = (end - start) // 2
                # argsort(centroid) keeps the split deterministic; identical
                # centroids fall back on the stable tri order.
                loc = np.argsort(c[:, axis], kind="stable")
                order[start:end] = sel[loc]
                left = emit(start, start + mid)
                right = emit(start + mid, end)
                child[node] = [left, right]
                rng[node] = [start, start]  # interior: empty span
            return node

        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 64 + 2 * int(np.log2(m + 1) + 32)))
        try:
            emit(0, m)
        finally:
            sys.setrecursionlimit(old)
        self._nodes_min = np.asarray(nodes_min)
        self._nodes_max = np.asarray(nodes_max)
        self._nodes_child = np.asarray(child, dtype=np.int64)
        self._nodes_range = np.asarray(rng, dtype=np.int64)
        self._tri_order = order

    def any_hit(self, origins, directions, t_max=None) -> np.ndarray:
        """BVH any-hit for a batch of rays.

        Args:
            origins, directions: (n, 3); directions need not be unit.
            t_max: optional scalar or (n,) maximum hit distance.
        Returns:
            (n,) bool, True where some triangle is hit.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        n = origins.shape[0]
        t_max_arr = None if t_max is None else np.broadcast_to(
            np.asarray(t_max, dtype=np.float64), (n,))
        out = np.zeros(n, dtype=bool)
        nmin, nmax = self._nodes_min, self._nodes_max
        child, rng = self._nodes_child, self._nodes_range
        tris = self.triangles
        order = self._tri_order
        for i in range(n):
            o = origins[i]
            d = directions[i]
            tm = None if t_max_arr is None else float(t_max_arr[i])
            limit = np.inf if tm is None else tm
            # 0 * inf in the slab test yields NaN exactly when the origin
            # lies on a slab plane with zero direction component; those
            # NaNs are neutralized below.
            inv = np.where(d != 0.0, 1.0 / np.where(d != 0.0, d, 1.0), np.inf)
            stack = [0]
            while stack:
                node = stack.pop()
                with np.errstate(invalid="ignore"):
                    t0 = (nmin[node] - o) * inv
                    t1 = (nmax[node] - o) * inv
                lo = np.minimum(t0, t1)
                hi = np.maximum(t0, t1)
                tin = np.max(np.where(np.isnan(lo), -np.inf, lo))
                tout = np.min(np.where(np.isnan(hi), np.inf, hi))
                if tin > tout or tout < T_MIN or tin > limit:
                    continue
                a, b = child[node]
                if a < 0:
                    s, e = rng[node]
                    if _ray_tris_any(o, d, tris[order[s:e]], tm):
                        out[i] = True
                        stack.clear()
                        break
                else:
                    stack.append(b)
                    stack.append(a)
        return out

    def any_hit_brute(self, origins, directions, t_max=None) -> np.ndarray:
        """Reference any-hit testing every triangle; used as the oracle."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        n = origins.shape[0]
        out = np.zeros(n, dtype=bool)
        for i in range(n):
            tm = None
            if t_max is not None:
                tm = float(np.broadcast_to(np.asarray(t_max), (n,))[i])
            out[i] = _ray_tris_any(origins[i], directions[i], self.triangles,
                                   tm)
        return out


def visibility(points, directions, mesh: "VisibilityMesh | None",
               t_max=None) -> np.ndarray:
    """Binary visibility of the environment from surface points.

    Origins are offset by RAY_OFFSET along the (unit) query direction so
    the emitting surface does not shadow itself. Returns 1.0 where the ray
    escapes, 0.0 where the mesh blocks it. No mesh means fully visible.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if mesh is None:
        return np.ones(points.shape[0])
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins = points + RAY_OFFSET * directions
    hit = mesh.any_hit(origins, directions, t_max=t_max)
    return np.where(hit, 0.0, 1.0)


def make_box_mesh(center, half_extent) -> np.ndarray:
    """Axis-aligned closed box as 12 triangles (testing and demos)."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extent, dtype=np.float64) * np.ones(3)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                        for sz in (-1, 1)], dtype=np.float64)
    v = c + corners * h
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
             (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in quads:
        tris.append(v[[a, b, cc]])
        tris.append(v[[a, cc, d]])
    return np.asarray(tris)
