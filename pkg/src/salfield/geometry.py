"""Meshes, point clouds, spatial queries, sampling, mirroring, Hausdorff.

All structures are immutable after construction and safe to query from
multiple threads. Geometry is carried in float64; training-facing samples
are cast to float32 downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray                 # (N, 3) float64
    saliency: Optional[np.ndarray] = None  # (N,) in [0, 1] when present

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("PointCloud needs an (N, 3) array with N >= 1")
        object.__setattr__(self, "points", pts)
        if self.saliency is not None:
            sal = np.asarray(self.saliency, dtype=np.float64)
            if sal.shape != (pts.shape[0],):
                raise ValueError("saliency length must match point count")
            object.__setattr__(self, "saliency", sal)


@dataclass(frozen=True)
class SymmetryPlane:
    """Plane n.x = d with unit normal n."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError("SymmetryPlane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))


# ---------------------------------------------------------------------------
# mesh validation & normalization


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def validate_mesh(mesh: TriangleMesh, require_watertight: bool = True) -> None:
    """Raise ValueError with a diagnostic if the mesh breaks an invariant."""
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise ValueError("mesh is empty")
    if mesh.faces.min() < 0 or mesh.faces.max() >= mesh.n_vertices:
        raise ValueError("face index out of bounds")
    areas = face_areas(mesh)
    if np.any(areas <= 1e-12):
        bad = int(np.argmin(areas))
        raise ValueError(f"degenerate face {bad} (area {areas[bad]:.3e})")
    if require_watertight and not is_watertight(mesh):
        raise ValueError("mesh is not watertight (unmatched or repeated directed edges)")


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every directed edge occurs exactly once and its reverse exists."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    d = directed[order]
    if d.shape[0] != np.unique(d, axis=0).shape[0]:
        return False
    rev = directed[:, ::-1]
    d_view = d[:, 0].astype(np.int64) * (mesh.n_vertices + 1) + d[:, 1]
    r_view = rev[:, 0].astype(np.int64) * (mesh.n_vertices + 1) + rev[:, 1]
    return bool(np.all(np.isin(r_view, d_view)))


def normalize_to_unit_sphere(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box at the origin and scale max vertex norm to 1."""
    if mesh.n_vertices == 0:
        raise ValueError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    v = mesh.vertices - center
    r = np.linalg.norm(v, axis=1).max()
    if r == 0:
        raise ValueError("mesh has zero extent")
    v = v / r
    m = np.linalg.norm(v, axis=1).max()
    if m > 1.0:  # guard the <= 1 invariant against rounding
        v = v / m
    return TriangleMesh(v, mesh.faces)


# ---------------------------------------------------------------------------
# signed distance via angle-weighted pseudonormals


class MeshDistanceField:
    """Precomputed face/edge/vertex pseudonormals for signed distance queries.

    Distances scan all faces (chunked, vectorized); the sign comes from the
    pseudonormal of the nearest feature, which is robust at edges and
    vertices of watertight meshes.
    """

    def __init__(self, mesh: TriangleMesh):
        validate_mesh(mesh)
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        self.a = v[f[:, 0]]
        self.ab = v[f[:, 1]] - v[f[:, 0]]
        self.ac = v[f[:, 2]] - v[f[:, 0]]
        n = np.cross(self.ab, self.ac)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        self.face_normal = n / norm

        # vertex pseudonormals: incident-angle weighted face normals
        vert_n = np.zeros_like(v)
        for corner in range(3):
            p0 = v[f[:, corner]]
            p1 = v[f[:, (corner + 1) % 3]]
            p2 = v[f[:, (corner + 2) % 3]]
            e1 = p1 - p0
            e2 = p2 - p0
            cosang = np.einsum("ij,ij->i", e1, e2) / (
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vert_n, f[:, corner], ang[:, None] * self.face_normal)
        self.vertex_normal = vert_n / np.maximum(
            np.linalg.norm(vert_n, axis=1, keepdims=True), 1e-300)

        # edge pseudonormals: sum of the two adjacent face normals
        edge_sum: dict = {}
        for e0, e1 in ((0, 1), (1, 2), (2, 0)):
            for fi in range(f.shape[0]):
                key = (min(f[fi, e0], f[fi, e1]), max(f[fi, e0], f[fi, e1]))
                acc = edge_sum.get(key)
                if acc is None:
                    edge_sum[key] = self.face_normal[fi].copy()
                else:
                    acc += self.face_normal[fi]
        # per-face lookup for edges AB, AC, BC (matching barycentric regions)
        edge_n = np.empty((f.shape[0], 3, 3))
        for fi in range(f.shape[0]):
            for slot, (e0, e1) in enumerate(((0, 1), (0, 2), (1, 2))):
                key = (min(f[fi, e0], f[fi, e1]), max(f[fi, e0], f[fi, e1]))
                edge_n[fi, slot] = edge_sum[key]
        self.edge_normal = edge_n

    def signed_distance(self, points: np.ndarray, chunk: int = 128) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(pts.shape[0])
        for s in range(0, pts.shape[0], chunk):
            out[s:s + chunk] = self._signed_distance_chunk(pts[s:s + chunk])
        return out

    def _signed_distance_chunk(self, p: np.ndarray) -> np.ndarray:
        # closest point on every triangle (Ericson regions, branchless)
        ap = p[:, None, :] - self.a[None, :, :]          # (Q, F, 3)
        d1 = np.einsum("fk,qfk->qf", self.ab, ap)
        d2 = np.einsum("fk,qfk->qf", self.ac, ap)
        bp = ap - self.ab[None, :, :]
        d3 = np.einsum("fk,qfk->qf", self.ab, bp)
        d4 = np.einsum("fk,qfk->qf", self.ac, bp)
        cp = ap - self.ac[None, :, :]
        d5 = np.einsum("fk,qfk->qf", self.ab, cp)
        d6 = np.einsum("fk,qfk->qf", self.ac, cp)
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4

        conds = [
            (d1 <= 0) & (d2 <= 0),                        # vertex A
            (d3 >= 0) & (d4 <= d3),                       # vertex B
            (d6 >= 0) & (d5 <= d6),                       # vertex C
            (vc <= 0) & (d1 >= 0) & (d3 <= 0),            # edge AB
            (vb <= 0) & (d2 >= 0) & (d6 <= 0),            # edge AC
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),  # edge BC
        ]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ab = d1 / (d1 - d3)
            t_ac = d2 / (d2 - d6)
            t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            denom = 1.0 / (va + vb + vc)
            v_in = vb * denom
            w_in = vc * denom
        zeros = np.zeros_like(d1)
        ones = np.ones_like(d1)
        v = np.select(conds, [zeros, ones, zeros, t_ab, zeros, 1.0 - t_bc], v_in)
        w = np.select(conds, [zeros, zeros, ones, zeros, t_ac, t_bc], w_in)

        closest = (self.a[None, :, :] + v[:, :, None] * self.ab[None, :, :]
                   + w[:, :, None] * self.ac[None, :, :])
        diff = p[:, None, :] - closest
        dist2 = np.einsum("qfk,qfk->qf", diff, diff)
        best = np.argmin(dist2, axis=1)
        rows = np.arange(p.shape[0])
        bv, bw = v[rows, best], w[rows, best]
        bclosest = closest[rows, best]
        bdiff = p - bclosest
        dist = np.sqrt(dist2[rows, best])

        # nearest-feature pseudonormal
        tol = 1e-9
        normal = self.face_normal[best].copy()
        on_ab = bw <= tol
        on_ac = bv <= tol
        on_bc = np.abs(1.0 - bv - bw) <= tol
        normal[on_ab] = self.edge_normal[best[on_ab], 0]
        normal[on_ac] = self.edge_normal[best[on_ac], 1]
        normal[on_bc] = self.edge_normal[best[on_bc], 2]
        at_a = on_ab & on_ac
        at_b = on_ab & on_bc
        at_c = on_ac & on_bc
        fcs = self.mesh.faces[best]
        normal[at_a] = self.vertex_normal[fcs[at_a, 0]]
        normal[at_b] = self.vertex_normal[fcs[at_b, 1]]
        normal[at_c] = self.vertex_normal[fcs[at_c, 2]]

        sign = np.where(np.einsum("qk,qk->q", bdiff, normal) >= 0, 1.0, -1.0)
        return sign * dist


def signed_distance(mesh: TriangleMesh, field: MeshDistanceField, p) -> float:
    """Signed distance of one point; negative inside, positive outside."""
    if field.mesh is not mesh:
        raise ValueError("distance field was built for a different mesh")
    return float(field.signed_distance(np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# kd-tree


class SpatialIndex:
    """Balanced kd-tree with exact nearest-neighbor queries.

    Ties break to the lowest point index so downstream metrics are
    reproducible.
    """

    _LEAF = 16

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("SpatialIndex needs an (N, d) array with N >= 1")
        self.points = pts
        self._idx = np.arange(pts.shape[0])
        # node arrays: split dim/value and children; -1 marks a leaf
        self._dim: list[int] = []
        self._val: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._lo: list[int] = []
        self._hi: list[int] = []
        self._build(0, pts.shape[0])

    def _build(self, lo: int, hi: int) -> int:
        node = len(self._dim)
        self._dim.append(-1)
        self._val.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._lo.append(lo)
        self._hi.append(hi)
        if hi - lo <= self._LEAF:
            return node
        seg = self.points[self._idx[lo:hi]]
        dim = int(np.argmax(seg.max(axis=0) - seg.min(axis=0)))
        mid = (lo + hi) // 2
        part = np.argpartition(seg[:, dim], mid - lo)
        self._idx[lo:hi] = self._idx[lo:hi][part]
        self._dim[node] = dim
        self._val[node] = float(self.points[self._idx[mid], dim])
        self._left[node] = self._build(lo, mid)
        self._right[node] = self._build(mid, hi)
        return node

    def query(self, p, exclude: int = -1) -> tuple[int, float]:
        """Exact nearest neighbor of p, optionally excluding one index."""
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        best_d2 = np.inf
        best_i = -1
        stack = [0]
        while stack:
            node = stack.pop()
            dim = self._dim[node]
            if dim < 0:
                ids = self._idx[self._lo[node]:self._hi[node]]
                if exclude >= 0:
                    ids = ids[ids != exclude]
                    if ids.size == 0:
                        continue
                d2 = np.einsum("ij,ij->i", self.points[ids] - p, self.points[ids] - p)
                j = np.argmin(d2)
                dmin = d2[j]
                if dmin < best_d2:
                    cand = ids[d2 == dmin]
                    best_d2, best_i = dmin, int(cand.min())
                elif dmin == best_d2:
                    cand = int(ids[d2 == dmin].min())
                    if cand < best_i:
                        best_i = cand
                continue
            delta = p[dim] - self._val[node]
            near, far = (self._right[node], self._left[node]) if delta >= 0 else \
                        (self._left[node], self._right[node])
            # visit far side on exact ties too, to honor the index tie-break
            if delta * delta <= best_d2:
                stack.append(far)
            stack.append(near)
        return best_i, float(np.sqrt(best_d2))

    def query_many(self, points, exclude_self: bool = False) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.empty(pts.shape[0], dtype=np.int64)
        dist = np.empty(pts.shape[0])
        for i, p in enumerate(pts):
            idx[i], dist[i] = self.query(p, exclude=i if exclude_self else -1)
        return idx, dist


def nearest_neighbor(index: SpatialIndex, p) -> tuple[int, float]:
    """Exact nearest indexed point to p; ties go to the lowest index."""
    return index.query(p)


def knn_brute(points: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Indices of the k nearest other points for every point, (N, k)."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ValueError("knn_brute needs 1 <= k < N")
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, chunk):
        block = pts[s:s + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(block.shape[0]), np.arange(s, s + block.shape[0])] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(block.shape[0])[:, None]
        order = np.argsort(d2[rows, part], axis=1, kind="stable")
        out[s:s + chunk] = part[rows, order]
    return out


# ---------------------------------------------------------------------------
# sampling & set distances


def farthest_point_sampling(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Greedy max-min subsample of k indices; the first pick is seeded."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sampling: k={k} out of range [1, {n}]")
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        nd2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(d2, nd2, out=d2)
    return chosen


def mirror(points: np.ndarray, plane: SymmetryPlane) -> np.ndarray:
    """Reflect points across the plane: p' = p - 2 (n.p - d) n."""
    pts = np.asarray(points, dtype=np.float64)
    n = plane.normal
    s = pts @ n - plane.offset
    return pts - 2.0 * s[:, None] * n[None, :]


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """max(sup_a inf_b d, sup_b inf_a d) between two point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("hausdorff: empty point set")
    return max(_directed_hausdorff(a, b), _directed_hausdorff(b, a))


def _directed_hausdorff(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    worst = 0.0
    for s in range(0, a.shape[0], chunk):
        d2 = ((a[s:s + chunk, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return float(np.sqrt(worst))
