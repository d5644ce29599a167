"""Mesh ingestion, SDF training samples, synthetic categories, persistence.

Synthetic categories are built from disjoint watertight primitives placed
directly in normalized coordinates, so the shared "common" part of every
instance is bit-identical across a category and no per-instance rescaling
is needed. Components never touch: the nearest-feature sign test stays
valid everywhere.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (MeshDistanceField, TriangleMesh, face_areas,
                       farthest_point_sampling, validate_mesh)

SAMPLE_MAGIC = b"SDFS"
SAMPLE_VERSION = 1
SAMPLE_BALL_RADIUS = 1.1

# Adopted sampling defaults (near-surface-biased, DeepSDF-style)
NEAR_FRACTION_DEFAULT = 0.95
SIGMA_NEAR_DEFAULT = (0.025, 0.0025)


@dataclass
class ShapeRecord:
    shape_id: str
    category: str
    mesh: TriangleMesh
    is_interest: bool = False
    face_parts: Optional[list] = None  # per-face "common"/"specific" labels


@dataclass
class SdfSampleSet:
    shape_id: str
    points: np.ndarray   # (M, 3) float32
    gt_sdf: np.ndarray   # (M,) float32

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        self.gt_sdf = np.asarray(self.gt_sdf, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (M, 3)")
        if self.gt_sdf.shape != (self.points.shape[0],):
            raise ValueError("gt_sdf length must match points")


# ---------------------------------------------------------------------------
# mesh files


def load_mesh(path) -> TriangleMesh:
    """Load and validate a triangulated OFF or OBJ mesh."""
    path = Path(path)
    if not path.exists():
        raise IOError(f"mesh file not found: {path}")
    ext = path.suffix.lower()
    if ext == ".off":
        mesh = _parse_off(path)
    elif ext == ".obj":
        mesh = _parse_obj(path)
    else:
        raise ValueError(f"unsupported mesh format {ext!r} (need .off or .obj)")
    validate_mesh(mesh)
    return mesh


def _parse_off(path: Path) -> TriangleMesh:
    tokens: list[str] = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path}: not an OFF file")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # skip edge count
        verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            cnt = int(tokens[pos])
            if cnt != 3:
                raise ValueError(f"{path}: non-triangulated face (degree {cnt})")
            faces.append([int(t) for t in tokens[pos + 1:pos + 4]])
            pos += 1 + cnt
    except (IndexError, ValueError) as exc:
        if "non-triangulated" in str(exc):
            raise
        raise ValueError(f"{path}: OFF parse error: {exc}") from exc
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def _parse_obj(path: Path) -> TriangleMesh:
    verts: list = []
    faces: list = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{ln}: bad vertex line")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{ln}: non-triangulated face")
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not verts or not faces:
        raise ValueError(f"{path}: OBJ has no triangles")
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def write_off(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# SDF sampling


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator):
    """Area-weighted surface samples; returns (points, source face ids)."""
    areas = face_areas(mesh)
    probs = areas / areas.sum()
    fid = rng.choice(mesh.n_faces, size=n, p=probs)
    v = mesh.vertices
    a = v[mesh.faces[fid, 0]]
    b = v[mesh.faces[fid, 1]]
    c = v[mesh.faces[fid, 2]]
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, fid


def _uniform_ball(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return d * r[:, None]


def sample_sdf(mesh: TriangleMesh, n_total: int, near_fraction: float = NEAR_FRACTION_DEFAULT,
               sigma_near=SIGMA_NEAR_DEFAULT, seed: int = 0,
               field: Optional[MeshDistanceField] = None,
               shape_id: str = "") -> SdfSampleSet:
    """Near-surface-biased SDF query samples with ground-truth distances.

    near_fraction of the points are surface samples perturbed by zero-mean
    Gaussian noise (half with each sigma in sigma_near); the rest are
    uniform in the radius-1.1 ball. Deterministic for a given seed.
    """
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must be in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_near = int(round(near_fraction * n_total))
    n_far = n_total - n_near
    counts = (n_near // 2, n_near - n_near // 2)

    chunks = []
    for sigma, cnt in zip(sigma_near, counts):
        if cnt == 0:
            continue
        pts, _ = sample_surface(mesh, cnt, rng)
        pts = pts + rng.normal(0.0, sigma, size=(cnt, 3))
        # redraw the rare escapee so every sample stays inside the ball
        bad = np.linalg.norm(pts, axis=1) > SAMPLE_BALL_RADIUS
        while np.any(bad):
            repl, _ = sample_surface(mesh, int(bad.sum()), rng)
            pts[bad] = repl + rng.normal(0.0, sigma, size=(int(bad.sum()), 3))
            bad = np.linalg.norm(pts, axis=1) > SAMPLE_BALL_RADIUS
        chunks.append(pts)
    if n_far:
        chunks.append(_uniform_ball(n_far, SAMPLE_BALL_RADIUS, rng))
    points = np.concatenate(chunks, axis=0)

    if field is None:
        field = MeshDistanceField(mesh)
    gt = field.signed_distance(points)
    return SdfSampleSet(shape_id, points.astype(np.float32), gt.astype(np.float32))


# ---------------------------------------------------------------------------
# SDFS binary format: magic, u32 version, u64 count, count x 4 f32 LE


def write_samples(path, samples: SdfSampleSet) -> None:
    if samples.points.shape[0] == 0:
        raise ValueError("refusing to write an empty sample set")
    rec = np.concatenate([samples.points, samples.gt_sdf[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", SAMPLE_VERSION))
        fh.write(struct.pack("<Q", rec.shape[0]))
        fh.write(rec.astype("<f4").tobytes())


def read_samples(path) -> SdfSampleSet:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SAMPLE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r} (not an SDFS file)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != SAMPLE_VERSION:
            raise ValueError(f"{path}: unsupported SDFS version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(count * 16)
        if len(payload) != count * 16:
            raise ValueError(f"{path}: truncated SDFS file")
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, 4)
    return SdfSampleSet(path.stem, rec[:, :3].copy(), rec[:, 3].copy())


# ---------------------------------------------------------------------------
# synthetic categories


@dataclass(frozen=True)
class SyntheticCategorySpec:
    """Procedural category: a fixed common part plus ranged instance parts."""

    name: str
    kind: str
    common_params: dict
    instance_ranges: dict

    def __post_init__(self):
        for key, (lo, hi) in self.instance_ranges.items():
            if not lo < hi:
                raise ValueError(f"empty parameter range for {key!r}")


def _box(center, half):
    cx, cy, cz = center
    hx, hy, hz = half
    v = np.array([[cx - hx, cy - hy, cz - hz], [cx + hx, cy - hy, cz - hz],
                  [cx + hx, cy + hy, cz - hz], [cx - hx, cy + hy, cz - hz],
                  [cx - hx, cy - hy, cz + hz], [cx + hx, cy - hy, cz + hz],
                  [cx + hx, cy + hy, cz + hz], [cx - hx, cy + hy, cz + hz]])
    f = np.array([[0, 3, 2], [0, 2, 1], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
                  [0, 4, 7], [0, 7, 3], [1, 2, 6], [1, 6, 5]], dtype=np.int64)
    return v, f


def _cylinder(cx, cy, z0, z1, radius, sides=12):
    ang = 2.0 * np.pi * np.arange(sides) / sides
    ring = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    bot = np.concatenate([ring, np.full((sides, 1), z0)], axis=1)
    top = np.concatenate([ring, np.full((sides, 1), z1)], axis=1)
    vc = np.array([[cx, cy, z0], [cx, cy, z1]])
    v = np.concatenate([bot, top, vc], axis=0)
    bc, tc = 2 * sides, 2 * sides + 1
    faces = []
    for i in range(sides):
        j = (i + 1) % sides
        faces.append([i, j, sides + j])
        faces.append([i, sides + j, sides + i])
        faces.append([bc, j, i])
        faces.append([tc, sides + i, sides + j])
    return v, np.array(faces, dtype=np.int64)


def _cone(cx, cy, z_base, z_tip, radius, sides=12):
    ang = 2.0 * np.pi * np.arange(sides) / sides
    base = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang),
                     np.full(sides, z_base)], axis=1)
    v = np.concatenate([base, [[cx, cy, z_base]], [[cx, cy, z_tip]]], axis=0)
    bc, apex = sides, sides + 1
    faces = []
    for i in range(sides):
        j = (i + 1) % sides
        faces.append([bc, j, i])
        faces.append([i, j, apex])
    return v, np.array(faces, dtype=np.int64)


def _merge(parts):
    """Concatenate (verts, faces, label) component triples into one mesh."""
    vs, fs, labels = [], [], []
    offset = 0
    for v, f, label in parts:
        vs.append(v)
        fs.append(f + offset)
        labels.extend([label] * f.shape[0])
        offset += v.shape[0]
    return TriangleMesh(np.concatenate(vs), np.concatenate(fs)), labels


def _build_table(common, inst):
    parts = [(*_box((0.0, 0.0, common["top_z"]),
                    (common["top_hx"], common["top_hy"], common["top_hz"])), "common")]
    leg_top = common["top_z"] - common["top_hz"] - 0.02
    r, h = inst["leg_radius"], inst["leg_height"]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append((*_cylinder(sx * inst["leg_inset_x"], sy * inst["leg_inset_y"],
                                     leg_top - h, leg_top, r), "specific"))
    return _merge(parts)


def _build_chair(common, inst):
    parts = [
        (*_box((0.0, 0.0, 0.05), (common["seat_h"], common["seat_h"], 0.05)), "common"),
        (*_box((0.0, -common["back_y"], common["back_z"]),
               (common["seat_h"], 0.05, common["back_hz"])), "common"),
    ]
    leg_top = -0.02
    r, h = inst["leg_radius"], inst["leg_height"]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append((*_cylinder(sx * inst["leg_inset_x"], sy * inst["leg_inset_y"],
                                     leg_top - h, leg_top, r), "specific"))
    return _merge(parts)


def _build_rocket(common, inst):
    r = common["body_radius"]
    parts = [
        (*_cylinder(0.0, 0.0, common["body_z0"], common["body_z1"], r, sides=16), "common"),
        (*_cone(0.0, 0.0, common["body_z1"] + 0.02, common["nose_z"], r, sides=16), "common"),
    ]
    fl, fh, ft = inst["fin_length"], inst["fin_height"], inst["fin_thick"]
    zc = common["body_z0"] + 0.02 + fh / 2.0
    gap = r + 0.02
    parts.append((*_box((gap + fl / 2.0, 0.0, zc), (fl / 2.0, ft, fh / 2.0)), "specific"))
    parts.append((*_box((-gap - fl / 2.0, 0.0, zc), (fl / 2.0, ft, fh / 2.0)), "specific"))
    parts.append((*_box((0.0, gap + fl / 2.0, zc), (ft, fl / 2.0, fh / 2.0)), "specific"))
    parts.append((*_box((0.0, -gap - fl / 2.0, zc), (ft, fl / 2.0, fh / 2.0)), "specific"))
    return _merge(parts)


_BUILDERS = {"table": _build_table, "chair": _build_chair, "rocket": _build_rocket}


def builtin_specs() -> dict:
    """The three bundled categories; table and chair share leg statistics."""
    leg_ranges = {"leg_radius": (0.04, 0.09), "leg_height": (0.45, 0.75)}
    return {
        "table": SyntheticCategorySpec(
            "table", "table",
            {"top_z": 0.34, "top_hx": 0.55, "top_hy": 0.40, "top_hz": 0.06},
            {**leg_ranges, "leg_inset_x": (0.30, 0.44), "leg_inset_y": (0.22, 0.30)}),
        "chair": SyntheticCategorySpec(
            "chair", "chair",
            {"seat_h": 0.32, "back_y": 0.27, "back_z": 0.42, "back_hz": 0.30},
            {**leg_ranges, "leg_inset_x": (0.18, 0.26), "leg_inset_y": (0.18, 0.26)}),
        "rocket": SyntheticCategorySpec(
            "rocket", "rocket",
            {"body_radius": 0.14, "body_z0": -0.55, "body_z1": 0.35, "nose_z": 0.80},
            {"fin_length": (0.10, 0.20), "fin_height": (0.12, 0.28),
             "fin_thick": (0.015, 0.03)}),
    }


def generate_synthetic_category(spec: SyntheticCategorySpec, n_instances: int,
                                seed: int) -> list:
    """Watertight instances with a bit-identical common part and face labels."""
    if spec.kind not in _BUILDERS:
        raise ValueError(f"unknown synthetic kind {spec.kind!r}")
    records = []
    for i in range(n_instances):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=seed, spawn_key=(i,))))
        mesh = None
        for _attempt in range(10):
            inst = {k: rng.uniform(lo, hi)
                    for k, (lo, hi) in sorted(spec.instance_ranges.items())}
            mesh, parts = _BUILDERS[spec.kind](spec.common_params, inst)
            try:
                validate_mesh(mesh)
                break
            except ValueError:
                mesh = None
        if mesh is None:
            raise ValueError(f"degenerate parameter draws for {spec.name} instance {i}")
        records.append(ShapeRecord(f"{spec.name}_{i:03d}", spec.name, mesh,
                                   face_parts=parts))
    return records


def surface_cloud(mesh: TriangleMesh, face_parts, k: int, seed: int,
                  dense: int = 8192):
    """FPS point cloud on the surface with per-point part labels."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(7,))))
    pts, fid = sample_surface(mesh, max(dense, 4 * k), rng)
    sel = farthest_point_sampling(pts, k, seed)
    labels = None
    if face_parts is not None:
        labels = [face_parts[f] for f in fid[sel]]
    return pts[sel], labels


# ---------------------------------------------------------------------------
# dataset manifest & sidecar files


@dataclass
class ManifestRow:
    shape_id: str
    category: str
    mesh_path: Path
    samples_path: Path
    is_interest: bool


def write_manifest(path, rows: list) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shape_id", "category", "mesh_path", "samples_path", "is_interest"])
        for r in rows:
            w.writerow([r.shape_id, r.category,
                        _relpath(r.mesh_path, base), _relpath(r.samples_path, base),
                        "1" if r.is_interest else "0"])


def _relpath(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def read_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"shape_id", "category", "mesh_path", "samples_path", "is_interest"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise ValueError(f"{path}: bad manifest header {reader.fieldnames}")
        for rec in reader:
            rows.append(ManifestRow(rec["shape_id"], rec["category"],
                                    base / rec["mesh_path"], base / rec["samples_path"],
                                    rec["is_interest"] == "1"))
    ids = [r.shape_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate shape ids")
    return rows


def cloud_path_for(mesh_path) -> Path:
    return Path(mesh_path).with_name(Path(mesh_path).stem + "_cloud.csv")


def faces_path_for(mesh_path) -> Path:
    return Path(mesh_path).with_name(Path(mesh_path).stem + "_faces.csv")


def write_cloud_csv(path, points: np.ndarray, parts=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point_index", "x", "y", "z", "part"])
        for i, p in enumerate(points):
            w.writerow([i, f"{p[0]:.17g}", f"{p[1]:.17g}", f"{p[2]:.17g}",
                        parts[i] if parts is not None else ""])


def read_cloud_csv(path):
    pts, parts = [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            pts.append([float(rec["x"]), float(rec["y"]), float(rec["z"])])
            parts.append(rec["part"])
    return np.array(pts), parts


def write_faces_csv(path, parts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face_index", "part"])
        for i, part in enumerate(parts):
            w.writerow([i, part])


def read_faces_csv(path) -> list:
    with open(path, newline="") as fh:
        return [rec["part"] for rec in csv.DictReader(fh)]
