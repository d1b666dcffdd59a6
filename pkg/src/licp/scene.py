"""Scene recomposition from labeled scans.

Given a point cloud with per-point instance and category labels (including
"floor" and "wall"), this module retrieves the best-matching CAD model per
object via geometry-net embeddings, aligns each model with the learned
policy, estimates the room boundary from wall/floor evidence, and exports
the recomposed scene as a merged OBJ plus a JSON description.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .core3d import (
    EulerAngles,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    euler_to_rotation,
    rotation_to_euler,
)
from .errors import EmptyLibrary, NoColors, NoLayoutEvidence
from .furniture import CATEGORIES as FURNITURE_CATEGORIES
from .nn import GeomNetParams
from .rl import LicpConfig, _embed, licp_align

DEFAULT_CATEGORIES = FURNITURE_CATEGORIES + ("clutter", "floor", "wall")


# ---------------------------------------------------------------------------
# domain types


@dataclass
class SegmentedCloud:
    """Point cloud plus per-point instance ids and category ids. Category
    ids index into `categories`, which must include "floor" and "wall"."""

    cloud: PointCloud
    instance: np.ndarray
    category: np.ndarray
    categories: tuple = DEFAULT_CATEGORIES

    def __post_init__(self):
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)
        self.category = np.asarray(self.category, dtype=np.int64).reshape(-1)
        n = len(self.cloud)
        if len(self.instance) != n or len(self.category) != n:
            raise ValueError("label arrays must match the point count")
        for required in ("floor", "wall"):
            if required not in self.categories:
                raise ValueError(f"categories must include {required!r}")

    def category_id(self, name: str) -> int:
        return self.categories.index(name)

    def instance_ids(self):
        """Object instance ids: labeled >= 0 and not floor/wall points."""
        skip = {self.category_id("floor"), self.category_id("wall")}
        keep = (self.instance >= 0) & ~np.isin(self.category, list(skip))
        return sorted(int(i) for i in np.unique(self.instance[keep]))


@dataclass
class RoomLayout:
    """Room boundary as an ordered simple 2D polygon plus the floor height."""

    vertices: np.ndarray       # (N, 2) meters, counterclockwise
    floor_z: float

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(self.vertices) < 3:
            raise ValueError("layout polygon needs >= 3 vertices")
        if self.area() <= 0:
            raise ValueError("layout polygon must have positive area")
        if not _polygon_is_simple(self.vertices):
            raise ValueError("layout polygon must be simple")

    def area(self) -> float:
        return _signed_area(self.vertices)


@dataclass
class ScenePlacement:
    """One recomposed object: which model, where, and its display color."""

    model_id: str
    transform: RigidTransform
    color: tuple = (0.5, 0.5, 0.5)


# ---------------------------------------------------------------------------
# CAD retrieval


def library_embeddings(library, geom: GeomNetParams) -> dict:
    """Geometry-net embedding of every model's canonical cloud, by id."""
    return {m.model_id: _embed(m.cloud, geom) for m in library}


def retrieve_cad(segment: PointCloud, library, geom: GeomNetParams,
                 k: int = 3, embeddings: dict | None = None) -> list:
    """Top-k library model ids ranked by Euclidean embedding distance.

    Ties break on model id so the ranking is a deterministic total order.
    Precomputed library embeddings may be passed to amortize repeated calls.
    """
    if not library:
        raise EmptyLibrary("retrieve_cad needs a non-empty library")
    if embeddings is None:
        embeddings = library_embeddings(library, geom)
    q = _embed(segment, geom)
    ranked = sorted((float(np.linalg.norm(embeddings[m.model_id] - q)),
                     m.model_id) for m in library)
    return [model_id for _, model_id in ranked[:k]]


# ---------------------------------------------------------------------------
# room layout


def _signed_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    """Proper intersection test for open segments (shared endpoints ignored)."""
    d1 = np.cross(p4 - p3, p1 - p3)
    d2 = np.cross(p4 - p3, p2 - p3)
    d3 = np.cross(p2 - p1, p3 - p1)
    d4 = np.cross(p2 - p1, p4 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _crosses_any(a1, a2, p, q) -> bool:
    """Whether open segment a1-a2 properly intersects any segment p[i]-q[i]."""
    if len(p) == 0:
        return False
    pq = q - p
    d1 = pq[:, 0] * (a1[1] - p[:, 1]) - pq[:, 1] * (a1[0] - p[:, 0])
    d2 = pq[:, 0] * (a2[1] - p[:, 1]) - pq[:, 1] * (a2[0] - p[:, 0])
    a = a2 - a1
    d3 = a[0] * (p[:, 1] - a1[1]) - a[1] * (p[:, 0] - a1[0])
    d4 = a[0] * (q[:, 1] - a1[1]) - a[1] * (q[:, 0] - a1[0])
    # strictly opposite signs on both sides; touching endpoints don't count
    return bool(np.any((d1 * d2 < 0) & (d3 * d4 < 0)))


def _polygon_is_simple(vertices) -> bool:
    v = np.asarray(vertices, dtype=float)
    n = len(v)
    nxt = np.roll(v, -1, axis=0)
    for i in range(n):
        lo = i + 2
        hi = n if i > 0 else n - 1   # edge (n-1, 0) is adjacent to edge 0
        if lo >= hi:
            continue
        if _crosses_any(v[i], nxt[i], v[lo:hi], nxt[lo:hi]):
            return False
    return True


def _points_in_polygon(points, vertices, eps: float = 0.0) -> np.ndarray:
    """Ray-casting membership; points within eps of an edge count inside."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    v = np.asarray(vertices, dtype=float)
    a, b = v, np.roll(v, -1, axis=0)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    ay, by = a[:, 1][None], b[:, 1][None]
    ax, bx = a[:, 0][None], b[:, 0][None]
    cond = (ay <= y) != (by <= y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
    inside = np.sum(cond & (x < x_cross), axis=1) % 2 == 1
    if eps > 0:
        ab = b - a
        ab2 = np.maximum((ab ** 2).sum(axis=1), 1e-300)
        t = np.clip(((pts[:, None, :] - a) * ab).sum(axis=2) / ab2, 0.0, 1.0)
        close = pts[:, None, :] - (a + t[:, :, None] * ab)
        d = np.sqrt((close ** 2).sum(axis=2)).min(axis=1)
        inside = inside | (d <= eps)
    return inside


def _knn_concave_hull(points: np.ndarray, k: int):
    """k-nearest-neighbor concave hull; returns vertex array or None on
    failure. Walks counterclockwise choosing, among the k nearest unused
    points, the largest right-hand turn that keeps the boundary simple."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    n = len(pts)
    if n < 3:
        return None
    k = min(max(k, 3), n - 1)
    tree = cKDTree(pts)
    start = int(np.lexsort((pts[:, 0], pts[:, 1]))[0])   # lowest y, then x
    hull = [start]
    used = np.zeros(n, dtype=bool)
    used[start] = True
    current = start
    prev_dir = np.array([-1.0, 0.0])   # first sweep starts from due east
    for _ in range(4 * n):
        d, idx = tree.query(pts[current], k=min(k + 1, n))
        idx = np.atleast_1d(idx)
        cands = [j for j in idx if j != current
                 and (not used[j] or (j == start and len(hull) > 2))]
        if not cands:
            return None
        # tightest admissible turn first: smallest counterclockwise sweep
        # from the reversed incoming direction (keeps the interior left)
        back = -prev_dir

        def turn(j):
            v = pts[j] - pts[current]
            ang = np.arctan2(np.cross(back, v), back @ v) % (2 * np.pi)
            return ang if ang > 1e-12 else 2 * np.pi
        nxt = None
        stop = max(len(hull) - 2, 0)   # skip the edge sharing `current`
        hp = pts[np.array(hull[:stop + 1], dtype=np.int64)]
        for j in sorted(cands, key=turn):
            if not _crosses_any(pts[current], pts[j], hp[:-1], hp[1:]):
                nxt = j
                break
        if nxt is None:
            return None
        if nxt == start:
            return pts[np.array(hull)]
        hull.append(nxt)
        used[nxt] = True
        prev_dir = pts[nxt] - pts[current]
        current = nxt
    return None


def concave_hull(points: np.ndarray, k: int = 8,
                 min_contained: float = 0.99,
                 eps: float | None = None) -> np.ndarray:
    """Simple polygon around the points, escalating k until at least
    min_contained of them fall inside (within eps of an edge counts);
    falls back to the convex hull. eps defaults to the median spacing
    between neighboring points."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise ValueError("concave_hull needs >= 3 distinct points")
    if eps is None:
        d, _ = cKDTree(pts).query(pts, k=2)
        eps = float(np.median(d[:, 1]))
    while k < len(pts):
        hull = _knn_concave_hull(pts, k)
        if hull is not None and len(hull) >= 3 and _polygon_is_simple(hull):
            inside = _points_in_polygon(pts, hull, eps=eps)
            if inside.mean() >= min_contained:
                if _signed_area(hull) < 0:
                    hull = hull[::-1]
                return hull
        k = max(k + 1, int(1.5 * k))
    hull = pts[ConvexHull(pts).vertices]
    if _signed_area(hull) < 0:
        hull = hull[::-1]
    return hull


def estimate_layout(seg: SegmentedCloud, cell_size: float = 0.05,
                    k: int = 8) -> RoomLayout:
    """Room boundary from wall evidence (2D occupancy histogram) with floor
    extent as fallback, and floor height from the floor-z histogram mode.

    Wall points are binned onto a ground-plane grid; cells at or above the
    25th percentile of nonzero counts are boundary evidence. Where the scan
    has no wall at all, the occupied floor cells stand in. The boundary is
    the k-nearest-neighbor concave hull over evidence cell centers.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be > 0")
    wall = seg.category == seg.category_id("wall")
    floor = seg.category == seg.category_id("floor")
    if not wall.any() and not floor.any():
        raise NoLayoutEvidence("no wall or floor points")
    pts = seg.cloud.points
    origin = pts[:, :2].min(axis=0)

    def cell_centers(mask):
        ij = np.floor((pts[mask, :2] - origin) / cell_size).astype(np.int64)
        cells, counts = np.unique(ij, axis=0, return_counts=True)
        return cells, counts

    evidence = None
    if wall.any():
        cells, counts = cell_centers(wall)
        threshold = np.percentile(counts, 25.0)
        evidence = cells[counts >= threshold]
    if floor.any():
        fcells, _ = cell_centers(floor)
        occupied = {tuple(c) for c in fcells}
        rim = np.array([c for c in fcells
                        if any((c[0] + dx, c[1] + dy) not in occupied
                               for dx, dy in ((1, 0), (-1, 0), (0, 1),
                                              (0, -1)))],
                       dtype=np.int64).reshape(-1, 2)
        if evidence is None or len(evidence) == 0:
            evidence = rim
        elif len(rim):
            # floor-extent cells fill stretches where the scan has no wall
            tree = cKDTree(evidence)
            d, _ = tree.query(rim)
            far = rim[d > 3.0]
            if len(far):
                evidence = np.vstack([evidence, far])
    if evidence is None or len(evidence) < 3:
        raise NoLayoutEvidence("not enough boundary evidence cells")
    centers = origin + (evidence + 0.5) * cell_size
    hull = concave_hull(centers, k=k, eps=1.5 * cell_size)
    if floor.any():
        z = pts[floor, 2]
        edges = np.arange(z.min(), z.max() + 2 * cell_size, cell_size)
        counts, _ = np.histogram(z, bins=edges)
        mode = int(np.argmax(counts))
        floor_z = float(0.5 * (edges[mode] + edges[mode + 1]))
    else:
        floor_z = float(pts[wall, 2].min())
    return RoomLayout(hull, floor_z)


def dominant_orientation(seg: SegmentedCloud) -> float:
    """Dominant wall/floor yaw (degrees) via PCA of the ground-plane spread;
    rotate the scene by the negative of this to axis-align the room."""
    mask = np.isin(seg.category, [seg.category_id("wall"),
                                  seg.category_id("floor")])
    if not mask.any():
        mask = np.ones(len(seg.cloud), dtype=bool)
    xy = seg.cloud.points[mask, :2]
    xy = xy - xy.mean(axis=0)
    cov = xy.T @ xy / max(len(xy), 1)
    _, vecs = np.linalg.eigh(cov)
    major = vecs[:, -1]
    return float(np.degrees(np.arctan2(major[1], major[0])))


# ---------------------------------------------------------------------------
# medoid color


def medoid_color(cloud: PointCloud) -> np.ndarray:
    """The member color minimizing summed RGB distance to all others;
    ties break to the lowest index."""
    if cloud.colors is None or len(cloud) == 0:
        raise NoColors("medoid_color needs a colored, non-empty cloud")
    c = cloud.colors
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
    return c[int(np.argmin(d.sum(axis=1)))].copy()


# ---------------------------------------------------------------------------
# recomposition


def recompose_scene(seg: SegmentedCloud, library, geom: GeomNetParams,
                    policy, cfg: LicpConfig = LicpConfig(),
                    cell_size: float = 0.05):
    """Retrieve + align a CAD model per object instance and estimate the
    room layout. Returns (layout, placements, diagnostics); per-instance
    failures are recorded in diagnostics["failures"] and skipped."""
    if not library:
        raise EmptyLibrary("recompose_scene needs a non-empty library")
    by_id = {m.model_id: m for m in library}
    layout = estimate_layout(seg, cell_size=cell_size)
    embeddings = library_embeddings(library, geom)
    skip = [seg.category_id("floor"), seg.category_id("wall")]
    placements = []
    diagnostics = {"failures": {}, "instances": {}}
    for inst in seg.instance_ids():
        mask = (seg.instance == inst) & ~np.isin(seg.category, skip)
        if not mask.any():
            diagnostics["failures"][inst] = "empty after stripping"
            continue
        segment = seg.cloud.select(mask)
        try:
            model_id = retrieve_cad(segment, library, geom, k=1,
                                    embeddings=embeddings)[0]
            T, align_diag = licp_align(segment, by_id[model_id], geom,
                                       policy, cfg)
        except Exception as exc:   # record and move on
            diagnostics["failures"][inst] = f"{type(exc).__name__}: {exc}"
            continue
        if segment.colors is not None:
            color = tuple(float(v) for v in medoid_color(segment))
        else:
            color = (0.5, 0.5, 0.5)
        placements.append(ScenePlacement(model_id, T, color))
        diagnostics["instances"][inst] = {
            "model_id": model_id,
            "n_points": int(mask.sum()),
            "chosen_reward": align_diag.get("chosen_reward"),
        }
    return layout, placements, diagnostics


# ---------------------------------------------------------------------------
# export


def _ear_clip(vertices) -> np.ndarray:
    """Triangulate a simple CCW polygon by ear clipping; (M, 3) indices."""
    v = np.asarray(vertices, dtype=float)
    idx = list(range(len(v)))
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * len(v) ** 2:
        guard += 1
        n = len(idx)
        clipped = False
        for pos in range(n):
            i, j, k2 = idx[pos - 1], idx[pos], idx[(pos + 1) % n]
            a, b, c = v[i], v[j], v[k2]
            if np.cross(b - a, c - b) <= 0:
                continue   # reflex corner
            others = [m for m in idx if m not in (i, j, k2)]
            if len(others) and _points_in_triangle(v[others], a, b, c).any():
                continue
            tris.append((i, j, k2))
            idx.pop(pos)
            clipped = True
            break
        if not clipped:
            break
    if len(idx) == 3:
        tris.append(tuple(idx))
    return np.asarray(tris, dtype=np.int64)


def _points_in_triangle(pts, a, b, c):
    d1 = np.cross(b - a, pts - a)
    d2 = np.cross(c - b, pts - b)
    d3 = np.cross(a - c, pts - c)
    return (d1 > 0) & (d2 > 0) & (d3 > 0)


def floor_mesh(layout: RoomLayout) -> TriangleMesh:
    """Flat triangulated floor polygon at floor_z."""
    v2 = layout.vertices
    tris = _ear_clip(v2)
    verts = np.column_stack([v2, np.full(len(v2), layout.floor_z)])
    return TriangleMesh(verts, tris)


def export_scene(layout: RoomLayout, placements, library, out_dir):
    """Write scene.obj (floor + per-object groups) and scene.json.

    Returns (obj_path, json_path). Object vertices in the OBJ are the
    library meshes transformed by their placements.
    """
    os.makedirs(out_dir, exist_ok=True)
    by_id = {m.model_id: m for m in library}
    obj_path = os.path.join(out_dir, "scene.obj")
    json_path = os.path.join(out_dir, "scene.json")
    with open(obj_path, "w") as fh:
        fh.write("# recomposed scene\n")
        offset = 1
        floor = floor_mesh(layout)
        fh.write("g floor\n")
        for p in floor.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for t in floor.triangles:
            fh.write(f"f {t[0] + offset} {t[1] + offset} {t[2] + offset}\n")
        offset += len(floor.vertices)
        for i, pl in enumerate(placements):
            mesh = by_id[pl.model_id].mesh.transformed(pl.transform)
            fh.write(f"g object_{i}\n")
            for p in mesh.vertices:
                fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + offset} {t[1] + offset} "
                         f"{t[2] + offset}\n")
            offset += len(mesh.vertices)
    objects = []
    for pl in placements:
        angles = rotation_to_euler(pl.transform.rotation)
        objects.append({
            "model_id": pl.model_id,
            "yaw": angles.yaw, "pitch": angles.pitch, "roll": angles.roll,
            "t": [float(v) for v in pl.transform.translation],
            "scale": float(pl.transform.scale),
            "color": [float(v) for v in pl.color],
        })
    doc = {
        "layout": {
            "vertices": [[float(x), float(y)] for x, y in layout.vertices],
            "floor_z": float(layout.floor_z),
        },
        "objects": objects,
    }
    with open(json_path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
    return obj_path, json_path


def import_scene(json_path):
    """Load an exported scene JSON back into (RoomLayout, placements)."""
    with open(json_path) as fh:
        doc = json.load(fh)
    layout = RoomLayout(np.asarray(doc["layout"]["vertices"]),
                        doc["layout"]["floor_z"])
    placements = []
    for o in doc["objects"]:
        R = euler_to_rotation(EulerAngles(o["yaw"], o["pitch"], o["roll"]))
        T = RigidTransform(R, np.asarray(o["t"]), o["scale"])
        placements.append(ScenePlacement(o["model_id"], T,
                                         tuple(o["color"])))
    return layout, placements
