"""Ray-casting depth renderer and back-projection.

Camera frame: x right, y down, z forward (optical axis). Depth images store
z-depth (distance along the optical axis), 0 meaning no hit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core3d import PointCloud, RigidTransform, TriangleMesh, estimate_normals
from .errors import DegenerateNeighborhood, TooFewPoints

BVH_TRIANGLE_THRESHOLD = 1024
_LEAF_SIZE = 32
_EPS = 1e-12


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera with camera-to-world pose (scale must be 1)."""

    pose: RigidTransform
    width: int
    height: int
    focal: float
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not self.focal > 0:
            raise ValueError("focal must be > 0")
        if abs(self.pose.scale - 1.0) > 1e-12:
            raise ValueError("camera pose must have unit scale")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def pixel_rays(self):
        """World-space ray origins/directions; direction z-component in camera
        frame is 1, so the ray parameter t equals z-depth."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.focal
        v = (np.arange(self.height) + 0.5 - self.cy) / self.focal
        uu, vv = np.meshgrid(u, v)
        dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        dirs = dirs_cam @ self.pose.rotation.T
        return self.center, dirs

    def project(self, points_world: np.ndarray):
        """Returns (u, v, z) pixel coordinates and camera z-depth."""
        p = (np.asarray(points_world) - self.center) @ self.pose.rotation
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = p[:, 0] / z * self.focal + self.cx
            v = p[:, 1] / z * self.focal + self.cy
        return u, v, z


@dataclass
class DepthImage:
    """Per-pixel z-depth in meters; 0 = no hit."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise ValueError("depth must be 2-D")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth must be finite and >= 0")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


def look_at(eye, target, up=(0.0, 0.0, 1.0), roll_deg: float = 0.0) -> RigidTransform:
    """Camera-to-world pose looking from eye toward target (y-down image frame)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=float)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:            # looking straight along up: pick an arbitrary right
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)   # columns = camera axes in world
    if roll_deg:
        c, s = np.cos(np.radians(roll_deg)), np.sin(np.radians(roll_deg))
        R = R @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(R, eye)


def _moller_trumbore(origin, dirs, v0, e1, e2, tri_ids, best_t, best_tri):
    """Intersect a ray batch against a triangle batch; updates best hits in place.

    dirs: (R,3); v0/e1/e2: (T,3). Boundary hits (u,v on edges) are included so
    shared edges never leak rays.
    """
    # all intermediates are (R, T, 3) via broadcasting
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = (e1[None, :, :] * pvec).sum(axis=2)
    safe = np.abs(det) > _EPS
    inv_det = np.where(safe, 1.0 / np.where(det == 0.0, 1.0, det), 0.0)
    tvec = origin[None, None, :] - v0[None, :, :]
    u = (tvec * pvec).sum(axis=2) * inv_det
    qvec = np.cross(np.broadcast_to(tvec, pvec.shape), e1[None, :, :])
    v = (dirs[:, None, :] * qvec).sum(axis=2) * inv_det
    t = (e2[None, :, :] * qvec).sum(axis=2) * inv_det
    hit = safe & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-9)
    t = np.where(hit, t, np.inf)
    j = np.argmin(t, axis=1)
    rows = np.arange(len(dirs))
    tmin = t[rows, j]
    better = tmin < best_t
    best_t[better] = tmin[better]
    best_tri[better] = tri_ids[j[better]]


class _Bvh:
    """Median-split AABB tree over triangles, traversed with ray batches."""

    def __init__(self, corners: np.ndarray):
        self.corners = corners
        lo = corners.min(axis=1)
        hi = corners.max(axis=1)
        cen = 0.5 * (lo + hi)
        n = len(corners)
        self.nodes = []   # (lo, hi, left, right, leaf_indices or None)
        self._build(np.arange(n), lo, hi, cen)

    def _build(self, idx, lo, hi, cen):
        node_id = len(self.nodes)
        blo = lo[idx].min(axis=0)
        bhi = hi[idx].max(axis=0)
        self.nodes.append([blo, bhi, -1, -1, None])
        if len(idx) <= _LEAF_SIZE:
            self.nodes[node_id][4] = idx
            return node_id
        axis = int(np.argmax(bhi - blo))
        order = np.argsort(cen[idx, axis], kind="stable")
        half = len(idx) // 2
        left = self._build(idx[order[:half]], lo, hi, cen)
        right = self._build(idx[order[half:]], lo, hi, cen)
        self.nodes[node_id][2] = left
        self.nodes[node_id][3] = right
        return node_id

    def intersect(self, origin, dirs, best_t, best_tri):
        # clamp zero direction components: sign does not matter for the slab
        # test once magnitudes are ~1e30 (origin-outside slabs get skipped)
        d_safe = np.where(np.abs(dirs) < 1e-30, 1e-30, dirs)
        inv = 1.0 / d_safe
        self._visit(0, np.arange(len(dirs)), origin, dirs, inv, best_t, best_tri)

    def _visit(self, node_id, ray_ids, origin, dirs, inv, best_t, best_tri):
        blo, bhi, left, right, leaf = self.nodes[node_id]
        t0 = (blo[None, :] - origin[None, :]) * inv[ray_ids]
        t1 = (bhi[None, :] - origin[None, :]) * inv[ray_ids]
        tnear = np.minimum(t0, t1).max(axis=1)
        tfar = np.maximum(t0, t1).min(axis=1)
        mask = (tfar >= np.maximum(tnear, 0.0)) & (tnear <= best_t[ray_ids])
        if not mask.any():
            return
        active = ray_ids[mask]
        if leaf is not None:
            c = self.corners[leaf]
            bt = best_t[active]
            btri = best_tri[active]
            _moller_trumbore(origin, dirs[active], c[:, 0], c[:, 1] - c[:, 0],
                             c[:, 2] - c[:, 0], leaf, bt, btri)
            best_t[active] = bt
            best_tri[active] = btri
            return
        self._visit(left, active, origin, dirs, inv, best_t, best_tri)
        self._visit(right, active, origin, dirs, inv, best_t, best_tri)


def render_hits(mesh: TriangleMesh, cam: PinholeCamera,
                chunk: int = 8192):
    """Render z-depth and per-pixel hit triangle index (-1 = miss)."""
    n_px = cam.width * cam.height
    best_t = np.full(n_px, np.inf)
    best_tri = np.full(n_px, -1, dtype=np.int64)
    if len(mesh) == 0:
        return DepthImage(np.zeros((cam.height, cam.width))), best_tri.reshape(
            cam.height, cam.width)
    origin, dirs = cam.pixel_rays()
    corners = mesh.corners()
    if len(mesh) > BVH_TRIANGLE_THRESHOLD:
        bvh = _Bvh(corners)
        for start in range(0, n_px, chunk):
            sl = slice(start, min(start + chunk, n_px))
            bt = best_t[sl]
            btri = best_tri[sl]
            bvh.intersect(origin, dirs[sl], bt, btri)
            best_t[sl] = bt
            best_tri[sl] = btri
    else:
        v0 = corners[:, 0]
        e1 = corners[:, 1] - v0
        e2 = corners[:, 2] - v0
        tri_ids = np.arange(len(mesh))
        for start in range(0, n_px, chunk):
            sl = slice(start, min(start + chunk, n_px))
            _moller_trumbore(origin, dirs[sl], v0, e1, e2, tri_ids,
                             best_t[sl], best_tri[sl])
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return (DepthImage(depth.reshape(cam.height, cam.width)),
            best_tri.reshape(cam.height, cam.width))


def render_depth(mesh: TriangleMesh, cam: PinholeCamera) -> DepthImage:
    """Nearest-hit z-depth image of the mesh."""
    img, _ = render_hits(mesh, cam)
    return img


def backproject(img: DepthImage, cam: PinholeCamera, normals_k: int = 12,
                with_normals: bool = True) -> PointCloud:
    """World-space point per nonzero pixel; normals from local PCA when the
    cloud is large enough."""
    if (img.height, img.width) != (cam.height, cam.width):
        raise ValueError("image/camera dimension mismatch")
    d = img.depth.reshape(-1)
    mask = d > 0.0
    if not mask.any():
        return PointCloud(np.zeros((0, 3)))
    uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    u = uu.reshape(-1)[mask] + 0.5
    v = vv.reshape(-1)[mask] + 0.5
    z = d[mask]
    x = (u - cam.cx) / cam.focal * z
    y = (v - cam.cy) / cam.focal * z
    pts_cam = np.stack([x, y, z], axis=1)
    cloud = PointCloud(cam.pose.apply_points(pts_cam))
    if with_normals and len(cloud) >= max(normals_k, 4):
        try:
            cloud = estimate_normals(cloud, normals_k, cam.center)
        except (TooFewPoints, DegenerateNeighborhood):
            pass
    return cloud


def visible_indices(ref_cloud: PointCloud, mesh: TriangleMesh, cam: PinholeCamera,
                    tol: float) -> np.ndarray:
    """Indices of ref_cloud points unoccluded from cam (z-depth within tol of
    the rendered depth at their pixel)."""
    img = render_depth(mesh, cam)
    u, v, z = cam.project(ref_cloud.points)
    ui = np.floor(u).astype(int)
    vi = np.floor(v).astype(int)
    ok = (z > 0) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    idx = np.nonzero(ok)[0]
    rendered = img.depth[vi[idx], ui[idx]]
    vis = (rendered > 0.0) & (np.abs(z[idx] - rendered) <= tol)
    return idx[vis]


def fit_camera_for_object(diagonal: float, width: int = 64, height: int = 64,
                          fill: float = 0.7) -> PinholeCamera:
    """Canonical camera on the -x axis looking at the origin (world z stays
    "up" in the image), distance chosen so an object with the given bbox
    diagonal fills ~`fill` of the image. In this frame object yaw (R_z)
    spins about the vertical, R_y tilts toward/away from the camera
    (elevation), and R_x rolls about the viewing axis, so Euler angles of
    camera-relative poses match those semantic roles."""
    focal = float(width)
    radius = 0.5 * diagonal
    distance = focal * radius / (0.5 * fill * min(width, height))
    pose = look_at(np.array([-distance, 0.0, 0.0]), np.zeros(3))
    return PinholeCamera(pose, width, height, focal)
