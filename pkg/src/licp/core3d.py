"""Geometric primitives: Euler angles, rigid transforms, point clouds, meshes.

Conventions: right-handed coordinates, angles in degrees, lengths in meters.
Rotations compose as intrinsic Z(yaw) * Y(pitch) * X(roll).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateNeighborhood,
    EmptyMesh,
    NotARotation,
    TooFewPoints,
)

ROT_TOL = 1e-6


def _wrap180(a):
    """Wrap angle(s) to [-180, 180)."""
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class EulerAngles:
    """Yaw/pitch/roll in degrees, composed as R_x(roll) @ R_y(pitch) @ R_z(yaw).

    Yaw is applied first (a spin about the world-vertical z axis), then pitch
    (elevation, about y), then roll (about x, the canonical viewing axis).
    Applying yaw innermost keeps elevation and roll in their own slots no
    matter how the object is spun, matching how view poses are sampled.
    """

    yaw: float
    pitch: float
    roll: float

    def normalized(self) -> "EulerAngles":
        """Wrap yaw/roll to [-180,180) and fold pitch into [-90,90]."""
        yaw, pitch, roll = float(self.yaw), float(self.pitch), float(self.roll)
        pitch = float(_wrap180(pitch))
        if pitch > 90.0:
            pitch = 180.0 - pitch
            yaw += 180.0
            roll += 180.0
        elif pitch < -90.0:
            pitch = -180.0 - pitch
            yaw += 180.0
            roll += 180.0
        return EulerAngles(float(_wrap180(yaw)), pitch, float(_wrap180(roll)))

    def as_array(self):
        return np.array([self.yaw, self.pitch, self.roll], dtype=float)


def euler_to_rotation(angles: EulerAngles) -> np.ndarray:
    """Rotation matrix R_x(roll) @ R_y(pitch) @ R_z(yaw)."""
    y, p, r = np.radians([angles.yaw, angles.pitch, angles.roll])
    cy, sy = np.cos(y), np.sin(y)
    cp, sp = np.cos(p), np.sin(p)
    cr, sr = np.cos(r), np.sin(r)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rx @ ry @ rz


def check_rotation(R: np.ndarray, tol: float = ROT_TOL) -> np.ndarray:
    """Validate a proper rotation; returns R as a float64 array."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise NotARotation("non-finite entries")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise NotARotation(f"R^T R deviates from I by {err:g}")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise NotARotation(f"det(R) = {det:g}")
    return R


def rotation_to_euler(R: np.ndarray) -> EulerAngles:
    """Extract roll-pitch-yaw angles; gimbal lock (|pitch|=90) resolves roll=0."""
    R = check_rotation(R)
    sp = R[0, 2]
    sp = min(1.0, max(-1.0, sp))
    pitch = np.degrees(np.arcsin(sp))
    if abs(sp) > 1.0 - 1e-10:
        # cos(pitch) ~ 0: yaw and roll share an axis; put the twist in yaw
        yaw = np.degrees(np.arctan2(R[1, 0], R[1, 1]))
        roll = 0.0
    else:
        yaw = np.degrees(np.arctan2(-R[0, 1], R[0, 0]))
        roll = np.degrees(np.arctan2(-R[1, 2], R[2, 2]))
    return EulerAngles(float(yaw), float(pitch), float(roll)).normalized()


def geodesic_angle_deg(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angular distance between two rotations in degrees, in [0, 180]."""
    R1 = check_rotation(R1)
    R2 = check_rotation(R2)
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(min(1.0, max(-1.0, c)))))


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    a = np.radians(angle_deg)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(a) * K + (1.0 - np.cos(a)) * (K @ K)


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to M in the Frobenius sense (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform p -> scale * R @ p + t (uniform scale, default 1)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation, tol=1e-9))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        object.__setattr__(self, "translation", t)
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_euler(angles: EulerAngles, translation=(0.0, 0.0, 0.0),
                   scale: float = 1.0) -> "RigidTransform":
        return RigidTransform(euler_to_rotation(angles), np.asarray(translation, float),
                              scale)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        return np.asarray(normals, dtype=float) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply == self.apply(other.apply)."""
        R = project_to_rotation(self.rotation @ other.rotation)
        t = self.scale * self.rotation @ other.translation + self.translation
        return RigidTransform(R, t, self.scale * other.scale)

    def inverse(self) -> "RigidTransform":
        Rinv = self.rotation.T
        return RigidTransform(Rinv, -Rinv @ self.translation / self.scale,
                              1.0 / self.scale)


@dataclass
class PointCloud:
    """Points with optional unit normals and RGB colors in [0,1]."""

    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals count != points count")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors count != points count")

    def __len__(self):
        return len(self.points)

    def select(self, indices) -> "PointCloud":
        return PointCloud(
            self.points[indices],
            None if self.normals is None else self.normals[indices],
            None if self.colors is None else self.colors[indices],
        )

    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Transform points; normals rotate only (scale-invariant); colors pass through."""
    normals = None if cloud.normals is None else T.apply_normals(cloud.normals)
    return PointCloud(T.apply_points(cloud.points), normals, cloud.colors)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    def corners(self):
        """(T,3,3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply_points(self.vertices), self.triangles)


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    c = mesh.corners()
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    c = mesh.corners()
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    lens = np.linalg.norm(n, axis=1)
    lens[lens == 0.0] = 1.0
    return n / lens[:, None]


def remove_degenerate(mesh: TriangleMesh, min_area: float = 1e-12):
    """Drop triangles with area <= min_area. Returns (mesh, dropped_count)."""
    areas = triangle_areas(mesh)
    keep = areas > min_area
    dropped = int((~keep).sum())
    if dropped:
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[keep])
    return mesh, dropped


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    """Concatenate meshes into one (vertices re-indexed)."""
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Draw n area-uniform surface samples; normals set to face normals."""
    if len(mesh) == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise EmptyMesh("mesh has zero total area")
    tri_idx = rng.choice(len(mesh), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    c = mesh.corners()[tri_idx]
    pts = c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])
    return PointCloud(pts, face_normals(mesh)[tri_idx])


def estimate_normals(cloud: PointCloud, k: int, viewpoint) -> PointCloud:
    """PCA normals from k nearest neighbors, oriented toward the viewpoint."""
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = cloud.points
    if len(pts) < k:
        raise TooFewPoints(f"need >= {k} points, have {len(pts)}")
    viewpoint = np.asarray(viewpoint, dtype=float).reshape(3)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    nbrs = pts[idx]                              # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)           # ascending eigenvalues
    if np.any(evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)):
        raise DegenerateNeighborhood("neighborhood covariance rank < 2")
    normals = evecs[:, :, 0]
    toward = viewpoint[None, :] - pts
    flip = np.einsum("ni,ni->n", normals, toward) < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts.copy(), normals, cloud.colors)
