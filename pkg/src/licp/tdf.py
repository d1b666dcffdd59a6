"""Truncated distance function voxelization of point clouds.

Each voxel stores 1 - min(d / truncation, 1) where d is the exact distance
from the voxel center to the nearest cloud point: 1 on the surface, 0 beyond
the truncation radius.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core3d import PointCloud
from .errors import EmptyCloud

DEFAULT_DIMS = (32, 32, 32)
TRUNCATION_VOXELS = 3.0


@dataclass(frozen=True)
class TdfVolume:
    """dims = (D, H, W) voxel counts along (z, y, x); values in [0, 1],
    stored x-fastest (C order over (D, H, W))."""

    dims: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    truncation: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=float).reshape(3))
        values = np.asarray(self.values, dtype=float).reshape(self.dims)
        object.__setattr__(self, "values", values)
        if min(self.dims) < 1:
            raise ValueError("dims must be >= 1 per axis")
        if not self.truncation > 0:
            raise ValueError("truncation must be > 0")
        if values.min() < -1e-12 or values.max() > 1.0 + 1e-12:
            raise ValueError("values must lie in [0, 1]")

    def voxel_centers(self) -> np.ndarray:
        """(D*H*W, 3) world-space voxel centers, x-fastest order."""
        D, H, W = self.dims
        z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                              indexing="ij")
        ijk = np.stack([x, y, z], axis=-1).reshape(-1, 3)
        return self.origin + (ijk + 0.5) * self.voxel_size


def _grid_geometry(points: np.ndarray, dims, padding_fraction: float):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = hi - lo
    pad = padding_fraction * np.maximum(extent, extent.max() * 0.0)
    lo_p = lo - pad
    hi_p = hi + pad
    sizes = hi_p - lo_p
    dims_xyz = np.array([dims[2], dims[1], dims[0]], dtype=float)
    voxel_size = float(np.max(np.where(sizes > 0, sizes, 0.0) / dims_xyz))
    if voxel_size <= 0.0:
        voxel_size = 1e-6      # degenerate single-point cloud
    center = 0.5 * (lo_p + hi_p)
    origin = center - 0.5 * dims_xyz * voxel_size
    return origin, voxel_size


def voxelize_tdf(cloud: PointCloud, dims=DEFAULT_DIMS,
                 padding_fraction: float = 0.1,
                 truncation: float | None = None) -> TdfVolume:
    """Voxelize to a cubified grid spanning the padded bounding box."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot voxelize an empty cloud")
    dims = tuple(int(d) for d in dims)
    if min(dims) < 2:
        raise ValueError("dims must be >= 2 per axis")
    origin, voxel_size = _grid_geometry(cloud.points, dims, padding_fraction)
    if truncation is None:
        truncation = TRUNCATION_VOXELS * voxel_size
    # compute in cloud-local coordinates so a translated cloud produces an
    # identical value array whenever the translation is exactly representable
    base = cloud.points.min(axis=0)
    vol = TdfVolume(dims, voxel_size, origin, truncation,
                    np.zeros(dims))
    centers = vol.voxel_centers() - base
    tree = cKDTree(cloud.points - base)
    d, _ = tree.query(centers)
    values = 1.0 - np.minimum(d / truncation, 1.0)
    return TdfVolume(dims, voxel_size, origin, truncation, values.reshape(dims))


def tdf_distance_check(vol: TdfVolume, cloud: PointCloud) -> float:
    """Max abs difference between vol.values and a linear-scan recomputation."""
    base = cloud.points.min(axis=0)
    centers = vol.voxel_centers() - base
    pts = cloud.points - base
    max_err = 0.0
    step = max(1, 4_000_000 // max(len(pts), 1))
    flat = vol.values.reshape(-1)
    for start in range(0, len(centers), step):
        c = centers[start:start + step]
        d2 = ((c[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        d = np.sqrt(d2.min(axis=1))
        expect = 1.0 - np.minimum(d / vol.truncation, 1.0)
        max_err = max(max_err, float(np.abs(flat[start:start + len(c)]
                                            - expect).max()))
    return max_err


def save_tdf(vol: TdfVolume, path):
    """JSON header line + raw little-endian float32 payload, x-fastest."""
    header = {
        "format": "licp-tdf-1",
        "dims": list(vol.dims),
        "voxel_size": vol.voxel_size,
        "origin": vol.origin.tolist(),
        "truncation": vol.truncation,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(vol.values.astype("<f4").tobytes())


def load_tdf(path) -> TdfVolume:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "licp-tdf-1":
            raise ValueError("not a licp TDF container")
        dims = tuple(header["dims"])
        n = dims[0] * dims[1] * dims[2]
        values = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(float)
    return TdfVolume(dims, header["voxel_size"], np.array(header["origin"]),
                     header["truncation"], values.reshape(dims))
