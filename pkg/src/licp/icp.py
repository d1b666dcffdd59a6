"""Classical ICP machinery, the ICP matching score, and alignment metrics.

Nearest neighbors are exact: the k-d tree path is tie-corrected so it always
agrees with a linear scan (lowest index wins on equal distance).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .core3d import PointCloud, RigidTransform, project_to_rotation
from .errors import (
    DegenerateConfiguration,
    EmptyCloud,
    EmptyTarget,
    MissingNormals,
)

_BRUTE_BUDGET = 4_000_000   # max n_query * n_target for the dense path


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    mse_rel_tolerance: float = 1e-6
    max_correspondence_dist: float = 0.1
    variant: str = "point_to_point"
    reject_opposite_normals: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.mse_rel_tolerance > 0:
            raise ValueError("mse_rel_tolerance must be > 0")
        if not self.max_correspondence_dist > 0:
            raise ValueError("max_correspondence_dist must be > 0")
        if self.variant not in ("point_to_point", "point_to_plane"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    rmse: float
    inlier_fraction: float
    iterations: int
    converged: bool

    def to_dict(self):
        return {
            "rotation": self.transform.rotation.tolist(),
            "translation": self.transform.translation.tolist(),
            "scale": self.transform.scale,
            "rmse": self.rmse,
            "inlier_fraction": self.inlier_fraction,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class Correspondence:
    src_index: int
    tgt_index: int
    distance: float


class NearestNeighborIndex:
    """k-d tree over a target cloud with linear-scan-exact tie breaking."""

    def __init__(self, target_points: np.ndarray):
        target_points = np.asarray(target_points, dtype=float).reshape(-1, 3)
        if len(target_points) == 0:
            raise EmptyTarget("target cloud is empty")
        self.points = target_points
        self.tree = cKDTree(target_points)

    def query(self, queries: np.ndarray):
        """Returns (indices, distances); ties resolved to the lowest index."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        d, i = self.tree.query(queries)
        # the tree's winner may not be the lowest-index point among exact ties;
        # re-scan a hair-inflated ball around each query with numpy arithmetic
        radii = d * (1.0 + 1e-9) + 1e-300
        balls = self.tree.query_ball_point(queries, radii)
        out_i = np.empty(len(queries), dtype=np.int64)
        out_d = np.empty(len(queries))
        for q, cand in enumerate(balls):
            cand = np.sort(np.asarray(cand, dtype=np.int64))
            d2 = ((self.points[cand] - queries[q]) ** 2).sum(axis=1)
            j = int(np.argmin(d2))
            out_i[q] = cand[j]
            out_d[q] = np.sqrt(d2[j])
        return out_i, out_d


def nearest_neighbors_brute(queries: np.ndarray, target_points: np.ndarray):
    """Linear-scan exact nearest neighbors (lowest index wins ties)."""
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    target_points = np.asarray(target_points, dtype=float).reshape(-1, 3)
    if len(target_points) == 0:
        raise EmptyTarget("target cloud is empty")
    out_i = np.empty(len(queries), dtype=np.int64)
    out_d = np.empty(len(queries))
    step = max(1, _BRUTE_BUDGET // max(len(target_points), 1))
    for start in range(0, len(queries), step):
        q = queries[start:start + step]
        d2 = ((q[:, None, :] - target_points[None, :, :]) ** 2).sum(axis=2)
        j = np.argmin(d2, axis=1)
        out_i[start:start + len(q)] = j
        out_d[start:start + len(q)] = np.sqrt(d2[np.arange(len(q)), j])
    return out_i, out_d


def nearest_neighbor(query, target: PointCloud) -> Correspondence:
    """Exact nearest target point for a single query point."""
    if len(target) == 0:
        raise EmptyTarget("target cloud is empty")
    i, d = nearest_neighbors_brute(np.asarray(query, dtype=float).reshape(1, 3),
                                   target.points)
    return Correspondence(0, int(i[0]), float(d[0]))


def _match(src_points, target_points, index: NearestNeighborIndex | None):
    if index is not None and len(src_points) * len(target_points) > _BRUTE_BUDGET:
        return index.query(src_points)
    return nearest_neighbors_brute(src_points, target_points)


def fit_rigid_point_to_point(src_pts, tgt_pts) -> RigidTransform:
    """Closed-form least-squares rotation + translation (Kabsch, scale = 1)."""
    src = np.asarray(src_pts, dtype=float).reshape(-1, 3)
    tgt = np.asarray(tgt_pts, dtype=float).reshape(-1, 3)
    if len(src) != len(tgt):
        raise ValueError("point lists must be paired")
    if len(src) < 3:
        raise DegenerateConfiguration("need >= 3 point pairs")
    src_c = src.mean(axis=0)
    tgt_c = tgt.mean(axis=0)
    H = (src - src_c).T @ (tgt - tgt_c)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateConfiguration("cross-covariance rank < 2")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = tgt_c - R @ src_c
    return RigidTransform(project_to_rotation(R), t)


def _solve_point_to_plane(src, tgt, normals):
    """One linearized point-to-plane step: minimize sum(n.(R s + t - g))^2
    with R ~ I + [w]x. Returns a RigidTransform."""
    c = np.cross(src, normals)
    A = np.concatenate([c, normals], axis=1)          # (N, 6)
    b = -np.einsum("ij,ij->i", normals, src - tgt)
    ATA = A.T @ A
    ATb = A.T @ b
    try:
        x = np.linalg.solve(ATA, ATb)
    except np.linalg.LinAlgError:
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
    w, t = x[:3], x[3:]
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    R = project_to_rotation(np.eye(3) + K)
    return RigidTransform(R, t)


def icp_refine(src: PointCloud, tgt: PointCloud, init: RigidTransform,
               cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Iterative refinement of init aligning src onto tgt. Scale is never
    estimated; init's scale is carried through unchanged."""
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyCloud("icp_refine needs non-empty clouds")
    if cfg.variant == "point_to_plane" and tgt.normals is None:
        raise MissingNormals("point_to_plane requires target normals")
    index = NearestNeighborIndex(tgt.points)
    current = init
    prev_mse = None
    converged = False
    iterations = 0
    inlier_fraction = 0.0
    rmse = float("inf")
    for iterations in range(1, cfg.max_iterations + 1):
        moved = current.apply_points(src.points)
        idx, dist = _match(moved, tgt.points, index)
        inlier = dist <= cfg.max_correspondence_dist
        if (cfg.reject_opposite_normals and src.normals is not None
                and tgt.normals is not None):
            # on thin geometry a point can match the far side of a slab;
            # drop pairs whose normals point opposite ways
            moved_n = src.normals @ current.rotation.T
            compat = np.einsum("ij,ij->i", moved_n, tgt.normals[idx]) > 0.0
            if (inlier & compat).any():
                inlier = inlier & compat
        if not inlier.any():
            return IcpResult(init, float("inf"), 0.0, iterations, False)
        s_in = moved[inlier]
        g_in = tgt.points[idx[inlier]]
        mse = float((dist[inlier] ** 2).mean())
        rmse = float(np.sqrt(mse))
        inlier_fraction = float(inlier.mean())
        if prev_mse is not None:
            rel = abs(prev_mse - mse) / max(prev_mse, 1e-300)
            if rel < cfg.mse_rel_tolerance:
                converged = True
                break
        prev_mse = mse
        if cfg.variant == "point_to_point":
            try:
                step = fit_rigid_point_to_point(s_in, g_in)
            except DegenerateConfiguration:
                break
        else:
            n_in = tgt.normals[idx[inlier]]
            step = _solve_point_to_plane(s_in, g_in, n_in)
        current = step.compose(current)
    return IcpResult(current, rmse, inlier_fraction, iterations, converged)


def icp_score(query: PointCloud, reference: PointCloud,
              sigma_r: float = 0.02, cfg: IcpConfig | None = None) -> float:
    """ICP matching score in [0,1]: inlier_fraction * exp(-rmse / sigma_r)
    after centroid pre-alignment and point-to-point refinement."""
    if len(query) == 0 or len(reference) == 0:
        raise EmptyCloud("icp_score needs non-empty clouds")
    if cfg is None:
        cfg = IcpConfig(max_iterations=30, variant="point_to_point")
    init = RigidTransform(np.eye(3), reference.centroid() - query.centroid())
    result = icp_refine(query, reference, init, cfg)
    if not np.isfinite(result.rmse):
        return 0.0
    return float(result.inlier_fraction * np.exp(-result.rmse / sigma_r))


def surface_distance_error(scan: PointCloud, model: PointCloud) -> float:
    """Mean distance from scan points to their nearest model point."""
    if len(scan) == 0 or len(model) == 0:
        raise EmptyCloud("surface_distance_error needs non-empty clouds")
    _, dist = _match(scan.points, model.points, NearestNeighborIndex(model.points))
    return float(dist.mean())


def normal_error(scan: PointCloud, model: PointCloud):
    """Per-scan-point 1 - |n_scan . n_model| against the closest model point.
    Returns (per_point_errors, mean)."""
    if scan.normals is None or model.normals is None:
        raise MissingNormals("both clouds must carry normals")
    idx, _ = _match(scan.points, model.points, NearestNeighborIndex(model.points))
    cos = np.abs(np.einsum("ij,ij->i", scan.normals, model.normals[idx]))
    errors = 1.0 - np.clip(cos, 0.0, 1.0)
    return errors, float(errors.mean())


def error_recall_curve(errors, thresholds):
    """Fraction of errors strictly below each threshold."""
    errors = np.asarray(errors, dtype=float)
    if len(errors) == 0:
        raise ValueError("errors must be non-empty")
    return [(float(t), float((errors < t).mean())) for t in thresholds]


def curve_to_csv(curve, path):
    with open(path, "w") as fh:
        fh.write("threshold,recall\n")
        for t, r in curve:
            fh.write(f"{t:.9g},{r:.9g}\n")
