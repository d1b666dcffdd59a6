"""Synthetic training-data generation.

Procedurally furnished rooms stand in for scanned interiors: furniture is
placed on the floor with non-overlapping footprints, a camera at person
height orbits the target object, the scene is depth-rendered with noise,
and a crop around the target (deliberately contaminated by neighboring
geometry) becomes one pose-labeled training sample. Datasets serialize as
`samples/NNNNNN.query.ply` + `samples/NNNNNN.gt.json` + `manifest.json` and
are a pure function of (library, n, seed).
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .core3d import (
    EulerAngles,
    PointCloud,
    RigidTransform,
    rotation_about_axis,
    rotation_to_euler,
)
from .errors import EmptyCrop, PlacementFailure
from .furniture import CATEGORIES, box
from .meshio import load_ply, save_ply
from .render import DepthImage, PinholeCamera, backproject, look_at, render_depth

logger = logging.getLogger(__name__)

CATEGORY_IDS = {name: i for i, name in enumerate(CATEGORIES)}
CATEGORY_IDS["clutter"] = len(CATEGORIES)
N_CATEGORIES = len(CATEGORY_IDS)


# ---------------------------------------------------------------------------
# scene construction


@dataclass
class PlacedObject:
    model_id: str | None       # None for clutter boxes
    category: str
    transform: RigidTransform  # reference canonical frame -> world


@dataclass
class SceneSpec:
    room: tuple                # (x extent, y extent) in meters, floor at z=0
    objects: list              # PlacedObject, furniture only
    clutter: list              # (size triple, translation) of clutter boxes
    seed: int


@dataclass(frozen=True)
class SceneKnobs:
    room_range: tuple = (4.0, 7.0)
    n_objects_range: tuple = (3, 8)
    n_clutter_range: tuple = (0, 5)
    size_jitter: tuple = (0.9, 1.1)
    max_rejections: int = 1000


def _world_rect(ref, transform):
    """Footprint (xmin, xmax, ymin, ymax) of the transformed model bbox."""
    lo, hi = ref.mesh.bounds()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    w = transform.apply_points(corners)
    return (w[:, 0].min(), w[:, 0].max(), w[:, 1].min(), w[:, 1].max())


def _rects_overlap(a, b):
    return not (a[1] <= b[0] or b[1] <= a[0] or a[3] <= b[2] or b[3] <= a[2])


def _grounded_transform(ref, yaw_deg, scale, xy):
    """Transform putting the model at xy, rotated about z, resting on z=0."""
    R = rotation_about_axis((0.0, 0.0, 1.0), yaw_deg)
    verts = scale * ref.mesh.vertices @ R.T
    tz = -verts[:, 2].min()
    return RigidTransform(R, np.array([xy[0], xy[1], tz]), scale)


def build_scene(library, knobs: SceneKnobs = SceneKnobs(), seed: int = 0,
                target_model_id: str | None = None):
    """Place furniture with non-overlapping footprints plus clutter boxes.

    Returns (SceneSpec, meshes) where meshes holds a world-space TriangleMesh
    per placed object followed by one per clutter box. If target_model_id is
    given, that model is placed first (index 0).
    """
    if not library:
        raise ValueError("build_scene needs a non-empty library")
    by_id = {m.model_id: m for m in library}
    rng = np.random.default_rng(seed)
    room = tuple(rng.uniform(*knobs.room_range, size=2))
    n_objects = int(rng.integers(knobs.n_objects_range[0],
                                 knobs.n_objects_range[1] + 1))
    model_ids = []
    if target_model_id is not None:
        model_ids.append(target_model_id)
    while len(model_ids) < n_objects:
        model_ids.append(library[int(rng.integers(len(library)))].model_id)
    placed, meshes, rects = [], [], []
    rejections = 0
    for model_id in model_ids:
        ref = by_id[model_id]
        while True:
            yaw = float(rng.uniform(-180.0, 180.0))
            scale = ref.source_diagonal * float(rng.uniform(*knobs.size_jitter))
            xy = rng.uniform(0.0, 1.0, size=2) * room
            T = _grounded_transform(ref, yaw, scale, xy)
            rect = _world_rect(ref, T)
            ok = (rect[0] >= 0 and rect[1] <= room[0] and
                  rect[2] >= 0 and rect[3] <= room[1] and
                  not any(_rects_overlap(rect, r) for r in rects))
            if ok:
                break
            rejections += 1
            if rejections > knobs.max_rejections:
                raise PlacementFailure(
                    f"no room for {model_id!r} after {rejections} rejections")
        placed.append(PlacedObject(model_id, ref.category or "chair", T))
        meshes.append(ref.mesh.transformed(T))
        rects.append(rect)
    clutter = []
    n_clutter = int(rng.integers(knobs.n_clutter_range[0],
                                 knobs.n_clutter_range[1] + 1))
    for _ in range(n_clutter):
        size = tuple(rng.uniform(0.05, 0.2, size=3))
        if placed and rng.random() < 0.5:   # on top of a random object
            j = int(rng.integers(len(placed)))
            r = rects[j]
            lo, hi = meshes[j].bounds()
            xy = (rng.uniform(r[0], r[1]), rng.uniform(r[2], r[3]))
            z = hi[2]
        else:                               # on the floor
            xy = tuple(rng.uniform(0.0, 1.0, size=2) * room)
            z = 0.0
        t = np.array([xy[0], xy[1], z + size[2] / 2.0])
        clutter.append((size, tuple(t)))
        meshes.append(box(t, size))
    return SceneSpec(room, placed, clutter, seed), meshes


# ---------------------------------------------------------------------------
# camera sampling


@dataclass(frozen=True)
class CameraSampler:
    eye_height: float = 1.6
    min_distance: float = 1.0
    max_distance: float = 4.0
    roll_range: tuple = (-10.0, 10.0)
    jitter_deg: float = 1.0
    jitter_m: float = 0.02
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.eye_height <= 0:
            raise ValueError("eye_height must be > 0")


def sample_camera(target_center, sampler: CameraSampler,
                  rng: np.random.Generator) -> PinholeCamera:
    """Person-height camera at a random azimuth and distance, aimed at the
    target center with random roll, then jittered in pose."""
    center = np.asarray(target_center, dtype=float)
    azimuth = rng.uniform(-np.pi, np.pi)
    distance = rng.uniform(sampler.min_distance, sampler.max_distance)
    eye = np.array([center[0] + distance * np.cos(azimuth),
                    center[1] + distance * np.sin(azimuth),
                    sampler.eye_height])
    roll = float(rng.uniform(*sampler.roll_range))
    pose = look_at(eye, center, roll_deg=roll)
    axis = rng.normal(size=3)
    angle = float(rng.normal(0.0, sampler.jitter_deg))
    R = pose.rotation @ rotation_about_axis(axis, angle)
    t = pose.translation + rng.normal(0.0, sampler.jitter_m, size=3)
    return PinholeCamera(RigidTransform(R, t), sampler.width, sampler.height,
                         float(sampler.width))


# ---------------------------------------------------------------------------
# sample construction


@dataclass
class TrainingSample:
    cloud: PointCloud          # crop in the capture camera's frame
    labels: np.ndarray         # per-point category id
    instance: np.ndarray       # per-point scene object index (-1 = clutter)
    model_id: str
    category: str
    rotation: EulerAngles      # camera-relative gt rotation of the target
    translation: np.ndarray    # camera-frame gt translation
    scale: float
    camera: PinholeCamera
    seed: int = 0


def canonical_view_rotation() -> np.ndarray:
    """Rotation of the canonical reference camera (on the -x axis, looking at
    the origin). Maps camera image axes into the z-up canonical frame."""
    return look_at(np.array([-1.0, 0.0, 0.0]), np.zeros(3)).rotation


def _composite_depth(meshes, cam: PinholeCamera):
    """Per-object renders merged by z-min; returns (depth, owner index map)."""
    depth = np.zeros((cam.height, cam.width))
    owner = np.full((cam.height, cam.width), -1, dtype=np.int64)
    for i, mesh in enumerate(meshes):
        d = render_depth(mesh, cam).depth
        closer = (d > 0) & ((depth == 0) | (d < depth))
        depth[closer] = d[closer]
        owner[closer] = i
    return depth, owner


def make_sample(spec: SceneSpec, meshes, target_index: int, cam: PinholeCamera,
                rng: np.random.Generator, depth_sigma: float = 0.003,
                crop_inflation: float = 0.15, min_points: int = 30,
                min_target_points: int = 20) -> TrainingSample:
    """Render the scene, crop the target's inflated gt box (neighbor
    fragments included on purpose), and record the camera-relative pose."""
    target = spec.objects[target_index]
    depth, owner = _composite_depth(meshes, cam)
    if depth_sigma > 0:
        noise = rng.normal(0.0, depth_sigma, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)
    cloud = backproject(DepthImage(depth), cam, with_normals=True)
    owners = owner.reshape(-1)[depth.reshape(-1) > 0]
    lo, hi = meshes[target_index].bounds()
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * (1.0 + crop_inflation)
    inside = np.all(np.abs(cloud.points - center) <= half, axis=1)
    n_target = int(((owners == target_index) & inside).sum())
    if inside.sum() < min_points or n_target < min_target_points:
        raise EmptyCrop(
            f"target {target.model_id!r} occluded: {n_target} visible points")
    crop = cloud.select(inside)
    owners = owners[inside]
    n_objects = len(spec.objects)
    labels = np.empty(len(owners), dtype=np.int64)
    instance = np.where(owners < n_objects, owners, -1)
    for i, val in enumerate(owners):
        if val < n_objects:
            labels[i] = CATEGORY_IDS[spec.objects[val].category]
        else:
            labels[i] = CATEGORY_IDS["clutter"]
    # express the crop and the gt pose in the canonical viewing frame: the
    # capture camera's image axes re-mapped so world-up stays the +z axis
    # (the frame a canonical-camera render of the reference lives in). In
    # this frame the gt yaw covers [-180,180) while pitch/roll stay small,
    # matching the rotation bins.
    V = canonical_view_rotation() @ cam.pose.rotation.T
    pts = (crop.points - cam.pose.translation) @ V.T
    nrm = None if crop.normals is None else crop.normals @ V.T
    T_obj = target.transform
    rel_R = V @ T_obj.rotation
    rel_t = V @ (T_obj.translation - cam.pose.translation)
    return TrainingSample(PointCloud(pts, nrm), labels, instance,
                          target.model_id, target.category,
                          rotation_to_euler(rel_R), rel_t, T_obj.scale, cam,
                          seed=spec.seed)


# ---------------------------------------------------------------------------
# serialization


def _sample_paths(out_dir, index):
    stem = os.path.join(out_dir, "samples", f"{index:06d}")
    return stem + ".query.ply", stem + ".gt.json"


def save_sample(out_dir, index: int, sample: TrainingSample):
    ply_path, gt_path = _sample_paths(out_dir, index)
    os.makedirs(os.path.dirname(ply_path), exist_ok=True)
    save_ply(sample.cloud, ply_path)
    cam = sample.camera
    gt = {
        "model_id": sample.model_id,
        "category": sample.category,
        "yaw": sample.rotation.yaw,
        "pitch": sample.rotation.pitch,
        "roll": sample.rotation.roll,
        "translation": [float(v) for v in sample.translation],
        "scale": float(sample.scale),
        "camera": {
            "width": cam.width, "height": cam.height, "focal": cam.focal,
            "rotation": cam.pose.rotation.tolist(),
            "translation": cam.pose.translation.tolist(),
        },
        "labels": sample.labels.tolist(),
        "instance": sample.instance.tolist(),
        "seed": sample.seed,
    }
    with open(gt_path, "w") as fh:
        json.dump(gt, fh, sort_keys=True, separators=(",", ":"))


def load_sample(out_dir, index: int) -> dict:
    """Sample as a plain dict: cloud, labels, model_id, rotation, ..."""
    ply_path, gt_path = _sample_paths(out_dir, index)
    with open(gt_path) as fh:
        gt = json.load(fh)
    cloud = load_ply(ply_path)
    return {
        "cloud": cloud,
        "labels": np.asarray(gt["labels"], dtype=np.int64),
        "instance": np.asarray(gt["instance"], dtype=np.int64),
        "model_id": gt["model_id"],
        "category": gt["category"],
        "rotation": EulerAngles(gt["yaw"], gt["pitch"], gt["roll"]),
        "translation": np.asarray(gt["translation"]),
        "scale": gt["scale"],
        "camera": gt["camera"],
        "seed": gt["seed"],
    }


def gen_dataset(out_dir, library, n_samples: int, seed: int = 0,
                knobs: SceneKnobs = SceneKnobs(),
                sampler: CameraSampler = CameraSampler(),
                max_attempts: int = 30, progress=None) -> dict:
    """Generate n pose-labeled samples; resumable (existing files are kept).

    Targets cycle through the library so categories stay balanced. Each
    (seed, index, attempt) triple owns an independent random stream, so the
    output is a pure function of (library, n, seed) regardless of restarts.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not library:
        raise ValueError("gen_dataset needs a non-empty library")
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    counts = {}
    records = []
    for i in range(n_samples):
        ply_path, gt_path = _sample_paths(out_dir, i)
        target = library[i % len(library)]
        if not (os.path.exists(ply_path) and os.path.exists(gt_path)):
            sample = None
            for attempt in range(max_attempts):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, i, attempt]))
                scene_seed = int(rng.integers(2 ** 31))
                try:
                    spec, meshes = build_scene(
                        library, knobs, seed=scene_seed,
                        target_model_id=target.model_id)
                    t_lo, t_hi = meshes[0].bounds()
                    cam = sample_camera(0.5 * (t_lo + t_hi), sampler, rng)
                    sample = make_sample(spec, meshes, 0, cam, rng)
                    break
                except (PlacementFailure, EmptyCrop):
                    continue
            if sample is None:
                raise RuntimeError(
                    f"sample {i} failed {max_attempts} attempts")
            save_sample(out_dir, i, sample)
        with open(gt_path) as fh:
            gt = json.load(fh)
        counts[gt["category"]] = counts.get(gt["category"], 0) + 1
        records.append({"index": i, "model_id": gt["model_id"],
                        "category": gt["category"]})
        if progress is not None and (i + 1) % 100 == 0:
            progress(i + 1, n_samples)
    manifest = {
        "format": "licp-dataset-1",
        "n": n_samples,
        "seed": seed,
        "models": sorted(m.model_id for m in library),
        "counts": counts,
        "samples": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    return manifest


def load_manifest(out_dir) -> dict:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)


def load_dataset(out_dir, limit: int | None = None) -> list:
    manifest = load_manifest(out_dir)
    n = manifest["n"] if limit is None else min(limit, manifest["n"])
    return [load_sample(out_dir, i) for i in range(n)]


# ---------------------------------------------------------------------------
# geometry-net supervision


def voxel_category_labels(cloud: PointCloud, point_labels, vol) -> np.ndarray:
    """Per-voxel label = label of the nearest point, or -1 beyond truncation."""
    from scipy.spatial import cKDTree
    point_labels = np.asarray(point_labels)
    tree = cKDTree(cloud.points)
    dist, idx = tree.query(vol.voxel_centers())
    out = np.where(dist < vol.truncation, point_labels[idx], -1)
    return out.reshape(vol.values.shape)


def sample_to_geom_example(sample: dict, dims=(32, 32, 32)):
    """(tdf values, voxel labels) pair for supervised geometry training."""
    from .tdf import voxelize_tdf
    vol = voxelize_tdf(sample["cloud"], dims=dims)
    labels = voxel_category_labels(sample["cloud"], sample["labels"], vol)
    return vol.values, labels
