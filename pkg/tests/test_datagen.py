"""Tests for synthetic scene/scan generation and dataset serialization."""
import json
import os

import numpy as np
import pytest

from licp.core3d import PointCloud, RigidTransform, euler_to_rotation
from licp.datagen import (
    CATEGORY_IDS,
    CameraSampler,
    SceneKnobs,
    _rects_overlap,
    _world_rect,
    build_scene,
    canonical_view_rotation,
    gen_dataset,
    load_dataset,
    load_manifest,
    load_sample,
    make_sample,
    sample_camera,
    sample_to_geom_example,
    save_sample,
    voxel_category_labels,
)
from licp.errors import EmptyCrop, PlacementFailure
from licp.furniture import builtin_library, library_by_id
from licp.icp import surface_distance_error
from licp.render import look_at
from licp.tdf import voxelize_tdf

SMALL_CAM = CameraSampler(width=48, height=48, min_distance=1.0,
                          max_distance=2.5)
LONE = SceneKnobs(room_range=(4.0, 5.0), n_objects_range=(1, 1),
                  n_clutter_range=(0, 0))


@pytest.fixture(scope="module")
def library():
    return builtin_library(variants_per_category=1, n_points=512, seed=0)


@pytest.fixture(scope="module")
def chair(library):
    return library_by_id(library)["chair_00"]


class TestBuildScene:
    def test_objects_rest_on_floor(self, library):
        _, meshes = build_scene(library, seed=3)
        for mesh in meshes:
            lo, _ = mesh.bounds()
            assert lo[2] > -1e-6

    def test_footprints_disjoint(self, library):
        by_id = library_by_id(library)
        for seed in range(5):
            spec, _ = build_scene(library, seed=seed)
            rects = [_world_rect(by_id[o.model_id], o.transform)
                     for o in spec.objects]
            for i in range(len(rects)):
                for j in range(i + 1, len(rects)):
                    assert not _rects_overlap(rects[i], rects[j])

    def test_objects_inside_room(self, library):
        by_id = library_by_id(library)
        spec, _ = build_scene(library, seed=7)
        for o in spec.objects:
            r = _world_rect(by_id[o.model_id], o.transform)
            assert r[0] >= 0 and r[1] <= spec.room[0]
            assert r[2] >= 0 and r[3] <= spec.room[1]

    def test_counts_within_knobs(self, library):
        knobs = SceneKnobs()
        for seed in range(5):
            spec, meshes = build_scene(library, knobs, seed=seed)
            assert knobs.n_objects_range[0] <= len(spec.objects) \
                <= knobs.n_objects_range[1]
            assert knobs.n_clutter_range[0] <= len(spec.clutter) \
                <= knobs.n_clutter_range[1]
            assert len(meshes) == len(spec.objects) + len(spec.clutter)

    def test_same_seed_same_scene(self, library):
        spec_a, meshes_a = build_scene(library, seed=11)
        spec_b, meshes_b = build_scene(library, seed=11)
        assert spec_a.room == spec_b.room
        assert [o.model_id for o in spec_a.objects] == \
            [o.model_id for o in spec_b.objects]
        for a, b in zip(spec_a.objects, spec_b.objects):
            np.testing.assert_array_equal(a.transform.rotation,
                                          b.transform.rotation)
            np.testing.assert_array_equal(a.transform.translation,
                                          b.transform.translation)
        for ma, mb in zip(meshes_a, meshes_b):
            np.testing.assert_array_equal(ma.vertices, mb.vertices)

    def test_target_placed_first(self, library):
        spec, _ = build_scene(library, seed=2, target_model_id="sofa_00")
        assert spec.objects[0].model_id == "sofa_00"

    def test_placement_failure(self, library):
        sofas = [m for m in library if m.category == "sofa"]
        knobs = SceneKnobs(room_range=(1.2, 1.2), n_objects_range=(6, 6),
                           max_rejections=200)
        with pytest.raises(PlacementFailure):
            build_scene(sofas, knobs, seed=0)

    def test_empty_library(self):
        with pytest.raises(ValueError):
            build_scene([], seed=0)


class TestCameraSampler:
    def test_azimuth_coverage(self):
        rng = np.random.default_rng(0)
        center = np.array([2.0, 3.0, 0.4])
        hits = np.zeros(16, dtype=bool)
        heights, dists = [], []
        for _ in range(2000):
            cam = sample_camera(center, SMALL_CAM, rng)
            d = cam.center - center
            az = np.arctan2(d[1], d[0])
            hits[int((az + np.pi) / (2 * np.pi) * 16) % 16] = True
            heights.append(cam.center[2])
            dists.append(np.linalg.norm(d[:2]))
        assert hits.all()
        assert np.all(np.abs(np.array(heights) - 1.6) < 0.2)
        assert min(dists) > 0.8 and max(dists) < 2.8

    def test_camera_aims_at_target(self):
        rng = np.random.default_rng(1)
        center = np.array([1.0, 1.0, 0.5])
        for _ in range(50):
            cam = sample_camera(center, SMALL_CAM, rng)
            fwd = cam.pose.rotation[:, 2]
            to_center = center - cam.center
            cos = fwd @ to_center / np.linalg.norm(to_center)
            assert np.degrees(np.arccos(np.clip(cos, -1, 1))) < 8.0

    def test_target_projects_near_center(self):
        rng = np.random.default_rng(2)
        center = np.array([0.0, 0.0, 0.6])
        for _ in range(200):
            cam = sample_camera(center, SMALL_CAM, rng)
            u, v, z = cam.project(center[None])
            assert z[0] > 0
            # within the central 20% of the image
            assert abs(u[0] - cam.width / 2) < 0.1 * cam.width
            assert abs(v[0] - cam.height / 2) < 0.1 * cam.height

    def test_bad_sampler(self):
        with pytest.raises(ValueError):
            CameraSampler(eye_height=0.0)


def lone_chair_sample(chair, scene_seed=0, cam_seed=0, depth_sigma=0.0):
    spec, meshes = build_scene([chair], LONE, seed=scene_seed,
                               target_model_id=chair.model_id)
    rng = np.random.default_rng(cam_seed)
    lo, hi = meshes[0].bounds()
    cam = sample_camera(0.5 * (lo + hi), SMALL_CAM, rng)
    return spec, meshes, cam, make_sample(spec, meshes, 0, cam, rng,
                                          depth_sigma=depth_sigma)


class TestMakeSample:
    def test_lone_object_labels(self, chair):
        _, _, _, sample = lone_chair_sample(chair)
        assert sample.model_id == chair.model_id
        assert np.all(sample.labels == CATEGORY_IDS["chair"])
        assert np.all(sample.instance == 0)
        assert len(sample.cloud) == len(sample.labels)
        assert sample.cloud.normals is not None

    def test_gt_pose_in_action_range(self, chair):
        for seed in range(8):
            _, _, _, sample = lone_chair_sample(chair, scene_seed=seed,
                                                cam_seed=seed)
            assert -90.0 <= sample.rotation.pitch <= 90.0
            assert abs(sample.rotation.roll) <= 12.0   # camera roll + jitter
            assert sample.scale == pytest.approx(chair.source_diagonal,
                                                 rel=0.11)

    def test_gt_pose_matches_crop(self, chair):
        """Transforming the canonical model by the recorded gt pose must land
        on the crop's target points, to within a couple of voxels."""
        for seed in range(3):
            _, _, _, sample = lone_chair_sample(chair, scene_seed=seed,
                                                cam_seed=seed)
            T = RigidTransform(euler_to_rotation(sample.rotation),
                               sample.translation, sample.scale)
            model = PointCloud(T.apply_points(chair.cloud.points))
            vol = voxelize_tdf(sample.cloud, dims=(32, 32, 32))
            err = surface_distance_error(sample.cloud, model)
            assert err < 2.0 * vol.voxel_size

    def test_occluded_target_raises(self, chair):
        spec, meshes, _, _ = lone_chair_sample(chair)
        lo, hi = meshes[0].bounds()
        center = 0.5 * (lo + hi)
        # camera next to the target but looking the other way
        away = look_at(center + [2.0, 0.0, 1.0], center + [6.0, 0.0, 1.0])
        cam_away = sample_camera(center, SMALL_CAM,
                                 np.random.default_rng(0))
        cam_away = type(cam_away)(away, cam_away.width, cam_away.height,
                                  cam_away.focal)
        with pytest.raises(EmptyCrop):
            make_sample(spec, meshes, 0, cam_away, np.random.default_rng(0))

    def test_crop_contains_neighbor_fragments(self, library):
        """With a crowded room, some crops pick up non-target points."""
        knobs = SceneKnobs(room_range=(4.0, 5.0), n_objects_range=(5, 6),
                           n_clutter_range=(3, 3))
        found_other = False
        for seed in range(12):
            rng = np.random.default_rng(seed)
            try:
                spec, meshes = build_scene(library, knobs, seed=seed)
                lo, hi = meshes[0].bounds()
                cam = sample_camera(0.5 * (lo + hi), SMALL_CAM, rng)
                sample = make_sample(spec, meshes, 0, cam, rng)
            except (PlacementFailure, EmptyCrop):
                continue
            if np.any(sample.instance != 0):
                found_other = True
                break
        assert found_other

    def test_canonical_view_rotation_is_z_up(self):
        V = canonical_view_rotation()
        assert np.allclose(V @ V.T, np.eye(3))
        # world +z (up) maps to the camera's -y (image up)
        np.testing.assert_allclose(V[:, 1] @ [0, 0, 1], -1.0, atol=1e-12)


class TestSerialization:
    def test_save_load_roundtrip(self, chair, tmp_path):
        _, _, _, sample = lone_chair_sample(chair)
        save_sample(tmp_path, 0, sample)
        loaded = load_sample(tmp_path, 0)
        np.testing.assert_allclose(loaded["cloud"].points,
                                   sample.cloud.points, atol=1e-6)
        np.testing.assert_array_equal(loaded["labels"], sample.labels)
        np.testing.assert_array_equal(loaded["instance"], sample.instance)
        assert loaded["model_id"] == sample.model_id
        assert loaded["rotation"].yaw == sample.rotation.yaw
        assert loaded["scale"] == sample.scale
        assert loaded["camera"]["width"] == sample.camera.width


class TestGenDataset:
    def test_basic_dataset(self, library, tmp_path):
        out = tmp_path / "ds"
        manifest = gen_dataset(out, library, 8, seed=0, knobs=LONE,
                               sampler=SMALL_CAM)
        assert manifest["format"] == "licp-dataset-1"
        assert manifest["n"] == 8
        assert sum(manifest["counts"].values()) == 8
        # targets cycle the library -> perfectly balanced categories
        assert set(manifest["counts"].values()) == {2}
        assert manifest == load_manifest(out)
        for i in range(8):
            assert (out / "samples" / f"{i:06d}.query.ply").exists()
            assert (out / "samples" / f"{i:06d}.gt.json").exists()

    def test_byte_identical_reruns(self, library, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        gen_dataset(a, library, 4, seed=9, knobs=LONE, sampler=SMALL_CAM)
        gen_dataset(b, library, 4, seed=9, knobs=LONE, sampler=SMALL_CAM)
        for rel in ["manifest.json", "samples/000000.query.ply",
                    "samples/000002.gt.json"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_resumable(self, library, tmp_path):
        out = tmp_path / "ds"
        gen_dataset(out, library, 4, seed=1, knobs=LONE, sampler=SMALL_CAM)
        before = (out / "manifest.json").read_bytes()
        victim = out / "samples" / "000002.query.ply"
        ref_bytes = victim.read_bytes()
        os.remove(victim)
        os.remove(out / "samples" / "000002.gt.json")
        gen_dataset(out, library, 4, seed=1, knobs=LONE, sampler=SMALL_CAM)
        assert victim.read_bytes() == ref_bytes
        assert (out / "manifest.json").read_bytes() == before

    def test_load_dataset_limit(self, library, tmp_path):
        out = tmp_path / "ds"
        gen_dataset(out, library, 4, seed=2, knobs=LONE, sampler=SMALL_CAM)
        full = load_dataset(out)
        part = load_dataset(out, limit=2)
        assert len(full) == 4 and len(part) == 2
        assert full[0]["model_id"] == part[0]["model_id"]
        for s in full:
            assert len(s["cloud"]) == len(s["labels"])

    def test_bad_args(self, library, tmp_path):
        with pytest.raises(ValueError):
            gen_dataset(tmp_path / "x", library, 0)
        with pytest.raises(ValueError):
            gen_dataset(tmp_path / "y", [], 1)


class TestGeomSupervision:
    def test_voxel_labels_nearest(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        cloud = PointCloud(np.repeat(pts, 8, axis=0) +
                           0.01 * np.random.default_rng(0).normal(size=(16, 3)))
        labels = np.repeat([2, 4], 8)
        vol = voxelize_tdf(cloud, dims=(8, 8, 8))
        vox = voxel_category_labels(cloud, labels, vol)
        assert vox.shape == vol.values.shape
        occupied = vol.values > 0
        assert set(np.unique(vox[occupied])) <= {2, 4}
        assert np.all(vox[~occupied] == -1)
        # voxels nearest the left cluster carry its label
        centers = vol.voxel_centers().reshape(8, 8, 8, 3)
        left = occupied & (centers[..., 0] < 0.2)
        assert np.all(vox[left] == 2)

    def test_sample_to_geom_example(self, chair):
        _, _, _, sample = lone_chair_sample(chair)
        values, labels = sample_to_geom_example(
            {"cloud": sample.cloud, "labels": sample.labels}, dims=(16, 16, 16))
        assert values.shape == (16, 16, 16)
        assert labels.shape == (16, 16, 16)
        assert set(np.unique(labels)) <= {-1, CATEGORY_IDS["chair"]}
