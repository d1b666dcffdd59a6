"""Parametric furniture meshes: a small self-contained CAD library.

Four categories (chair, table, cabinet, sofa) built from box and cylinder
primitives, with seeded style variants. All models are z-up, rest on z=0,
and are centered on the z axis in x/y; dimensions are meters.
"""
from __future__ import annotations

import numpy as np

from .core3d import TriangleMesh, merge_meshes
from .rl import ReferenceModel, make_reference_model

CATEGORIES = ("chair", "table", "cabinet", "sofa")


def box(center, size) -> TriangleMesh:
    """Axis-aligned box with outward-facing triangles."""
    c = np.asarray(center, dtype=float)
    h = np.asarray(size, dtype=float) / 2.0
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                 dtype=float) * h + c
    f = np.array([
        [0, 1, 3], [0, 3, 2],      # -x
        [4, 6, 7], [4, 7, 5],      # +x
        [0, 4, 5], [0, 5, 1],      # -y
        [2, 3, 7], [2, 7, 6],      # +y
        [0, 2, 6], [0, 6, 4],      # -z
        [1, 5, 7], [1, 7, 3],      # +z
    ])
    return TriangleMesh(v, f)


def cylinder(center, radius: float, height: float, n_sides: int = 12) -> TriangleMesh:
    """Vertical closed cylinder centered at `center`."""
    c = np.asarray(center, dtype=float)
    ang = np.linspace(0.0, 2 * np.pi, n_sides, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    lo = np.column_stack([ring, np.full(n_sides, -height / 2.0)]) + c
    hi = np.column_stack([ring, np.full(n_sides, height / 2.0)]) + c
    verts = np.vstack([lo, hi, c + [0, 0, -height / 2.0], c + [0, 0, height / 2.0]])
    cb, ct = 2 * n_sides, 2 * n_sides + 1
    faces = []
    for i in range(n_sides):
        j = (i + 1) % n_sides
        faces.append([i, j, n_sides + j])
        faces.append([i, n_sides + j, n_sides + i])
        faces.append([cb, j, i])                      # bottom cap (faces -z)
        faces.append([ct, n_sides + i, n_sides + j])  # top cap (faces +z)
    return TriangleMesh(verts, np.array(faces))


def _legs(width, depth, leg, height, inset):
    parts = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(box((sx * (width / 2 - inset), sy * (depth / 2 - inset),
                              height / 2), (leg, leg, height)))
    return parts


def make_chair(rng: np.random.Generator) -> TriangleMesh:
    """Seat on four legs with a backrest; sometimes armrests."""
    w = rng.uniform(0.38, 0.52)
    d = rng.uniform(0.38, 0.5)
    seat_h = rng.uniform(0.4, 0.5)
    seat_t = rng.uniform(0.04, 0.08)
    back_h = rng.uniform(0.35, 0.55)
    leg = rng.uniform(0.03, 0.05)
    parts = _legs(w, d, leg, seat_h, leg)
    parts.append(box((0, 0, seat_h + seat_t / 2), (w, d, seat_t)))
    parts.append(box((0, -d / 2 + 0.02, seat_h + seat_t + back_h / 2),
                     (w, 0.04, back_h)))
    if rng.random() < 0.5:
        arm_h = 0.2
        for sx in (-1, 1):
            parts.append(box((sx * (w / 2 - 0.02), 0,
                              seat_h + seat_t + arm_h / 2),
                             (0.04, d * 0.8, arm_h)))
    return merge_meshes(parts)


def make_table(rng: np.random.Generator) -> TriangleMesh:
    """Rectangular top on four legs, or a round top on a pedestal."""
    h = rng.uniform(0.65, 0.78)
    top_t = rng.uniform(0.03, 0.06)
    if rng.random() < 0.3:
        r = rng.uniform(0.35, 0.6)
        parts = [cylinder((0, 0, h + top_t / 2), r, top_t),
                 cylinder((0, 0, h / 2), rng.uniform(0.04, 0.08), h),
                 cylinder((0, 0, 0.025), r * rng.uniform(0.4, 0.6), 0.05)]
    else:
        w = rng.uniform(0.8, 1.8)
        d = rng.uniform(0.6, 1.0)
        leg = rng.uniform(0.04, 0.08)
        parts = _legs(w, d, leg, h, leg * 1.5)
        parts.append(box((0, 0, h + top_t / 2), (w, d, top_t)))
    return merge_meshes(parts)


def make_cabinet(rng: np.random.Generator) -> TriangleMesh:
    """Tall carcass, optionally on a plinth, with a protruding top."""
    w = rng.uniform(0.6, 1.2)
    d = rng.uniform(0.35, 0.55)
    h = rng.uniform(0.9, 2.0)
    parts = []
    plinth = 0.0
    if rng.random() < 0.5:
        plinth = rng.uniform(0.05, 0.1)
        parts.append(box((0, 0, plinth / 2), (w * 0.9, d * 0.9, plinth)))
    parts.append(box((0, 0, plinth + h / 2), (w, d, h)))
    top_t = 0.03
    parts.append(box((0, 0, plinth + h + top_t / 2),
                     (w * 1.05, d * 1.05, top_t)))
    # handle bar breaks front/back symmetry
    parts.append(box((w * 0.25, d / 2 + 0.015, plinth + h * 0.55),
                     (0.03, 0.03, h * rng.uniform(0.15, 0.3))))
    return merge_meshes(parts)


def make_sofa(rng: np.random.Generator) -> TriangleMesh:
    """Base with a backrest and two armrests."""
    w = rng.uniform(1.3, 2.2)
    d = rng.uniform(0.7, 0.95)
    base_h = rng.uniform(0.3, 0.42)
    back_h = rng.uniform(0.35, 0.5)
    arm_w = rng.uniform(0.12, 0.22)
    arm_h = rng.uniform(0.15, 0.28)
    back_t = rng.uniform(0.15, 0.25)
    parts = [box((0, 0, base_h / 2), (w, d, base_h)),
             box((0, -d / 2 + back_t / 2, base_h + back_h / 2),
                 (w, back_t, back_h))]
    for sx in (-1, 1):
        parts.append(box((sx * (w / 2 - arm_w / 2), 0, base_h + arm_h / 2),
                         (arm_w, d, arm_h)))
    return merge_meshes(parts)


_MAKERS = {"chair": make_chair, "table": make_table,
           "cabinet": make_cabinet, "sofa": make_sofa}


def make_furniture(category: str, seed: int) -> TriangleMesh:
    if category not in _MAKERS:
        raise ValueError(f"unknown category {category!r}")
    return _MAKERS[category](np.random.default_rng(seed))


def builtin_library(variants_per_category: int = 8, n_points: int = 1024,
                    seed: int = 0) -> list:
    """Seeded library of ReferenceModel across all categories (default 32)."""
    models = []
    for category in CATEGORIES:
        for i in range(variants_per_category):
            model_id = f"{category}_{i:02d}"
            mesh = make_furniture(category, seed * 10007 + hash_id(model_id))
            models.append(make_reference_model(model_id, mesh,
                                               n_points=n_points,
                                               seed=seed + i,
                                               category=category))
    return models


def hash_id(model_id: str) -> int:
    """Stable (non-salted) small hash of a model id."""
    h = 0
    for ch in model_id:
        h = (h * 131 + ord(ch)) % (2 ** 31)
    return h


def library_by_id(models) -> dict:
    return {m.model_id: m for m in models}
