"""Synthetic shapes and seeded registration pairs with ground truth."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import gpmm
from .exceptions import ValidationError
from .geometry import SimilarityTransform, TriangleMesh
from .kernels import GaussianKernel
from .validation import as_generator

BASES = ("sphere", "femur_proxy")


def icosphere(subdivisions=3, radius=1.0):
    """Geodesic sphere: 10 * 4**s + 2 vertices."""
    t = (1 + 5**0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(radius * np.array(verts), np.array(faces))


def femur_proxy(subdivisions=3):
    """Elongated shaft with bulbous ends and an offset head, built from a sphere."""
    s = icosphere(subdivisions)
    x, y, z = s.points.T
    radial = 0.35 + 0.3 * z**4
    pts = np.column_stack([x * radial, y * radial, 2.5 * z])
    top = np.clip(z - 0.6, 0, None)
    pts[:, 0] += 1.5 * top**2
    return TriangleMesh(pts, s.triangles)


def two_lobe_mesh(length=2.0, width=0.5, gap=0.2, n_length=20, n_width=4, n_turn=8):
    """Folded strip: two parallel lobes a small ``gap`` apart, joined by a half-turn.

    Points on opposite lobes are close in space but far apart along the
    surface. Both lobes share the x spacing, so every lobe-0 vertex has a
    partner on lobe 1 exactly ``gap`` away. Returns ``(mesh, lobe)`` with
    ``lobe`` 0/1 per vertex (-1 on the turn).
    """
    r = gap / 2
    path, lobe = [], []
    for x in np.linspace(0, length, n_length, endpoint=False):
        path.append((x, -r))
        lobe.append(0)
    for a in np.linspace(-np.pi / 2, np.pi / 2, n_turn, endpoint=False):
        path.append((length + r * np.cos(a), r * np.sin(a)))
        lobe.append(-1)
    for x in np.linspace(length, 0, n_length + 1):
        path.append((x, r))
        lobe.append(1)
    path = np.array(path)
    zs = np.linspace(0, width, n_width)
    pts = np.array([(px, py, z) for px, py in path for z in zs])
    m = len(path)
    tri = []
    for i in range(m - 1):
        for j in range(n_width - 1):
            a, b = i * n_width + j, (i + 1) * n_width + j
            tri += [(a, b, a + 1), (a + 1, b, b + 1)]
    return TriangleMesh(pts, np.array(tri)), np.repeat(lobe, n_width)


def base_shape(name, subdivisions=3):
    if name == "sphere":
        return icosphere(subdivisions)
    if name == "femur_proxy":
        return femur_proxy(subdivisions)
    raise ValidationError(f"unknown base shape {name!r}; expected one of {BASES}")


def smooth_deformation(points, magnitude, beta, seed=None, rank=50):
    """Random smooth field drawn from a Gaussian-kernel GP (std ``magnitude``)."""
    pts = np.asarray(points, dtype=np.float64)
    if magnitude == 0:
        return np.zeros_like(pts)
    kernel = GaussianKernel(beta, pts.shape[1])
    gp = gpmm.build_low_rank(kernel, pts, min(rank, len(pts) * pts.shape[1]))
    return magnitude * gpmm.instance(gp, gpmm.sample_prior(gp, seed))


def bump_deformation(points, center, height, width):
    """Radial bump: pushes points outward along their direction near ``center``."""
    pts = np.asarray(points, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    w = np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * width**2))
    n = pts / np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-12)
    return height * w[:, None] * n


def crop_mesh(mesh, keep):
    """Submesh on vertices where ``keep`` is true; returns ``(mesh, kept_indices)``."""
    keep = np.asarray(keep, dtype=bool)
    idx = np.flatnonzero(keep)
    remap = -np.ones(mesh.n, dtype=np.intp)
    remap[idx] = np.arange(len(idx))
    tri = mesh.triangles
    tri = tri[np.all(keep[tri], axis=1)]
    return TriangleMesh(mesh.points[idx], remap[tri]), idx


@dataclass
class SyntheticPair:
    reference: TriangleMesh
    target: TriangleMesh
    ground_truth: np.ndarray  # reference vertex index of each target vertex
    transform: SimilarityTransform
    deformation: np.ndarray  # per reference vertex, before the global transform


def make_pair(base="sphere", subdivisions=3, deformation=0.1, beta=0.5, noise=0.0, partiality=0.0,
              rotation_deg=0.0, translation=(0.0, 0.0, 0.0), scale=1.0, crop_direction=None, seed=0):
    """Reference mesh and a deformed, transformed, noisy, optionally cropped target.

    Target vertex j sits at ``T(x_i + u(x_i)) + noise`` with ``i =
    ground_truth[j]``. ``partiality`` removes that fraction of vertices with
    the largest coordinate along ``crop_direction`` (random when omitted).
    """
    if deformation < 0 or noise < 0:
        raise ValidationError("deformation and noise must be >= 0")
    if not 0 <= partiality < 1:
        raise ValidationError("partiality must be in [0, 1)")
    if scale <= 0:
        raise ValidationError("scale must be > 0")
    rng = as_generator(seed)
    ref = base_shape(base, subdivisions)
    field = smooth_deformation(ref.points, deformation, beta, seed=rng.integers(2**63))
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_rotvec(np.deg2rad(rotation_deg) * axis).as_matrix()
    T = SimilarityTransform(float(scale), R, np.asarray(translation, dtype=np.float64))
    pts = T.apply(ref.points + field)
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    target = ref.with_points(pts)
    gt = np.arange(ref.n)
    if partiality > 0:
        direction = rng.standard_normal(3) if crop_direction is None else np.asarray(crop_direction, float)
        direction = direction / np.linalg.norm(direction)
        proj = ref.points @ direction
        keep = proj <= np.quantile(proj, 1 - partiality)
        target, gt = crop_mesh(target, keep)
    return SyntheticPair(ref, target, gt, T, field)
