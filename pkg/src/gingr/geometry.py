"""Geometry containers, mesh operators and closed-form alignment.

Point sets and triangle meshes are immutable: their coordinate arrays are
read-only copies and derived quantities (edges, normals) are cached.
"""

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .exceptions import (
    AlignmentError,
    DecimationError,
    UnsupportedOperationError,
    ValidationError,
)
from .validation import as_generator, check_points


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PointSet:
    """Ordered set of ``n`` points in ``d`` dimensions (d in {2, 3})."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(check_points(self.points)))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def has_triangles(self):
        return False

    def with_points(self, points):
        """Same connectivity (if any), new coordinates."""
        return type(self)(points)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n}, d={self.d})"


@dataclass(frozen=True, eq=False)
class TriangleMesh(PointSet):
    """Point set with triangle connectivity (vertex-index triples)."""

    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        super().__post_init__()
        tri = np.asarray(self.triangles)
        if tri.size == 0:
            tri = np.zeros((0, 3), dtype=np.int64)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise ValidationError(f"triangles must have shape (t, 3), got {tri.shape}")
        if not np.issubdtype(tri.dtype, np.integer):
            if not np.all(np.equal(np.mod(tri, 1), 0)):
                raise ValidationError("triangle indices must be integers")
        tri = tri.astype(np.int64)
        if tri.size and (tri.min() < 0 or tri.max() >= self.n):
            bad = int(np.flatnonzero((tri < 0).any(1) | (tri >= self.n).any(1))[0])
            raise ValidationError(
                f"triangle {bad} references vertex index outside [0, {self.n})"
            )
        degenerate = (tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])
        if degenerate.any():
            raise ValidationError(
                f"triangle {int(np.flatnonzero(degenerate)[0])} repeats a vertex index"
            )
        object.__setattr__(self, "triangles", _frozen(tri))

    @property
    def vertices(self):
        return PointSet(self.points)

    @property
    def has_triangles(self):
        return len(self.triangles) > 0

    def with_points(self, points):
        return TriangleMesh(points, self.triangles)

    @cached_property
    def edges(self):
        """Undirected unique edges (i < j), sorted lexicographically."""
        return _edges_with_counts(self.triangles)[0]

    @cached_property
    def edge_counts(self):
        return _edges_with_counts(self.triangles)[1]

    @cached_property
    def face_normals(self):
        """Unnormalized face normals; length equals twice the triangle area."""
        if self.d != 3:
            raise UnsupportedOperationError("face normals are defined for 3-D meshes only")
        p = self.points
        t = self.triangles
        return np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])

    @cached_property
    def locator(self):
        return MeshLocator(self)

    def __repr__(self):
        return f"TriangleMesh(n={self.n}, d={self.d}, triangles={len(self.triangles)})"


def _edges_with_counts(triangles):
    if len(triangles) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


@dataclass(frozen=True)
class Landmark:
    id: str
    point: np.ndarray
    variance: float = 0.0

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("landmark id must be a non-empty string")
        pt = np.asarray(self.point, dtype=np.float64).ravel()
        if not np.all(np.isfinite(pt)):
            raise ValidationError(f"landmark {self.id!r} has a non-finite coordinate")
        if not np.isfinite(self.variance) or self.variance < 0:
            raise ValidationError(f"landmark {self.id!r} variance must be >= 0")
        object.__setattr__(self, "point", _frozen(pt))
        object.__setattr__(self, "variance", float(self.variance))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """x -> s * R @ x + t with R a proper rotation and s > 0."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).ravel()
        d = R.shape[0]
        if R.shape != (d, d) or t.shape != (d,):
            raise ValidationError("rotation must be d x d and translation length d")
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if np.abs(R.T @ R - np.eye(d)).max() > 1e-10 or np.linalg.det(R) < 0:
            raise ValidationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls, d=3):
        return cls(1.0, np.eye(d), np.zeros(d))

    @property
    def d(self):
        return self.rotation.shape[0]

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    __call__ = apply

    def apply_vectors(self, vectors):
        return self.scale * np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self):
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other):
        """Return ``self o other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def matrix(self):
        d = self.d
        m = np.eye(d + 1)
        m[:d, :d] = self.scale * self.rotation
        m[:d, d] = self.translation
        return m

    def is_identity(self, atol=1e-12):
        return (
            abs(self.scale - 1.0) <= atol
            and np.abs(self.rotation - np.eye(self.d)).max() <= atol
            and np.abs(self.translation).max() <= atol
        )

    def __repr__(self):
        return (
            f"SimilarityTransform(scale={self.scale:.6g}, "
            f"rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"
        )


def as_points(geom):
    if isinstance(geom, PointSet):
        return geom.points
    return check_points(geom)


def _require_mesh(mesh, what):
    if not isinstance(mesh, TriangleMesh) or not mesh.has_triangles:
        raise UnsupportedOperationError(f"{what} requires a triangle mesh")


def vertex_normals(mesh):
    """Area-weighted unit vertex normals.

    Vertices that belong to no triangle, or whose accumulated normal vanishes,
    get a NaN row; use ``np.isfinite(normals).all(1)`` as the defined mask.
    """
    _require_mesh(mesh, "vertex_normals")
    fn = mesh.face_normals
    acc = np.zeros_like(mesh.points)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    scale = mesh.points.std() if mesh.n > 1 else 1.0
    undefined = norm <= 1e-14 * max(scale, 1e-300) ** 2
    out = np.full_like(acc, np.nan)
    out[~undefined] = acc[~undefined] / norm[~undefined, None]
    return out


def boundary_edges(mesh):
    _require_mesh(mesh, "boundary_edges")
    return mesh.edges[mesh.edge_counts == 1]


def boundary_vertices(mesh):
    """Indices of vertices on an edge used by exactly one triangle."""
    if not isinstance(mesh, TriangleMesh) or not mesh.has_triangles:
        return set()
    return set(np.unique(boundary_edges(mesh)).tolist())


def incidence_matrix(mesh):
    """Sparse r x n edge-vertex incidence matrix (+1 at min index, -1 at max)."""
    _require_mesh(mesh, "incidence_matrix")
    edges = mesh.edges
    r = len(edges)
    rows = np.repeat(np.arange(r), 2)
    cols = edges.ravel()
    vals = np.tile([1.0, -1.0], r)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(r, mesh.n))


def graph_laplacian(mesh):
    """Unweighted combinatorial Laplacian ``B.T @ B``."""
    B = incidence_matrix(mesh)
    return (B.T @ B).tocsr()


def mesh_components(mesh):
    """Number of connected components and per-vertex labels."""
    _require_mesh(mesh, "mesh_components")
    e = mesh.edges
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(mesh.n, mesh.n))
    return connected_components(adj, directed=False)


def median_edge_length(geom):
    if isinstance(geom, TriangleMesh) and geom.has_triangles:
        e = geom.edges
        return float(np.median(np.linalg.norm(geom.points[e[:, 0]] - geom.points[e[:, 1]], axis=1)))
    pts = as_points(geom)
    if len(pts) < 2:
        return 0.0
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(dist[:, 1]))


def umeyama_align(source, target, with_scale=True, weights=None):
    """Least-squares similarity transform mapping ``source`` onto ``target``.

    Minimizes ``sum_i w_i ||s R x_i + t - y_i||^2`` over proper rotations.
    Raises :class:`AlignmentError` when fewer than ``d`` points are given or
    the centred source is too degenerate to fix a unique rotation.
    """
    X = as_points(source)
    Y = as_points(target)
    if X.shape != Y.shape:
        raise ValidationError(f"source {X.shape} and target {Y.shape} must match")
    n, d = X.shape
    if n < d:
        raise AlignmentError(f"need at least {d} point pairs, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("weights must be non-negative with positive sum")
    w = w / w.sum()
    mx = w @ X
    my = w @ Y
    Xc = X - mx
    Yc = Y - my
    var_x = w @ np.einsum("ij,ij->i", Xc, Xc)
    cov = (Yc * w[:, None]).T @ Xc
    U, S, Vt = np.linalg.svd(cov)
    sx = np.linalg.svd(Xc * np.sqrt(w)[:, None], compute_uv=False)
    tol = max(sx[0], 1e-300) * 1e-10
    if var_x <= 0 or np.sum(sx > tol) < d - 1:
        raise AlignmentError("source points are degenerate (rank-deficient)")
    D = np.ones(d)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1] = -1.0
    R = (U * D) @ Vt
    s = float(S @ D / var_x) if with_scale else 1.0
    if s <= 0:
        raise AlignmentError("estimated scale is not positive")
    t = my - s * R @ mx
    # re-orthonormalize against round-off so the invariant check holds
    u2, _, vt2 = np.linalg.svd(R)
    R = u2 @ vt2
    return SimilarityTransform(s, R, t)


def farthest_point_sampling(points, k, seed=None, start=None):
    """Indices of ``k`` well-spread points (greedy max-min distance)."""
    pts = as_points(points)
    n = len(pts)
    k = min(int(k), n)
    if k <= 0:
        return np.zeros(0, dtype=np.intp)
    if start is None:
        start = 0 if seed is None else int(as_generator(seed).integers(n))
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def decimate(geom, target_vertex_count, seed=0):
    """Vertex-subset decimation.

    Returns ``(coarse, index_map)`` where ``index_map[i]`` is the fine vertex
    index of coarse vertex ``i``. Coarse vertices are chosen by farthest point
    sampling; for meshes, fine vertices are clustered to the nearest sample
    along the edge graph and coarse triangles connect clusters that share a
    fine triangle.
    """
    n = geom.n if isinstance(geom, PointSet) else len(as_points(geom))
    k = int(target_vertex_count)
    if k < 1 or k > n:
        raise DecimationError(f"target_vertex_count must be in [1, {n}], got {k}")
    is_mesh = isinstance(geom, TriangleMesh) and geom.has_triangles
    if k == n:
        return geom, np.arange(n)
    if not is_mesh:
        rng = as_generator(seed)
        idx = np.sort(rng.choice(n, size=k, replace=False))
        return PointSet(as_points(geom)[idx]), idx
    if k < 4 and len(boundary_edges(geom)) == 0:
        raise DecimationError("closed meshes need at least 4 coarse vertices")

    seeds = farthest_point_sampling(geom.points, k, start=0)
    e = geom.edges
    length = np.linalg.norm(geom.points[e[:, 0]] - geom.points[e[:, 1]], axis=1)
    graph = sparse.coo_matrix((length, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    _, _, sources = dijkstra(graph, directed=False, indices=seeds, min_only=True,
                             return_predecessors=True)
    # vertices unreachable from any seed (other components) snap by Euclidean distance
    lost = sources < 0
    if lost.any():
        _, near = cKDTree(geom.points[seeds]).query(geom.points[lost])
        sources[lost] = seeds[near]
    coarse_of_seed = np.full(n, -1, dtype=np.int64)
    coarse_of_seed[seeds] = np.arange(k)
    label = coarse_of_seed[sources]
    tri = label[geom.triangles]
    keep = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    tri = tri[keep]
    if len(tri):
        _, first = np.unique(np.sort(tri, axis=1), axis=0, return_index=True)
        tri = tri[np.sort(first)]
    index_map = seeds.astype(np.intp)
    return TriangleMesh(geom.points[index_map], tri), index_map


# --------------------------------------------------------------------------
# closest point queries

# feature codes returned by closest_point_on_triangles
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to p, row-wise.

    Returns ``(points, feature)`` where ``feature`` codes whether the closest
    point lies in the face interior, on an edge or at a vertex. Works in any
    dimension.
    """
    p, a, b, c = (np.asarray(v, dtype=np.float64) for v in (p, a, b, c))
    k = len(p)
    out = np.empty_like(p)
    feat = np.full(k, -1, dtype=np.int8)
    todo = np.ones(k, dtype=bool)

    def dot(u, v):
        return np.einsum("ij,ij->i", u, v)

    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    m = todo & (d1 <= 0) & (d2 <= 0)
    out[m], feat[m] = a[m], VERT_A
    todo &= ~m

    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    m = todo & (d3 >= 0) & (d4 <= d3)
    out[m], feat[m] = b[m], VERT_B
    todo &= ~m

    vc = d1 * d4 - d3 * d2
    m = todo & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
    out[m], feat[m] = a[m] + v[m, None] * ab[m], EDGE_AB
    todo &= ~m

    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    m = todo & (d6 >= 0) & (d5 <= d6)
    out[m], feat[m] = c[m], VERT_C
    todo &= ~m

    vb = d5 * d2 - d1 * d6
    m = todo & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = d2 / (d2 - d6)
    out[m], feat[m] = a[m] + w[m, None] * ac[m], EDGE_CA
    todo &= ~m

    va = d3 * d6 - d5 * d4
    m = todo & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out[m], feat[m] = b[m] + w[m, None] * (c - b)[m], EDGE_BC
    todo &= ~m

    if todo.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        pt = a + v[:, None] * ab + w[:, None] * ac
        out[todo], feat[todo] = pt[todo], FACE
    return out, feat


@dataclass(frozen=True)
class ClosestPoints:
    points: np.ndarray
    distances: np.ndarray
    triangle: np.ndarray  # -1 for vertex-only targets
    feature: np.ndarray
    vertex: np.ndarray  # nearest vertex index of the target


class MeshLocator:
    """Exact closest-point queries against a triangle mesh surface."""

    def __init__(self, mesh):
        self.mesh = mesh
        p, t = mesh.points, mesh.triangles
        self.vertex_tree = cKDTree(p)
        self.centroids = p[t].mean(axis=1)
        self.radius = np.linalg.norm(p[t] - self.centroids[:, None, :], axis=2).max(axis=1)
        self.max_radius = float(self.radius.max())
        self.centroid_tree = cKDTree(self.centroids)

    def query(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        p, t = self.mesh.points, self.mesh.triangles
        ub, nearest = self.vertex_tree.query(q)
        cand = self.centroid_tree.query_ball_point(q, ub + self.max_radius + 1e-12)
        counts = np.fromiter((len(c) for c in cand), dtype=np.intp, count=len(q))
        qi = np.repeat(np.arange(len(q)), counts)
        ti = np.fromiter((j for c in cand for j in c), dtype=np.intp, count=int(counts.sum()))
        pts, feat = closest_point_on_triangles(q[qi], p[t[ti, 0]], p[t[ti, 1]], p[t[ti, 2]])
        dist = np.linalg.norm(pts - q[qi], axis=1)
        # per-query argmin: sort by (query, distance, triangle) for determinism
        order = np.lexsort((ti, dist, qi))
        first = np.ones(len(order), dtype=bool)
        first[1:] = qi[order][1:] != qi[order][:-1]
        best = order[first]
        return ClosestPoints(pts[best], dist[best], ti[best], feat[best], nearest)


def closest_points(target, queries):
    """Closest points on ``target`` (surface if it has triangles, else vertices)."""
    q = np.asarray(queries, dtype=np.float64)
    if isinstance(target, TriangleMesh) and target.has_triangles:
        return target.locator.query(q)
    pts = as_points(target)
    dist, idx = cKDTree(pts).query(q)
    return ClosestPoints(pts[idx], dist, np.full(len(q), -1), np.full(len(q), VERT_A, dtype=np.int8), idx)


def feature_on_boundary(mesh, triangle, feature):
    """True where a closest-point feature lies on a boundary edge or vertex."""
    out = np.zeros(len(triangle), dtype=bool)
    if not isinstance(mesh, TriangleMesh) or not mesh.has_triangles:
        return out
    bverts = np.zeros(mesh.n, dtype=bool)
    bedges = boundary_edges(mesh)
    if len(bedges) == 0:
        return out
    bverts[bedges.ravel()] = True
    bset = {tuple(e) for e in bedges.tolist()}
    tri = mesh.triangles
    for k in np.flatnonzero(feature != FACE):
        f = int(feature[k])
        t = tri[triangle[k]]
        if f in (VERT_A, VERT_B, VERT_C):
            out[k] = bverts[t[f - VERT_A]]
        else:
            i, j = {EDGE_AB: (0, 1), EDGE_BC: (1, 2), EDGE_CA: (2, 0)}[f]
            out[k] = tuple(sorted((int(t[i]), int(t[j])))) in bset
    return out


def segments_hit_mesh(mesh, starts, ends, skip_vertices=None, eps=1e-9):
    """Whether each open segment start->end crosses a mesh triangle.

    Triangles incident to ``skip_vertices[k]`` are ignored for segment ``k``
    (a segment always touches the triangles around its own start vertex).
    """
    _require_mesh(mesh, "segments_hit_mesh")
    s = np.asarray(starts, dtype=np.float64)
    e = np.asarray(ends, dtype=np.float64)
    loc = mesh.locator
    mid = 0.5 * (s + e)
    half = 0.5 * np.linalg.norm(e - s, axis=1)
    cand = loc.centroid_tree.query_ball_point(mid, half + loc.max_radius + 1e-12)
    hit = np.zeros(len(s), dtype=bool)
    p, tri = mesh.points, mesh.triangles
    for k, c in enumerate(cand):
        if not c or half[k] == 0:
            continue
        c = np.asarray(c)
        t = tri[c]
        if skip_vertices is not None:
            c = c[~(t == skip_vertices[k]).any(axis=1)]
            t = tri[c]
        if len(c) == 0:
            continue
        a, b, cc = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
        d = e[k] - s[k]
        e1, e2 = b - a, cc - a
        h = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        sv = s[k] - a
        u = inv * np.einsum("ij,ij->i", sv, h)
        qv = np.cross(sv, e1)
        v = inv * (qv @ d)
        tt = inv * np.einsum("ij,ij->i", e2, qv)
        inside = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (tt > eps) & (tt < 1 - eps)
        hit[k] = bool(inside.any())
    return hit


def warn_once(message):
    warnings.warn(message, RuntimeWarning, stacklevel=3)
