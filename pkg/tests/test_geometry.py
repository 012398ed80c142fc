import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import grid_mesh, tetrahedron
from gingr.exceptions import AlignmentError, DecimationError, UnsupportedOperationError, ValidationError
from gingr.geometry import (
    Landmark,
    PointSet,
    SimilarityTransform,
    TriangleMesh,
    boundary_vertices,
    closest_points,
    decimate,
    graph_laplacian,
    incidence_matrix,
    umeyama_align,
    vertex_normals,
)
from gingr.synthetic import femur_proxy, icosphere

SQUARE = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float), np.array([[0, 1, 2], [0, 2, 3]]))


def random_transform(seed):
    rng = np.random.default_rng(seed)
    return SimilarityTransform(rng.uniform(0.5, 2), Rotation.random(random_state=seed).as_matrix(),
                               rng.standard_normal(3))


# containers


def test_pointset_rejects_non_finite():
    with pytest.raises(ValidationError):
        PointSet(np.array([[0.0, np.nan, 0.0]]))


def test_mesh_rejects_out_of_range_and_degenerate_triangles():
    pts = np.zeros((3, 3))
    with pytest.raises(ValidationError, match="outside"):
        TriangleMesh(pts, np.array([[0, 1, 99]]))
    with pytest.raises(ValidationError, match="repeats"):
        TriangleMesh(pts, np.array([[0, 1, 1]]))


def test_edges_are_deduplicated_and_sorted():
    assert SQUARE.edges.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [2, 3]]


def test_landmark_validation():
    with pytest.raises(ValidationError):
        Landmark("", [0, 0, 0])
    with pytest.raises(ValidationError):
        Landmark("a", [0, 0, 0], variance=-1.0)


def test_similarity_transform_rejects_reflection():
    with pytest.raises(ValidationError):
        SimilarityTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_transform_inverse_and_compose():
    T = random_transform(1)
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(T.inverse().apply(T.apply(x)), x, atol=1e-12)
    np.testing.assert_allclose(T.compose(T.inverse()).apply(x), x, atol=1e-12)


# normals and boundary


def test_normals_of_planar_square():
    np.testing.assert_allclose(vertex_normals(SQUARE), np.tile([0, 0, 1.0], (4, 1)))


def test_normals_of_tetrahedron_are_normalized_face_sums():
    mesh = tetrahedron()
    fn = mesh.face_normals
    normals = vertex_normals(mesh)
    for v in range(4):
        acc = fn[(mesh.triangles == v).any(axis=1)].sum(axis=0)
        np.testing.assert_allclose(normals[v], acc / np.linalg.norm(acc), atol=1e-12)
    # regular tetrahedron centred at 0: vertex normal points along the vertex
    np.testing.assert_allclose(normals, mesh.points / np.sqrt(3), atol=1e-12)


def test_isolated_vertex_normal_is_flagged():
    mesh = TriangleMesh(np.vstack([SQUARE.points, [[5.0, 5, 5]]]), SQUARE.triangles)
    normals = vertex_normals(mesh)
    assert np.isnan(normals[4]).all() and np.isfinite(normals[:4]).all()


def test_normals_need_triangles():
    with pytest.raises(UnsupportedOperationError):
        vertex_normals(PointSet(np.zeros((3, 3))))


def test_boundary_vertices():
    assert boundary_vertices(tetrahedron()) == set()
    assert boundary_vertices(TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))) == {0, 1, 2}
    assert boundary_vertices(SQUARE) == {0, 1, 2, 3}
    assert boundary_vertices(icosphere(2)) == set()
    inner = grid_mesh(4, 4)
    assert boundary_vertices(inner) == set(range(16)) - {5, 6, 9, 10}


# incidence and Laplacian


def test_incidence_single_edge_and_triangle():
    # a single edge only exists as part of a triangle; read its row
    B = incidence_matrix(TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))).toarray()
    assert B.shape == (3, 3)
    np.testing.assert_array_equal(B[0], [1, -1, 0])
    np.testing.assert_array_equal(B.sum(axis=1), 0)


def test_laplacian_of_path_and_triangle():
    path = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 0]], float),
                        np.array([[0, 1, 3], [1, 2, 3]]))
    B = incidence_matrix(path).toarray()
    # rows of the path 0-1-2 edges
    path_rows = [k for k, e in enumerate(path.edges.tolist()) if e in ([0, 1], [1, 2])]
    Bp = B[path_rows][:, :3]
    np.testing.assert_array_equal(Bp.T @ Bp, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    tri = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    np.testing.assert_allclose(np.linalg.eigvalsh(graph_laplacian(tri).toarray()), [0, 3, 3], atol=1e-12)


@pytest.mark.parametrize("mesh", [icosphere(1), femur_proxy(1), grid_mesh(5, 4), tetrahedron()],
                         ids=["sphere", "femur", "grid", "tet"])
def test_laplacian_properties(mesh):
    B = incidence_matrix(mesh)
    L = graph_laplacian(mesh)
    assert (abs(B.T @ B - L)).max() == 0
    Ld = L.toarray()
    np.testing.assert_array_equal(Ld, Ld.T)
    np.testing.assert_allclose(Ld @ np.ones(mesh.n), 0, atol=1e-12)
    x = np.random.default_rng(0).standard_normal((100, mesh.n))
    assert np.all(np.einsum("ij,jk,ik->i", x, Ld, x) >= -1e-10)
    eig = np.linalg.eigvalsh(Ld)
    assert np.sum(np.abs(eig) < 1e-9) == 1


def test_laplacian_zero_multiplicity_counts_components():
    two = TriangleMesh(np.vstack([np.eye(3), np.eye(3) + 5]), np.array([[0, 1, 2], [3, 4, 5]]))
    eig = np.linalg.eigvalsh(graph_laplacian(two).toarray())
    assert np.sum(np.abs(eig) < 1e-9) == 2


# alignment


def test_umeyama_identity_and_known_transforms():
    X = np.random.default_rng(0).standard_normal((10, 3))
    T = umeyama_align(X, X)
    assert abs(T.scale - 1) < 1e-12
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.translation, 0, atol=1e-12)

    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    Y = X @ Rz.T + [1, 2, 3]
    T = umeyama_align(X, Y, with_scale=False)
    np.testing.assert_allclose(T.rotation, Rz, atol=1e-10)
    np.testing.assert_allclose(T.translation, [1, 2, 3], atol=1e-10)

    T = umeyama_align(X, 2 * X, with_scale=True)
    assert abs(T.scale - 2) < 1e-12
    np.testing.assert_allclose(T.translation, 0, atol=1e-12)


def test_umeyama_degenerate_inputs():
    with pytest.raises(AlignmentError):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 0, 0])
    with pytest.raises(AlignmentError):
        umeyama_align(line, line + 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_umeyama_inverts_random_similarity(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((int(rng.integers(4, 30)), 3))
    T = random_transform(seed)
    back = umeyama_align(T.apply(X), X)
    np.testing.assert_allclose(back.compose(T).apply(X), X, atol=1e-9)
    np.testing.assert_allclose(back.compose(T).matrix(), np.eye(4), atol=1e-9)


# decimation


def test_decimate_identity_at_full_count():
    mesh = icosphere(1)
    coarse, idx = decimate(mesh, mesh.n)
    assert coarse is mesh
    np.testing.assert_array_equal(idx, np.arange(mesh.n))


def test_decimate_sphere_to_subset():
    mesh = icosphere(2)
    coarse, idx = decimate(mesh, 42)
    assert coarse.n <= 42 and coarse.has_triangles
    np.testing.assert_array_equal(coarse.points, mesh.points[idx])
    assert len(set(idx.tolist())) == len(idx)


def test_decimate_point_set_and_errors():
    pts = PointSet(np.random.default_rng(0).standard_normal((50, 3)))
    coarse, idx = decimate(pts, 10, seed=1)
    assert type(coarse) is PointSet and coarse.n == 10
    np.testing.assert_array_equal(coarse.points, pts.points[idx])
    with pytest.raises(DecimationError):
        decimate(icosphere(1), 3)
    with pytest.raises(DecimationError):
        decimate(icosphere(1), 100)


# closest points


def test_closest_points_on_surface_and_vertices():
    q = np.array([[0.25, 0.5, 1.0], [2.0, 0.5, 0.0], [-1.0, -1.0, 0.0]])
    cp = closest_points(SQUARE, q)
    np.testing.assert_allclose(cp.points, [[0.25, 0.5, 0], [1, 0.5, 0], [0, 0, 0]], atol=1e-12)
    np.testing.assert_allclose(cp.distances, [1, 1, np.sqrt(2)], atol=1e-12)
    cpv = closest_points(SQUARE.vertices, q)
    np.testing.assert_array_equal(cpv.vertex, [0, 1, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_closest_point_matches_brute_force(seed):
    mesh = femur_proxy(1)
    rng = np.random.default_rng(seed)
    q = rng.uniform(-1, 1, (20, 3)) * [1, 1, 3]
    cp = closest_points(mesh, q)
    # dense sampling of every triangle bounds the exact distance from above
    u, v = np.meshgrid(np.linspace(0, 1, 15), np.linspace(0, 1, 15))
    keep = (u + v) <= 1
    u, v = u[keep], v[keep]
    p = mesh.points[mesh.triangles]
    samples = (p[:, 0, None] * (1 - u - v)[None, :, None] + p[:, 1, None] * u[None, :, None]
               + p[:, 2, None] * v[None, :, None]).reshape(-1, 3)
    brute = np.min(np.linalg.norm(q[:, None] - samples[None], axis=2), axis=1)
    assert np.all(cp.distances <= brute + 1e-12)
    assert np.all(cp.distances >= brute - 0.05)
