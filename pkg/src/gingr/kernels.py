"""Matrix-valued covariance functions over a reference geometry.

Two kinds of kernels exist:

* coordinate kernels, evaluated on point coordinates (Gaussian, dot product,
  symmetric Gaussian);
* index kernels, defined only on the vertices of one reference (inverse graph
  Laplacian, statistical, precomputed matrices).

A coordinate kernel becomes an index kernel with :meth:`Kernel.on`. Scalar
kernels (``k(x, x') = g(x, x') I_d``) keep their Gram matrices at n x n and
expand to n*d x n*d only on request.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import KernelError, UnsupportedOperationError, ValidationError
from .geometry import TriangleMesh, graph_laplacian, mesh_components
from .validation import check_positive


@dataclass(frozen=True)
class KernelMatrix:
    """Gram matrix; ``scalar=True`` means ``values`` is n x m and implicitly ``kron(values, I_d)``."""

    values: np.ndarray
    d: int
    scalar: bool

    def full(self):
        """Dense point-major block matrix (row ``i*d + c``)."""
        if self.scalar:
            return np.kron(self.values, np.eye(self.d))
        return self.values

    @property
    def shape(self):
        return self.full().shape if not self.scalar else (self.values.shape[0] * self.d, self.values.shape[1] * self.d)


class Kernel:
    """Base class; subclasses implement :meth:`_scalar` or :meth:`_block`."""

    is_coordinate_based = True
    is_scalar = True

    def __init__(self, d=3):
        if d not in (1, 2, 3):
            raise ValidationError(f"kernel dimension must be 1, 2 or 3, got {d}")
        self.d = d

    # subclasses override one of these
    def _scalar(self, A, B):
        raise NotImplementedError

    def _block(self, A, B):
        return np.kron(self._scalar(A, B), np.eye(self.d))

    def _check_domain(self, A):
        if self.is_coordinate_based:
            A = np.asarray(A, dtype=np.float64)
            if A.ndim == 1:
                A = A[None, :]
            if A.ndim != 2 or A.shape[1] != self.d:
                raise UnsupportedOperationError(
                    f"{type(self).__name__} is evaluated on {self.d}-D coordinates, got shape {A.shape}"
                )
            return A
        A = np.asarray(A)
        if A.ndim != 1 or (A.size and not np.issubdtype(A.dtype, np.integer)):
            raise UnsupportedOperationError(
                f"{type(self).__name__} is defined on reference vertex indices, not coordinates"
            )
        A = A.astype(np.intp)
        if A.size and (A.min() < 0 or A.max() >= self.n):
            raise ValidationError(f"vertex index out of range [0, {self.n})")
        return A

    def __call__(self, x, y):
        """d x d covariance block between two single points (or indices)."""
        if self.is_coordinate_based:
            A, B = self._check_domain(x), self._check_domain(y)
        else:
            A = self._check_domain(np.atleast_1d(x))
            B = self._check_domain(np.atleast_1d(y))
        return self._block(A[:1], B[:1])

    def gram(self, A, B=None):
        """Kernel matrix between collections ``A`` and ``B`` (``B=None`` means A)."""
        same = B is None
        A = self._check_domain(A)
        B = A if same else self._check_domain(B)
        if self.is_scalar:
            values = self._scalar(A, B)
        else:
            values = self._block(A, B)
        if same:
            values = 0.5 * (values + values.T)
        return KernelMatrix(values, self.d, self.is_scalar)

    def on(self, points):
        """Bind a coordinate kernel to fixed vertex coordinates (index kernel)."""
        if not self.is_coordinate_based:
            return self
        return BoundKernel(self, points)

    def __add__(self, other):
        return combine([(self, 1.0), (other, 1.0)], "sum")

    def __mul__(self, other):
        if isinstance(other, Kernel):
            return combine([(self, 1.0), (other, 1.0)], "product")
        return combine([(self, float(other))], "sum")

    __rmul__ = __mul__


class GaussianKernel(Kernel):
    """``exp(-||x - x'||^2 / (2 beta^2)) I_d``."""

    def __init__(self, beta, d=3):
        super().__init__(d)
        self.beta = check_positive(beta, "beta")

    def _scalar(self, A, B):
        return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * self.beta**2))

    def __repr__(self):
        return f"GaussianKernel(beta={self.beta}, d={self.d})"


def gaussian_kernel(beta, d=3):
    return GaussianKernel(beta, d)


class DotProductKernel(Kernel):
    """Homogeneous dot product ``<x, x'> + gamma^2`` (rows of D = [x | gamma])."""

    def __init__(self, gamma, d=3):
        super().__init__(d)
        self.gamma = check_positive(gamma, "gamma")

    def _scalar(self, A, B):
        return A @ B.T + self.gamma**2

    def __repr__(self):
        return f"DotProductKernel(gamma={self.gamma}, d={self.d})"


def dot_product_kernel(gamma, d=3):
    return DotProductKernel(gamma, d)


_AXES = {"x": 0, "y": 1, "z": 2}


class SymmetricKernel(Kernel):
    """Mirror-symmetrized kernel ``k(x, x') + M k(Mx, x')``.

    ``M`` flips the sign of one coordinate. Deformations at mirrored points
    become correlated with the mirrored direction.
    """

    is_scalar = False

    def __init__(self, base, mirror_axis="x"):
        if not isinstance(base, Kernel) or not base.is_coordinate_based or not base.is_scalar:
            raise UnsupportedOperationError("symmetric_kernel needs a scalar coordinate-based base kernel")
        super().__init__(base.d)
        if mirror_axis not in _AXES or _AXES[mirror_axis] >= base.d:
            raise ValidationError(f"mirror_axis must be one of x/y/z within dimension {base.d}")
        self.base = base
        self.mirror_axis = mirror_axis
        self.mirror = np.eye(base.d)
        self.mirror[_AXES[mirror_axis], _AXES[mirror_axis]] = -1.0

    def _block(self, A, B):
        direct = self.base._scalar(A, B)
        mirrored = self.base._scalar(A @ self.mirror, B)
        return np.kron(direct, np.eye(self.d)) + np.kron(mirrored, self.mirror)

    def __repr__(self):
        return f"SymmetricKernel({self.base!r}, mirror_axis={self.mirror_axis!r})"


def symmetric_kernel(base, mirror_axis="x"):
    return SymmetricKernel(base, mirror_axis)


class IndexKernel(Kernel):
    """Kernel defined by a matrix over the ``n`` reference vertices."""

    is_coordinate_based = False

    def __init__(self, matrix, d=3, scalar=True):
        super().__init__(d)
        M = np.asarray(matrix, dtype=np.float64)
        self.is_scalar = bool(scalar)
        size = M.shape[0] if scalar else M.shape[0] // d
        expected = (size, size) if scalar else (size * d, size * d)
        if M.shape != expected:
            raise ValidationError(f"kernel matrix must have shape {expected}, got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ValidationError("kernel matrix must be finite")
        self.n = size
        self.matrix = 0.5 * (M + M.T)

    def _scalar(self, A, B):
        return self.matrix[np.ix_(A, B)]

    def _block(self, A, B):
        if self.is_scalar:
            return super()._block(A, B)
        d = self.d
        ia = (A[:, None] * d + np.arange(d)).ravel()
        ib = (B[:, None] * d + np.arange(d)).ravel()
        return self.matrix[np.ix_(ia, ib)]

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n}, d={self.d}, scalar={self.is_scalar})"


def precomputed_kernel(matrix, d=3, scalar=True):
    return IndexKernel(matrix, d, scalar)


class BoundKernel(IndexKernel):
    """A coordinate kernel evaluated lazily at fixed reference coordinates."""

    def __init__(self, base, points):
        Kernel.__init__(self, base.d)
        self.base = base
        self.points = np.asarray(points, dtype=np.float64)
        self.n = len(self.points)
        self.is_scalar = base.is_scalar

    @property
    def matrix(self):
        if self.is_scalar:
            return self.base._scalar(self.points, self.points)
        return self.base._block(self.points, self.points)

    def _scalar(self, A, B):
        return self.base._scalar(self.points[A], self.points[B])

    def _block(self, A, B):
        return self.base._block(self.points[A], self.points[B])

    def __repr__(self):
        return f"BoundKernel({self.base!r}, n={self.n})"


class InverseLaplacianKernel(IndexKernel):
    """Moore-Penrose pseudo-inverse of the combinatorial mesh Laplacian."""

    def __init__(self, mesh, d=None):
        if not isinstance(mesh, TriangleMesh) or not mesh.has_triangles:
            raise UnsupportedOperationError("inverse_laplacian_kernel requires a triangle mesh")
        ncomp, labels = mesh_components(mesh)
        if ncomp != 1:
            sizes = np.bincount(labels).tolist()
            raise ValidationError(
                f"mesh has {ncomp} connected components (sizes {sizes}); "
                "the inverse Laplacian kernel needs a connected reference"
            )
        L = graph_laplacian(mesh).toarray()
        super().__init__(np.linalg.pinv(L, hermitian=True), d or mesh.d, scalar=True)
        self.laplacian = L


def inverse_laplacian_kernel(mesh, d=None):
    return InverseLaplacianKernel(mesh, d)


class StatisticalKernel(IndexKernel):
    """Empirical covariance of example deformation fields (a PDM prior).

    ``mean_field`` holds the sample mean, used as the GP mean.
    """

    def __init__(self, training_fields):
        fields = [np.asarray(f, dtype=np.float64) for f in training_fields]
        if len(fields) < 2:
            raise ValidationError("statistical_kernel needs at least 2 training fields")
        shape = fields[0].shape
        if len(shape) != 2 or any(f.shape != shape for f in fields):
            raise ValidationError("training fields must all have the same (n, d) shape")
        data = np.stack([f.ravel() for f in fields])
        self.mean_field = data.mean(axis=0).reshape(shape)
        self.centered = data - data.mean(axis=0)
        n, d = shape
        Kernel.__init__(self, d)
        self.is_scalar = False
        self.n = n
        self.n_samples = len(fields)

    @property
    def matrix(self):
        return self.centered.T @ self.centered / (self.n_samples - 1)

    def _block(self, A, B):
        d = self.d
        ia = (A[:, None] * d + np.arange(d)).ravel()
        ib = (B[:, None] * d + np.arange(d)).ravel()
        return self.centered[:, ia].T @ self.centered[:, ib] / (self.n_samples - 1)


def statistical_kernel(training_fields):
    return StatisticalKernel(training_fields)


class CombinedKernel(Kernel):
    """Weighted sum or elementwise product of kernels."""

    def __init__(self, terms, mode):
        self.terms = terms
        self.mode = mode
        first = terms[0][0]
        super().__init__(first.d)
        self.is_coordinate_based = first.is_coordinate_based
        self.is_scalar = all(k.is_scalar for k, _ in terms)
        if not self.is_coordinate_based:
            self.n = first.n

    def _scalar(self, A, B):
        parts = [w * k._scalar(A, B) for k, w in self.terms]
        if self.mode == "sum":
            return np.sum(parts, axis=0)
        return np.prod(parts, axis=0)

    def _block(self, A, B):
        if self.is_scalar:
            return super()._block(A, B)
        return np.sum([w * k._block(A, B) for k, w in self.terms], axis=0)

    @property
    def matrix(self):
        idx = np.arange(self.n)
        return self._scalar(idx, idx) if self.is_scalar else self._block(idx, idx)

    def __repr__(self):
        return f"CombinedKernel(mode={self.mode!r}, terms={self.terms!r})"


def combine(kernels, mode="sum"):
    """Combine ``[(kernel, weight), ...]`` by weighted sum or product.

    Products are restricted to scalar kernels of one kind (all coordinate
    based, or all index based on the same reference).
    """
    if mode not in ("sum", "product"):
        raise ValidationError(f"mode must be 'sum' or 'product', got {mode!r}")
    terms = []
    for item in kernels:
        k, w = item if isinstance(item, tuple) else (item, 1.0)
        if not isinstance(k, Kernel):
            raise ValidationError(f"not a kernel: {k!r}")
        terms.append((k, check_positive(w, "weight", strict=False)))
    if not terms:
        raise ValidationError("combine needs at least one kernel")
    if len({k.d for k, _ in terms}) != 1:
        raise ValidationError("kernels must share the same dimension d")
    kinds = {k.is_coordinate_based for k, _ in terms}
    if len(kinds) != 1:
        raise UnsupportedOperationError(
            "cannot mix coordinate and index kernels; bind coordinate kernels with .on(points)"
        )
    if not terms[0][0].is_coordinate_based and len({k.n for k, _ in terms}) != 1:
        raise ValidationError("index kernels must share the same reference size")
    if mode == "product" and not all(k.is_scalar for k, _ in terms):
        raise UnsupportedOperationError("product mode is restricted to scalar kernels")
    return CombinedKernel(terms, mode)


def icp_a_kernel(mesh, gamma):
    """The kernel behind ICP-A: ``K o (X X^T + gamma^2)`` with ``K`` the inverse Laplacian.

    Equals ``D (L^+ kron I_4) D^T`` with rows of ``D`` holding ``[x_i, gamma]``.
    """
    lap = InverseLaplacianKernel(mesh)
    dot = DotProductKernel(gamma, mesh.d).on(mesh.points)
    return combine([(lap, 1.0), (dot, 1.0)], "product")


def check_psd(kernel_matrix, rtol=1e-8):
    """Raise :class:`KernelError` unless min eigenvalue >= -rtol * max eigenvalue."""
    M = kernel_matrix.values if isinstance(kernel_matrix, KernelMatrix) else np.asarray(kernel_matrix)
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))
    top = max(ev[-1], 0.0)
    if ev[0] < -rtol * max(top, 1e-300):
        raise KernelError(f"kernel matrix is not PSD: min eigenvalue {ev[0]:.3e}, max {top:.3e}")
    return ev


def gram(kernel, A, B=None):
    return kernel.gram(A, B)
