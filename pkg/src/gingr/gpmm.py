"""Low-rank Gaussian process morphable models.

A :class:`LowRankGp` represents deformations of a reference point set as

    u[alpha](x) = mu(x) + sum_i alpha_i sqrt(lambda_i) phi_i(x),   alpha ~ N(0, I).

Regression happens in coefficient space, so its cost is governed by the
rank r and the number of observations rather than by n.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import KernelError, ValidationError
from .geometry import farthest_point_sampling
from .validation import as_generator, check_field, check_indices, check_points

#: modes with lambda_i below this fraction of lambda_1 are treated as absent
EIG_RTOL = 1e-12


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class LowRankGp:
    """Discretized GP: reference points, mean field, eigenvalues and basis.

    ``basis`` has shape (r, n, d); basis fields are orthonormal under
    ``sum_x phi_i(x) . phi_j(x)``.
    """

    reference: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray
    basis: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        ref = check_points(self.reference, "reference")
        n, d = ref.shape
        lam = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        basis = np.asarray(self.basis, dtype=np.float64).reshape(len(lam), n, d)
        if np.any(lam < 0) or np.any(np.diff(lam) > 1e-12 * max(lam[0] if lam.size else 1.0, 1.0)):
            raise ValidationError("eigenvalues must be non-negative and non-increasing")
        object.__setattr__(self, "reference", _readonly(ref))
        object.__setattr__(self, "mean", _readonly(check_field(self.mean, n, d, "mean")))
        object.__setattr__(self, "eigenvalues", _readonly(lam))
        object.__setattr__(self, "basis", _readonly(basis))

    @property
    def n(self):
        return self.reference.shape[0]

    @property
    def d(self):
        return self.reference.shape[1]

    @property
    def rank(self):
        return len(self.eigenvalues)

    def scaled_basis(self, indices=None):
        """(k*d, r) matrix of sqrt(lambda)-scaled basis rows at ``indices``."""
        B = self.basis if indices is None else self.basis[:, indices, :]
        return B.reshape(self.rank, -1).T * np.sqrt(self.eigenvalues)

    def marginal_variance(self):
        """Per-vertex prior variance ``sum_i lambda_i ||phi_i(x)||^2``."""
        return np.einsum("i,ind->n", self.eigenvalues, self.basis**2)

    def restrict(self, indices):
        """Exact marginal of this GP on a vertex subset, re-diagonalized."""
        idx = check_indices(indices, self.n)
        Phi = self.scaled_basis(idx)
        U, S, _ = np.linalg.svd(Phi, full_matrices=False)
        lam = S**2
        keep = lam > EIG_RTOL * max(lam[0] if lam.size else 0.0, 1e-300)
        k = len(idx)
        basis = U[:, keep].T.reshape(-1, k, self.d)
        return LowRankGp(self.reference[idx], self.mean[idx], lam[keep], basis)


def _top_eigh(M, rank):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def build_low_rank(kernel, reference, rank, mean=None, method="dense_eig", n_landmarks=None, seed=0):
    """Truncated eigen-expansion of ``kernel`` on ``reference``.

    ``reference`` holds the vertex coordinates; index kernels are evaluated on
    ``range(n)``. ``method`` is ``"dense_eig"`` or ``"nystrom"``. When fewer
    than ``rank`` eigenvalues are positive the rank is reduced, a warning is
    issued and the returned model has ``truncated=True``.
    """
    ref = check_points(getattr(reference, "points", reference), "reference")
    n, d = ref.shape
    if kernel.d != d:
        raise ValidationError(f"kernel dimension {kernel.d} does not match reference dimension {d}")
    rank = int(rank)
    if rank < 1:
        raise ValidationError("rank must be >= 1")
    mean = np.zeros((n, d)) if mean is None else check_field(mean, n, d, "mean")
    domain = ref if kernel.is_coordinate_based else np.arange(n)
    if not kernel.is_coordinate_based and kernel.n != n:
        raise ValidationError(f"index kernel is defined on {kernel.n} vertices, reference has {n}")

    if method == "dense_eig":
        K = kernel.gram(domain).values
        lam, V = _top_eigh(K, rank)
    elif method == "nystrom":
        m = n if n_landmarks is None else int(n_landmarks)
        if m < 1 or m > n:
            raise ValidationError(f"n_landmarks must be in [1, {n}]")
        if kernel.is_scalar and m < int(np.ceil(rank / d)) or not kernel.is_scalar and m * d < rank:
            raise ValidationError("n_landmarks too small for the requested rank")
        land = np.sort(farthest_point_sampling(ref, m, seed=seed))
        Knm = kernel.gram(domain, domain[land]).values
        Kmm = kernel.gram(domain[land]).values
        w, U = np.linalg.eigh(Kmm)
        good = w > EIG_RTOL * max(w[-1], 1e-300)
        C = Knm @ (U[:, good] / np.sqrt(w[good]))  # K ~ C C^T
        Q, S, _ = np.linalg.svd(C, full_matrices=False)
        lam, V = S**2, Q
    else:
        raise ValidationError(f"unknown method {method!r}")

    if lam.size and lam[-1] < -1e-8 * max(lam[0], 1e-300):
        raise KernelError(f"kernel Gram matrix is not PSD (min eigenvalue {lam[-1]:.3e})")
    lam = np.clip(lam, 0.0, None)

    if kernel.is_scalar:
        # each scalar eigenpair (mu, v) yields d eigenpairs (mu, v (x) e_c)
        top = lam[0] if lam.size else 0.0
        npos = int(np.sum(lam > EIG_RTOL * max(top, 1e-300)))
        avail = npos * d
        r = min(rank, avail)
        nscalar = int(np.ceil(r / d))
        basis = np.zeros((nscalar * d, n, d))
        vals = np.repeat(lam[:nscalar], d)
        for k in range(nscalar):
            for c in range(d):
                basis[k * d + c, :, c] = V[:, k]
        basis, vals = basis[:r], vals[:r]
    else:
        top = lam[0] if lam.size else 0.0
        avail = int(np.sum(lam > EIG_RTOL * max(top, 1e-300)))
        r = min(rank, avail)
        vals = lam[:r]
        basis = V[:, :r].T.reshape(r, n, d)

    truncated = r < rank
    if truncated:
        warnings.warn(f"requested rank {rank} but only {r} positive eigenvalues; rank reduced",
                      RuntimeWarning, stacklevel=2)
    if r == 0:
        raise KernelError("kernel has no positive eigenvalues on the reference")
    return LowRankGp(ref, mean, vals, basis, truncated=truncated)


def _check_alpha(gp, alpha):
    a = np.asarray(alpha, dtype=np.float64).ravel()
    if a.shape != (gp.rank,):
        raise ValidationError(f"coefficients must have length {gp.rank}, got {a.shape[0]}")
    return a


def instance(gp, alpha):
    """Deformation field ``mu + sum_i alpha_i sqrt(lambda_i) phi_i`` (n x d)."""
    a = _check_alpha(gp, alpha)
    return gp.mean + np.einsum("i,ind->nd", a * np.sqrt(gp.eigenvalues), gp.basis)


def deformed_points(gp, alpha):
    return gp.reference + instance(gp, alpha)


def project(gp, field):
    """Least-squares coefficients of ``field``; negligible modes get 0."""
    f = check_field(field, gp.n, gp.d) - gp.mean
    lam = gp.eigenvalues
    good = lam > EIG_RTOL * max(lam[0], 1e-300)
    coeff = np.einsum("ind,nd->i", gp.basis, f)
    out = np.zeros(gp.rank)
    out[good] = coeff[good] / np.sqrt(lam[good])
    return out


@dataclass(frozen=True, eq=False)
class PosteriorGp:
    """GP posterior in coefficient space: ``alpha ~ N(mean_coefficients, covariance)``.

    ``trend`` holds the flat-prior global field (e.g. a translation or an
    affine map) estimated jointly with the coefficients, or ``None``.
    """

    gp: LowRankGp
    mean_coefficients: np.ndarray
    covariance: np.ndarray
    trend: np.ndarray = None
    trend_coefficients: np.ndarray = None

    def mean_field(self):
        field = instance(self.gp, self.mean_coefficients)
        if self.trend is not None:
            field = field + self.trend
        return field

    def log_density(self, alpha):
        """Gaussian log-density of coefficients under this posterior."""
        return _gaussian_logpdf(np.asarray(alpha, dtype=np.float64) - self.mean_coefficients,
                                self._factor)

    @property
    def _factor(self):
        f = self.__dict__.get("_chol")
        if f is None:
            f = _psd_factor(self.covariance)
            self.__dict__["_chol"] = f
        return f


def _psd_factor(cov):
    """Eigen-factorization of a PSD covariance with tiny modes dropped."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    keep = w > EIG_RTOL * max(w[-1], 1e-300)
    return w[keep], V[:, keep], len(w)


def _gaussian_logpdf(delta, factor):
    w, V, r = factor
    z = V.T @ delta
    resid = delta - V @ z
    if len(w) < r and np.linalg.norm(resid) > 1e-9 * max(1.0, np.linalg.norm(delta)):
        return -np.inf
    return float(-0.5 * np.sum(z**2 / w) - 0.5 * np.sum(np.log(w)) - 0.5 * len(w) * np.log(2 * np.pi))


def trend_basis(kind, reference):
    """Scalar trend basis (n x q) for universal-kriging null spaces."""
    ref = np.asarray(reference, dtype=np.float64)
    if kind in (None, "none"):
        return None
    if kind == "translation":
        return np.ones((len(ref), 1))
    if kind == "affine":
        return np.column_stack([ref, np.ones(len(ref))])
    raise ValidationError(f"unknown null space {kind!r}; expected none/translation/affine")


def regress(gp, indices, displacements, noise, trend=None):
    """Closed-form GP regression of observed deformations.

    Parameters
    ----------
    indices : (k,) int
        Reference vertices with an observation (unique).
    displacements : (k, d)
        Observed deformation at each index, relative to the reference.
    noise : float or (k,)
        Isotropic noise variance per observation (> 0).
    trend : (n, q) array, optional
        Scalar basis of a flat-prior global component (``kron(H, I_d)``),
        estimated by generalized least squares together with the GP. Use
        :func:`trend_basis` for translation or affine null spaces.

    Returns
    -------
    PosteriorGp
    """
    idx = check_indices(indices, gp.n)
    if idx.size == 0:
        raise ValidationError("regress needs at least one observation")
    if len(np.unique(idx)) != len(idx):
        raise ValidationError("observation indices must be unique")
    Y = np.asarray(displacements, dtype=np.float64).reshape(len(idx), gp.d)
    var = np.broadcast_to(np.asarray(noise, dtype=np.float64), (len(idx),)).copy()
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        raise ValidationError("noise variances must be finite and > 0")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("observed displacements must be finite")

    d = gp.d
    r = gp.rank
    Phi = gp.scaled_basis(idx)  # (k*d, r)
    dinv = np.repeat(1.0 / var, d)
    y = (Y - gp.mean[idx]).ravel()
    A = Phi.T @ (Phi * dinv[:, None]) + np.eye(r)
    cho = linalg.cho_factor(A, lower=True)

    def cinv(v):
        # (Phi Phi^T + D)^-1 v via Woodbury
        v = v * (dinv if v.ndim == 1 else dinv[:, None])
        return v - (Phi @ linalg.cho_solve(cho, Phi.T @ v)) * (dinv if v.ndim == 1 else dinv[:, None])

    trend_field = beta = None
    if trend is not None:
        H = np.asarray(trend, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != gp.n:
            raise ValidationError(f"trend basis must have shape (n, q) with n={gp.n}")
        Ho = np.kron(H[idx], np.eye(d))
        G = Ho.T @ cinv(Ho)
        try:
            beta = np.linalg.solve(G, Ho.T @ cinv(y))
        except np.linalg.LinAlgError:
            beta = np.linalg.lstsq(G, Ho.T @ cinv(y), rcond=None)[0]
        y = y - Ho @ beta
        trend_field = (np.kron(H, np.eye(d)) @ beta).reshape(gp.n, d)

    cov = linalg.cho_solve(cho, np.eye(r))
    cov = 0.5 * (cov + cov.T)
    alpha = cov @ (Phi.T @ (dinv * y))
    return PosteriorGp(gp, alpha, cov, trend_field, beta)


def sample(posterior, seed=None):
    """Draw coefficients from the posterior (symmetric factorization)."""
    rng = as_generator(seed)
    w, V, r = posterior._factor
    z = rng.standard_normal(r)
    if len(w) == 0:
        return posterior.mean_coefficients.copy()
    return posterior.mean_coefficients + V @ (np.sqrt(w) * z[: len(w)])


def sample_prior(gp, seed=None):
    return as_generator(seed).standard_normal(gp.rank)


def log_prior(alpha):
    """log N(alpha; 0, I)."""
    a = np.asarray(alpha, dtype=np.float64).ravel()
    return float(-0.5 * a @ a - 0.5 * a.size * np.log(2 * np.pi))


def interpolate_to(gp_full, coarse_indices, coarse_field, noise=1e-8):
    """Regress a deformation known at a vertex subset into the full model.

    Returns the posterior mean field on all vertices of ``gp_full``; an empty
    subset returns the prior mean.
    """
    idx = check_indices(coarse_indices, gp_full.n)
    if idx.size == 0:
        return gp_full.mean.copy()
    field = np.asarray(coarse_field, dtype=np.float64).reshape(len(idx), gp_full.d)
    return regress(gp_full, idx, field, noise).mean_field()


# --------------------------------------------------------------------------
# serialization

MODEL_FORMAT = "gingr-lowrank-gp"
MODEL_VERSION = 1


def save_model(gp, path):
    """Write a ``.npz`` container (little-endian float64, basis as (r, n, d))."""
    meta = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "n": gp.n, "d": gp.d, "rank": gp.rank}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
            reference=gp.reference.astype("<f8"),
            mean=gp.mean.astype("<f8"),
            eigenvalues=gp.eigenvalues.astype("<f8"),
            basis=gp.basis.astype("<f8"),
        )


def load_model(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("format") != MODEL_FORMAT:
            raise ValidationError(f"{path}: not a {MODEL_FORMAT} file")
        if meta.get("version") != MODEL_VERSION:
            raise ValidationError(f"{path}: unsupported model version {meta.get('version')}")
        return LowRankGp(z["reference"], z["mean"], z["eigenvalues"], z["basis"])
