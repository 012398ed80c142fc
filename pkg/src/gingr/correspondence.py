"""Correspondence estimators and noise schedules.

Every estimator returns a :class:`CorrespondenceSet`: reference indices, the
matched target coordinates, the observed displacement from the positions
the estimator was given, and a noise variance per pair. The registration
loop turns these into GP observations.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .exceptions import (
    AlignmentError,
    ConfigError,
    EmptyCorrespondenceError,
    NumericalError,
    ValidationError,
)
from .geometry import (
    Landmark,
    PointSet,
    TriangleMesh,
    as_points,
    closest_points,
    feature_on_boundary,
    median_edge_length,
    segments_hit_mesh,
    umeyama_align,
    vertex_normals,
)
from .validation import check_positive

# exclusion reason codes
NORMAL = "normal"
BOUNDARY = "boundary"
SELF_INTERSECTION = "self_intersection"
TWO_WAY = "two_way"
LOW_MASS = "low_mass"

#: rows of P with less soft mass than this are dropped
MASS_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    indices: np.ndarray
    targets: np.ndarray
    observed: np.ndarray
    noise: np.ndarray
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp).ravel()
        if len(np.unique(idx)) != len(idx):
            raise ValidationError("correspondence set has duplicate reference indices")
        noise = np.asarray(self.noise, dtype=np.float64).ravel()
        if np.any(~(noise > 0)):
            raise ValidationError("correspondence noise variances must be > 0")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64).reshape(len(idx), -1))
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=np.float64).reshape(len(idx), -1))

    def __len__(self):
        return len(self.indices)

    @property
    def positions(self):
        """The positions the displacements were measured from."""
        return self.targets - self.observed


@dataclass(frozen=True)
class FilterConfig:
    """Closest-point filters. ``max_normal_angle`` in degrees; ``None`` disables."""

    max_normal_angle: float = 60.0
    reject_boundary: bool = True
    self_intersection: bool = False
    two_way: bool = False
    two_way_factor: float = 2.0

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown filter keys {sorted(unknown)}", field="filters")
        cfg = cls(**data)
        if cfg.max_normal_angle is not None:
            check_positive(cfg.max_normal_angle, "filters.max_normal_angle")
        check_positive(cfg.two_way_factor, "filters.two_way_factor")
        return cfg


def closest_point(deformed_ref, target, filters=None, sigma2=1.0):
    """Filtered closest-point correspondences from each reference point.

    The closest point is a surface projection when ``target`` has triangles,
    the nearest vertex otherwise. Normal filtering applies only when both
    geometries are triangle meshes; reference vertices without a defined
    normal are not normal-filtered.
    """
    filters = filters or FilterConfig()
    sigma2 = check_positive(sigma2, "sigma2")
    X = as_points(deformed_ref)
    n = len(X)
    cp = closest_points(target, X)
    keep = np.ones(n, dtype=bool)
    excluded = {}

    def drop(mask, reason):
        for i in np.flatnonzero(mask & keep):
            excluded[int(i)] = reason
        keep[mask] = False

    both_meshes = (isinstance(deformed_ref, TriangleMesh) and deformed_ref.has_triangles
                   and isinstance(target, TriangleMesh) and target.has_triangles)
    if filters.max_normal_angle is not None and both_meshes and X.shape[1] == 3:
        nr = vertex_normals(deformed_ref)
        nt = target.face_normals[cp.triangle]
        nt = nt / np.linalg.norm(nt, axis=1, keepdims=True)
        defined = np.isfinite(nr).all(axis=1)
        cos = np.einsum("ij,ij->i", np.where(defined[:, None], nr, 0.0), nt)
        drop(defined & (cos < np.cos(np.deg2rad(filters.max_normal_angle))), NORMAL)

    if filters.reject_boundary and isinstance(target, TriangleMesh) and target.has_triangles:
        drop(feature_on_boundary(target, cp.triangle, cp.feature), BOUNDARY)

    if filters.self_intersection and isinstance(deformed_ref, TriangleMesh) and deformed_ref.has_triangles:
        hit = segments_hit_mesh(deformed_ref, X, cp.points, skip_vertices=np.arange(n))
        drop(hit, SELF_INTERSECTION)

    if filters.two_way:
        back = closest_points(PointSet(X), cp.points)
        tol = filters.two_way_factor * median_edge_length(deformed_ref)
        drop(np.linalg.norm(X[back.vertex] - X, axis=1) > tol, TWO_WAY)

    if not keep.any():
        raise EmptyCorrespondenceError("every reference point was filtered out", excluded)
    idx = np.flatnonzero(keep)
    targets = cp.points[idx]
    return CorrespondenceSet(idx, targets, targets - X[idx], np.full(len(idx), sigma2), excluded)


@dataclass(frozen=True, eq=False)
class SoftAssignment:
    P: np.ndarray
    row_mass: np.ndarray
    w: float

    @property
    def P1(self):
        return self.row_mass


def outlier_constant(sigma2, w, n, volume, d):
    """(2 pi sigma^2)^(d/2) * w / (1 - w) * n / V."""
    if w == 0:
        return 0.0
    return (2 * np.pi * sigma2) ** (d / 2) * (w / (1 - w)) * n / volume


def bounding_volume(points):
    ext = np.ptp(np.asarray(points, dtype=np.float64), axis=0)
    ext = np.where(ext > 0, ext, max(ext.max(), 1.0))
    return float(np.prod(ext))


def cpd_probabilities(deformed_ref_points, target_points, sigma2, w=0.0, volume=None):
    """Soft assignment p_ij of target point j to reference point i.

    Each column sums to 1 when ``w == 0`` and to less otherwise. Computed in
    log space so tiny ``sigma2`` does not underflow.
    """
    X = as_points(deformed_ref_points)
    Y = as_points(target_points)
    sigma2 = check_positive(sigma2, "sigma2")
    if not 0 <= w < 1:
        raise ConfigError(f"must satisfy 0 <= w < 1, got {w}", field="w")
    n, d = X.shape
    D2 = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    logk = -D2 / (2 * sigma2)
    vol = bounding_volume(Y) if volume is None else volume
    c = outlier_constant(sigma2, w, n, vol, d)
    terms = logk
    if c > 0:
        terms = np.vstack([logk, np.full((1, logk.shape[1]), np.log(c))])
    denom = logsumexp(terms, axis=0)
    P = np.exp(logk - denom)
    return SoftAssignment(P, P.sum(axis=1), float(w))


def cpd_observation(assign, target_points, deformed_ref_points, lam, sigma2, mass_floor=MASS_FLOOR):
    """CPD M-step as GP observations.

    Displacement ``(P Y)_i / P1_i - x_i``; noise ``lam * sigma2 / P1_i`` so a
    confidently matched point gets a small variance.
    """
    Y = as_points(target_points)
    X = as_points(deformed_ref_points)
    lam = check_positive(lam, "lambda")
    sigma2 = check_positive(sigma2, "sigma2")
    P1 = assign.row_mass
    keep = P1 > mass_floor
    idx = np.flatnonzero(keep)
    targets = (assign.P[idx] @ Y) / P1[idx, None]
    excluded = {int(i): LOW_MASS for i in np.flatnonzero(~keep)}
    return CorrespondenceSet(idx, targets, targets - X[idx], lam * sigma2 / P1[idx], excluded)


def bcpd_observation(assign, target_points, reference_points, current_deformation, transform, lam, sigma2,
                     mass_floor=MASS_FLOOR):
    """BCPD observations and similarity update.

    Displacements are ``T^-1((P Y)_i / P1_i) - x_R,i`` in the reference frame
    with noise ``lam * sigma2 / (s^2 P1_i)``. The new transform is the
    Umeyama fit of ``X_R + U`` onto ``Q P Y``. On a degenerate fit the
    previous transform is kept.

    Returns ``(CorrespondenceSet, SimilarityTransform)``.
    """
    XR = as_points(reference_points)
    base = cpd_observation(assign, target_points, XR, lam, sigma2, mass_floor)
    idx = base.indices
    inv = transform.inverse()
    local = inv.apply(base.targets)
    obs = CorrespondenceSet(idx, local, local - XR[idx],
                            lam * sigma2 / (transform.scale**2 * assign.row_mass[idx]), base.excluded)
    U = np.zeros_like(XR) if current_deformation is None else np.asarray(current_deformation)
    try:
        new_t = umeyama_align(XR[idx] + U[idx], base.targets, with_scale=True)
    except AlignmentError:
        new_t = transform
    return obs, new_t


def icp_a_observation(closest, reference_points, kernel_matrix, affine=None):
    """Observation correction that turns ICP-A's affine fit into a deformation.

    ``U_i = x_c,i - (x_R,i + sigma_i^2 (K^-1 (X_R - A))_i)`` with ``K`` the
    ICP-A kernel matrix restricted to the observed indices and ``sigma_i^2``
    the pair noise. ``affine`` is the global affine component ``A`` (n x d)
    of the solution; ``None`` means zero. At unit noise and ``A = 0`` this is
    ``X_c - (X_R + K^-1 X_R)``. With :func:`affine_null_space` as ``A`` and
    every vertex observed, one GP regression step reproduces the
    least-squares ICP-A update exactly, for any noise level.
    """
    XR = as_points(reference_points)
    K = np.asarray(getattr(kernel_matrix, "values", kernel_matrix), dtype=np.float64)
    idx = closest.indices
    Ko = K[np.ix_(idx, idx)]
    scale = np.abs(np.diag(Ko)).max() if len(idx) else 1.0
    Ko = Ko + 1e-10 * scale * np.eye(len(idx))
    rhs = XR[idx] - (0.0 if affine is None else np.asarray(affine)[idx])
    try:
        corr = np.linalg.solve(Ko, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("ICP-A kernel matrix is singular") from exc
    if not np.all(np.isfinite(corr)):
        raise NumericalError("ICP-A correction is not finite")
    observed = closest.targets - (XR[idx] + closest.noise[:, None] * corr)
    return CorrespondenceSet(idx, closest.targets, observed, closest.noise, closest.excluded)


def affine_null_space(kernel_matrix, reference_points, indices, targets, noise):
    """GLS estimate of the global affine map of ``targets`` under the ICP-A prior.

    Returns the affine field ``A = [X_R, gamma] beta`` evaluated at every
    reference vertex. The homogeneous column uses 1; any nonzero constant
    spans the same space.
    """
    XR = as_points(reference_points)
    K = np.asarray(getattr(kernel_matrix, "values", kernel_matrix), dtype=np.float64)
    idx = np.asarray(indices)
    H = np.column_stack([XR, np.ones(len(XR))])
    C = K[np.ix_(idx, idx)] + np.diag(np.broadcast_to(noise, (len(idx),)))
    Ci_H = np.linalg.solve(C, H[idx])
    beta = np.linalg.solve(H[idx].T @ Ci_H, Ci_H.T @ np.asarray(targets))
    return H @ beta


def add_landmarks(corr, reference_points, current_positions, ref_landmarks, target_landmarks,
                  min_variance=1e-10):
    """Append landmark pairs to ``corr``, overriding estimator pairs at the same vertex.

    Reference landmarks snap to the nearest reference vertex; the pair noise is
    the sum of both landmark variances (floored at ``min_variance``).
    """
    if not ref_landmarks and not target_landmarks:
        return corr
    XR = as_points(reference_points)
    pos = as_points(current_positions)
    ref_by_id = _landmarks_by_id(ref_landmarks, "reference")
    tgt_by_id = _landmarks_by_id(target_landmarks, "target")
    if set(ref_by_id) != set(tgt_by_id):
        missing = sorted(set(ref_by_id) ^ set(tgt_by_id))
        raise ValidationError(f"landmark ids without a match: {missing}")
    idx, tgts, var = [], [], []
    for lid in sorted(ref_by_id):
        r, t = ref_by_id[lid], tgt_by_id[lid]
        i = int(np.argmin(np.linalg.norm(XR - r.point, axis=1)))
        if i in idx:
            raise ValidationError(f"landmark {lid!r} snaps to a vertex already used by another landmark")
        idx.append(i)
        tgts.append(t.point)
        var.append(max(r.variance + t.variance, min_variance))
    idx = np.array(idx, dtype=np.intp)
    tgts = np.array(tgts, dtype=np.float64)
    keep = ~np.isin(corr.indices, idx)
    excluded = {k: v for k, v in corr.excluded.items() if k not in set(idx.tolist())}
    return CorrespondenceSet(
        np.concatenate([corr.indices[keep], idx]),
        np.vstack([corr.targets[keep], tgts]),
        np.vstack([corr.observed[keep], tgts - pos[idx]]),
        np.concatenate([corr.noise[keep], var]),
        excluded,
    )


def _landmarks_by_id(landmarks, which):
    out = {}
    for lm in landmarks or []:
        if not isinstance(lm, Landmark):
            lm = Landmark(**lm)
        if lm.id in out:
            raise ValidationError(f"duplicate {which} landmark id {lm.id!r}")
        out[lm.id] = lm
    return out


# --------------------------------------------------------------------------
# sigma^2 schedules


@dataclass
class SigmaSchedule:
    """Noise-variance schedule.

    ``variant`` is ``fixed_list`` (``values`` in order, last repeats),
    ``geometric`` (``sigma2 * rate`` each step, never below ``floor``) or
    ``cpd_residual`` (variance of the soft residuals). ``sigma2 = None`` for
    ``cpd_residual`` asks the registration loop for the CPD initialization.
    """

    variant: str = "geometric"
    sigma2: float = 1.0
    rate: float = 0.9
    floor: float = 1e-6
    values: tuple = ()
    step_count: int = 0

    def __post_init__(self):
        if self.variant not in ("fixed_list", "geometric", "cpd_residual"):
            raise ConfigError(f"unknown schedule variant {self.variant!r}", field="schedule.type")
        check_positive(self.floor, "schedule.floor")
        if self.variant == "fixed_list":
            if not self.values:
                raise ConfigError("fixed_list needs at least one value", field="schedule.values")
            self.values = tuple(check_positive(v, "schedule.values") for v in self.values)
            self.sigma2 = self.values[0]
        elif self.variant == "geometric":
            if not 0 < self.rate < 1:
                raise ConfigError(f"must be in (0, 1), got {self.rate}", field="schedule.rate")
            check_positive(self.sigma2, "schedule.sigma2")
        elif self.sigma2 is not None:
            check_positive(self.sigma2, "schedule.sigma2")

    def copy(self):
        return replace(self)


def next_sigma(schedule, residual_stats=None):
    """Advance ``schedule`` and return the new sigma^2.

    ``residual_stats`` is ``(P, target_points, deformed_ref_points)`` and is
    required for ``cpd_residual``.
    """
    s = schedule
    s.step_count += 1
    if s.variant == "fixed_list":
        s.sigma2 = s.values[min(s.step_count, len(s.values) - 1)]
    elif s.variant == "geometric":
        s.sigma2 = max(s.rate * s.sigma2, s.floor)
    else:
        if residual_stats is None:
            raise ValidationError("cpd_residual schedule needs (P, target, deformed reference)")
        s.sigma2 = max(cpd_residual_variance(*residual_stats), s.floor)
    return s.sigma2


def cpd_residual_variance(P, target_points, deformed_ref_points):
    Y = as_points(target_points)
    X = as_points(deformed_ref_points)
    D2 = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    total = P.sum()
    if total <= 0:
        return 0.0
    return float((P * D2).sum() / (X.shape[1] * total))


def cpd_initial_sigma2(deformed_ref_points, target_points):
    """Mean squared distance over all pairs divided by d (the CPD initialization)."""
    X = as_points(deformed_ref_points)
    Y = as_points(target_points)
    D2 = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    return float(D2.mean() / X.shape[1])
