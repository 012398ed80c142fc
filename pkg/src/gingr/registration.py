"""The registration loop.

Each iteration estimates correspondences between the current deformed
reference and the target, turns them into noisy deformation observations
relative to the undeformed reference, and conditions the GP prior on them.
Deterministic mode moves to the posterior mean; probabilistic mode proposes
posterior samples (mixed with a random walk) inside a Metropolis-Hastings
chain.
"""

import copy
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import gpmm
from .correspondence import (
    CorrespondenceSet,
    FilterConfig,
    SigmaSchedule,
    add_landmarks,
    affine_null_space,
    closest_point,
    cpd_initial_sigma2,
    cpd_observation,
    cpd_probabilities,
    icp_a_observation,
    next_sigma,
)
from .exceptions import (
    AlignmentError,
    ConfigError,
    EmptyCorrespondenceError,
    GingrError,
    NumericalError,
    ValidationError,
)
from .geometry import (
    PointSet,
    SimilarityTransform,
    TriangleMesh,
    as_points,
    closest_points,
    decimate,
    umeyama_align,
)
from .kernels import (
    DotProductKernel,
    GaussianKernel,
    InverseLaplacianKernel,
    Kernel,
    StatisticalKernel,
    combine,
    icp_a_kernel,
    symmetric_kernel,
)
from .validation import as_generator, check_positive

ESTIMATORS = ("closest_point", "cpd", "bcpd", "icp_a")
PRESETS = ("cpd", "bcpd", "icp_t", "icp_a", "custom")
LIKELIHOODS = ("symmetric", "target", "model")


# --------------------------------------------------------------------------
# configuration


@dataclass
class PriorSpec:
    """Kernel description plus low-rank settings.

    ``kernel`` is a dict such as ``{"type": "gaussian", "beta": 0.5,
    "scale": 0.1}``; see :func:`build_kernel`. A ready :class:`Kernel` is
    also accepted.
    """

    kernel: object = None
    rank: int = 200
    method: str = "dense_eig"
    n_landmarks: int = None


@dataclass
class ProbabilisticSpec:
    n_samples: int = 1000
    burn_in: int = None
    thin: int = 1
    informed_weight: float = 0.5
    random_walk_weight: float = 0.5
    likelihood_variance: float = 1.0
    random_walk_scale: float = 0.1
    init: str = "zero"
    likelihood: str = "symmetric"

    def resolved_burn_in(self):
        return int(0.2 * self.n_samples) if self.burn_in is None else int(self.burn_in)


@dataclass
class RegistrationConfig:
    preset: str = "custom"
    prior: PriorSpec = field(default_factory=PriorSpec)
    estimator: str = None
    filters: FilterConfig = field(default_factory=FilterConfig)
    w: float = 0.0
    lam: float = 1.0
    schedule: SigmaSchedule = field(default_factory=SigmaSchedule)
    mode: str = "deterministic"
    probabilistic: ProbabilisticSpec = field(default_factory=ProbabilisticSpec)
    max_iterations: int = 50
    tolerance: float = 1e-4
    stop_rule: str = "displacement"
    rigid_correction: bool = False
    rigid_with_scale: bool = False
    transform_source: str = "deformed"
    null_space: str = None
    damping: float = 1.0
    landmarks: tuple = None
    seed: int = 0

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}", field="preset")
        if self.prior.kernel is None:
            raise ConfigError("a kernel is required", field="prior.kernel")
        if self.estimator is None:
            raise ConfigError("a correspondence estimator is required", field="estimator")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}",
                              field="estimator")
        if isinstance(self.prior.kernel, dict):
            validate_kernel_spec(self.prior.kernel, "prior.kernel")
        if not isinstance(self.prior.rank, int) or self.prior.rank < 1:
            raise ConfigError("must be a positive integer", field="prior.rank")
        if self.prior.method not in ("dense_eig", "nystrom"):
            raise ConfigError("must be 'dense_eig' or 'nystrom'", field="prior.method")
        if not isinstance(self.max_iterations, int) or self.max_iterations < 1:
            raise ConfigError("must be an integer >= 1", field="max_iterations")
        check_positive(self.tolerance, "tolerance")
        check_positive(self.lam, "lambda")
        if not 0 <= self.w < 1:
            raise ConfigError("must satisfy 0 <= w < 1", field="w")
        if not 0 < self.damping <= 1:
            raise ConfigError("must be in (0, 1]", field="damping")
        if self.stop_rule not in ("displacement", "distance"):
            raise ConfigError("must be 'displacement' or 'distance'", field="stop_rule")
        if self.transform_source not in ("deformed", "reference"):
            raise ConfigError("must be 'deformed' or 'reference'", field="transform_source")
        if self.null_space not in (None, "translation", "affine"):
            raise ConfigError("must be null, 'translation' or 'affine'", field="null_space")
        if self.mode not in ("deterministic", "probabilistic"):
            raise ConfigError("must be 'deterministic' or 'probabilistic'", field="mode")
        p = self.probabilistic
        if self.mode == "probabilistic":
            if not isinstance(p.n_samples, int) or p.n_samples < 1:
                raise ConfigError("must be an integer >= 1", field="probabilistic.n_samples")
            if not 0 <= p.resolved_burn_in() <= p.n_samples:
                raise ConfigError("must be in [0, n_samples]", field="probabilistic.burn_in")
            if not isinstance(p.thin, int) or p.thin < 1:
                raise ConfigError("must be an integer >= 1", field="probabilistic.thin")
            ws = (p.informed_weight, p.random_walk_weight)
            if min(ws) < 0 or abs(sum(ws) - 1) > 1e-9:
                raise ConfigError("informed_weight + random_walk_weight must equal 1 (both >= 0)",
                                  field="probabilistic.informed_weight")
            if p.likelihood_variance != np.inf:
                check_positive(p.likelihood_variance, "probabilistic.likelihood_variance")
            check_positive(p.random_walk_scale, "probabilistic.random_walk_scale")
            if p.init not in ("zero", "deterministic"):
                raise ConfigError("must be 'zero' or 'deterministic'", field="probabilistic.init")
            if p.likelihood not in LIKELIHOODS:
                raise ConfigError(f"must be one of {LIKELIHOODS}", field="probabilistic.likelihood")
        return self

    def replace(self, **changes):
        return replace(self, **changes)


_KERNEL_FIELDS = {
    "gaussian": {"beta": True, "scale": False},
    "symmetric": {"beta": True, "axis": False, "scale": False},
    "dot_product": {"gamma": True, "scale": False},
    "inverse_laplacian": {"scale": False},
    "icp_a": {"gamma": True, "scale": False},
    "statistical": {"fields": False, "training_dir": False},
    "sum": {"terms": True},
    "product": {"terms": True},
}


def validate_kernel_spec(spec, where="kernel"):
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError("kernel spec must be an object with a 'type'", field=where)
    kind = spec["type"]
    if kind not in _KERNEL_FIELDS:
        raise ConfigError(f"unknown kernel type {kind!r}", field=f"{where}.type")
    allowed = _KERNEL_FIELDS[kind]
    unknown = set(spec) - set(allowed) - {"type"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field=where)
    for key, required in allowed.items():
        if required and key not in spec:
            raise ConfigError("is required", field=f"{where}.{key}")
    for key in ("beta", "gamma", "scale"):
        if key in spec:
            check_positive(spec[key], f"{where}.{key}")
    if kind in ("sum", "product"):
        if not spec["terms"]:
            raise ConfigError("needs at least one term", field=f"{where}.terms")
        for i, term in enumerate(spec["terms"]):
            validate_kernel_spec(term.get("kernel"), f"{where}.terms[{i}].kernel")
            check_positive(term.get("weight", 1.0), f"{where}.terms[{i}].weight", strict=False)
    if kind == "statistical" and "fields" not in spec and "training_dir" not in spec:
        raise ConfigError("needs 'fields' or 'training_dir'", field=where)


def build_kernel(spec, reference):
    """Instantiate a kernel spec for ``reference`` (PointSet or TriangleMesh)."""
    if isinstance(spec, Kernel):
        return spec
    validate_kernel_spec(spec)
    d = reference.d
    kind = spec["type"]
    scale = float(spec.get("scale", 1.0))
    if kind == "gaussian":
        k = GaussianKernel(spec["beta"], d)
    elif kind == "symmetric":
        k = symmetric_kernel(GaussianKernel(spec["beta"], d), spec.get("axis", "x"))
    elif kind == "dot_product":
        k = DotProductKernel(spec["gamma"], d)
    elif kind == "inverse_laplacian":
        k = InverseLaplacianKernel(reference)
    elif kind == "icp_a":
        k = icp_a_kernel(reference, spec["gamma"])
    elif kind == "statistical":
        fields_ = spec.get("fields")
        if fields_ is None:
            from .meshio import load_training_fields  # noqa: PLC0415  (avoid import cycle)
            fields_ = load_training_fields(spec["training_dir"], reference)
        k = StatisticalKernel(fields_)
    else:
        parts = [(build_kernel(t["kernel"], reference), float(t.get("weight", 1.0))) for t in spec["terms"]]
        if len({p.is_coordinate_based for p, _ in parts}) > 1:
            parts = [(p.on(reference.points), w) for p, w in parts]
        k = combine(parts, kind)
    return k if scale == 1.0 else combine([(k, scale)], "sum")


def kernel_mean(kernel):
    """GP mean implied by a kernel (statistical kernels carry one)."""
    if isinstance(kernel, StatisticalKernel):
        return kernel.mean_field
    for k, _ in getattr(kernel, "terms", ()):
        m = kernel_mean(k)
        if m is not None:
            return m
    return None


def build_model(reference, config):
    """Kernel and low-rank GP for ``reference`` according to ``config.prior``."""
    kernel = build_kernel(config.prior.kernel, reference)
    gp = gpmm.build_low_rank(kernel, reference.points, config.prior.rank, mean=kernel_mean(kernel),
                             method=config.prior.method, n_landmarks=config.prior.n_landmarks,
                             seed=config.seed)
    return kernel, gp


def preset(name, **params):
    """Fully populated :class:`RegistrationConfig` for a named algorithm.

    Keyword arguments override kernel parameters (``beta``, ``gamma``,
    ``scale``) or any config field.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}", field="preset")
    kparams = {k: params.pop(k) for k in ("beta", "gamma", "scale") if k in params}
    if name in ("cpd", "bcpd"):
        cfg = RegistrationConfig(
            preset=name,
            prior=PriorSpec({"type": "gaussian", "beta": kparams.get("beta", 1.0),
                             "scale": kparams.get("scale", 1.0)}, rank=200),
            estimator=name,
            lam=2.0 if name == "cpd" else 50.0,
            schedule=SigmaSchedule("cpd_residual", sigma2=None, floor=1e-8),
            max_iterations=100,
            tolerance=1e-6,
            rigid_correction=False,
            transform_source="reference",
        )
    elif name == "icp_t":
        cfg = RegistrationConfig(
            preset=name,
            prior=PriorSpec({"type": "inverse_laplacian", "scale": kparams.get("scale", 1.0)}, rank=200),
            estimator="closest_point",
            schedule=SigmaSchedule("geometric", sigma2=1.0, rate=0.8, floor=1e-3),
            max_iterations=50,
            tolerance=1e-5,
            rigid_correction=True,
            rigid_with_scale=False,
        )
    elif name == "icp_a":
        cfg = RegistrationConfig(
            preset=name,
            prior=PriorSpec({"type": "icp_a", "gamma": kparams.get("gamma", 1.0),
                             "scale": kparams.get("scale", 1.0)}, rank=200),
            estimator="closest_point",
            schedule=SigmaSchedule("geometric", sigma2=1.0, rate=0.8, floor=1e-3),
            max_iterations=50,
            tolerance=1e-5,
            rigid_correction=False,
            null_space="affine",
        )
    else:
        cfg = RegistrationConfig(preset="custom")
        if "kernel" in params:
            cfg.prior = PriorSpec(params.pop("kernel"))
    for key, value in params.items():
        if key not in {f.name for f in fields(RegistrationConfig)}:
            raise ConfigError("unknown configuration field", field=key)
        _set_field(cfg, key, value)
    return cfg.validate()


# --------------------------------------------------------------------------
# state and results


@dataclass
class RegistrationState:
    alpha: np.ndarray
    transform: SimilarityTransform
    sigma2: float
    schedule: SigmaSchedule = None
    iteration: int = 0
    mean_displacement: float = np.inf
    trend_coefficients: np.ndarray = None

    def copy(self):
        s = copy.copy(self)
        s.alpha = self.alpha.copy()
        s.schedule = None if self.schedule is None else self.schedule.copy()
        return s


@dataclass
class RegistrationResult:
    reference: object
    deformed: object
    alpha: np.ndarray
    transform: SimilarityTransform
    trace: list
    iterations: int
    converged: bool
    gp: gpmm.LowRankGp = None
    field: np.ndarray = None
    wall_time: float = 0.0

    def trace_columns(self):
        return ("iteration", "sigma2", "mean_dist", "max_dist", "log_posterior", "accepted")


@dataclass
class PosteriorChain:
    alphas: np.ndarray
    transforms: list
    log_posteriors: np.ndarray
    burn_in: int
    thin: int
    n_steps: int
    n_accepted: int

    @property
    def acceptance_rate(self):
        return self.n_accepted / max(self.n_steps, 1)

    def __len__(self):
        return len(self.alphas)


class RegistrationError(GingrError):
    """A step failed; ``partial`` holds the result up to the failing iteration."""

    def __init__(self, message, partial=None, cause=None):
        super().__init__(message)
        self.partial = partial
        self.cause = cause


def initial_state(gp, config, target=None, transform=None):
    schedule = config.schedule.copy()
    schedule.step_count = 0
    if schedule.sigma2 is None:
        if target is None:
            raise ValidationError("cpd_residual schedule without sigma2 needs the target")
        T = transform or SimilarityTransform.identity(gp.d)
        schedule.sigma2 = cpd_initial_sigma2(T.apply(gp.reference + gp.mean), as_points(target))
    return RegistrationState(
        alpha=np.zeros(gp.rank),
        transform=transform or SimilarityTransform.identity(gp.d),
        sigma2=schedule.sigma2,
        schedule=schedule,
    )


def _trend_basis(config, reference_points):
    return gpmm.trend_basis(config.null_space, reference_points)


def local_field(gp, state, config=None):
    """Deformation in the reference frame (GP instance plus null-space trend)."""
    u = gpmm.instance(gp, state.alpha)
    if state.trend_coefficients is not None and config is not None and config.null_space:
        H = _trend_basis(config, gp.reference)
        u = u + (np.kron(H, np.eye(gp.d)) @ state.trend_coefficients).reshape(gp.n, gp.d)
    return u


def current_positions(gp, state, config=None):
    return state.transform.apply(gp.reference + local_field(gp, state, config))


def _as_geometry(reference, points):
    if isinstance(reference, TriangleMesh):
        return reference.with_points(points)
    return PointSet(points)


# --------------------------------------------------------------------------
# one iteration


@dataclass
class StepInfo:
    correspondences: CorrespondenceSet
    posterior: gpmm.PosteriorGp
    mean_dist: float
    max_dist: float
    sigma2: float
    soft: object = None


def estimate_observations(state, gp, config, target, reference=None, kernel=None, correspondences=None):
    """Correspondences for the current state, as observations in the reference frame.

    Returns ``(local, world, transform, soft)``: ``local`` holds deformation
    observations relative to the undeformed reference, ``world`` the raw
    estimator output, ``transform`` the (possibly updated) global transform
    and ``soft`` the CPD soft assignment when one was computed.
    """
    reference = reference if reference is not None else PointSet(gp.reference)
    XR = gp.reference
    u = local_field(gp, state, config)
    pos = state.transform.apply(XR + u)
    deformed = _as_geometry(reference, pos)
    Y = as_points(target)
    sigma2 = state.sigma2
    soft = None
    T = state.transform

    if correspondences is not None:
        world = correspondences
    elif config.estimator in ("closest_point", "icp_a"):
        world = closest_point(deformed, target, config.filters, sigma2)
    else:
        soft = cpd_probabilities(pos, Y, sigma2, config.w)
        world = cpd_observation(soft, Y, pos, config.lam, sigma2)
    if config.landmarks:
        world = add_landmarks(world, XR, pos, config.landmarks[0], config.landmarks[1])
    if len(world) == 0:
        raise EmptyCorrespondenceError("no correspondences", getattr(world, "excluded", {}))

    idx = world.indices
    new_T = T
    # source of the similarity fit: deformed reference or the undeformed one
    src = XR[idx] + u[idx] if config.transform_source == "deformed" else XR[idx]
    if config.estimator == "bcpd" and soft is not None and correspondences is None:
        # observations use the current transform; the transform update follows
        try:
            new_T = umeyama_align(src, world.targets, with_scale=True)
        except AlignmentError:
            new_T = T
        frame = T
    elif config.rigid_correction:
        try:
            new_T = umeyama_align(src, world.targets, with_scale=config.rigid_with_scale)
        except AlignmentError:
            new_T = T
        frame = new_T
    else:
        frame = T
    inv = frame.inverse()
    local_targets = inv.apply(world.targets)
    local = CorrespondenceSet(idx, local_targets, local_targets - XR[idx],
                              world.noise / frame.scale**2, world.excluded)
    if config.estimator == "icp_a":
        if kernel is None:
            raise ValidationError("the icp_a estimator needs the kernel")
        K = kernel.gram(np.arange(gp.n) if not kernel.is_coordinate_based else XR).values
        A = affine_null_space(K, XR, idx, local.targets, local.noise)
        local = icp_a_observation(local, XR, K, affine=A)
    return local, world, new_T, soft


def gingr_step(state, gp, config, target, reference=None, kernel=None, correspondences=None):
    """One deterministic iteration: correspondences, GP regression, posterior-mean update.

    Returns ``(new_state, correspondences, posterior)``; ``correspondences``
    are the estimator's pairs in target coordinates.
    """
    new_state, info = _deterministic_step(state, gp, config, target, reference, kernel, correspondences)
    return new_state, info.correspondences, info.posterior


def _deterministic_step(state, gp, config, target, reference=None, kernel=None, correspondences=None):
    pos = current_positions(gp, state, config)
    local, world, new_T, soft = estimate_observations(state, gp, config, target, reference, kernel,
                                                      correspondences)
    H = _trend_basis(config, gp.reference)
    post = gpmm.regress(gp, local.indices, local.observed, local.noise, trend=H)
    new = state.copy()
    new.alpha = state.alpha + config.damping * (post.mean_coefficients - state.alpha)
    if post.trend_coefficients is not None:
        prev = state.trend_coefficients if state.trend_coefficients is not None else 0.0
        new.trend_coefficients = prev + config.damping * (post.trend_coefficients - prev)
    new.transform = new_T
    new.iteration = state.iteration + 1
    new_pos = current_positions(gp, new, config)
    new.mean_displacement = float(np.linalg.norm(new_pos - pos, axis=1).mean())

    dist = np.linalg.norm(world.targets - pos[world.indices], axis=1)
    if soft is not None:
        stats = (soft.P, as_points(target), new_pos)
    else:
        idx = world.indices
        stats = (np.eye(len(idx)), world.targets, new_pos[idx])
    used_sigma2 = state.sigma2
    if new.schedule is not None:
        new.sigma2 = next_sigma(new.schedule, stats)
    info = StepInfo(world, post, float(dist.mean()), float(dist.max()), used_sigma2, soft)
    return new, info


# --------------------------------------------------------------------------
# deterministic driver


def _prepare(reference, target, config, gp=None, kernel=None):
    config.validate()
    if not isinstance(reference, PointSet):
        reference = PointSet(reference)
    if not isinstance(target, PointSet):
        target = PointSet(target)
    if reference.d != target.d:
        raise ValidationError("reference and target dimensions differ")
    if gp is None:
        kernel, gp = build_model(reference, config)
    elif kernel is None and config.estimator == "icp_a":
        kernel = build_kernel(config.prior.kernel, reference)
    return reference, target, gp, kernel


def register_deterministic(reference, target, config, gp=None, kernel=None, state=None):
    """Iterate :func:`gingr_step` until the stopping rule fires or ``max_iterations``."""
    t0 = time.perf_counter()
    reference, target, gp, kernel = _prepare(reference, target, config, gp, kernel)
    state = state or initial_state(gp, config, target)
    trace = []
    converged = False
    for it in range(config.max_iterations):
        try:
            state, info = _deterministic_step(state, gp, config, target, reference, kernel)
        except (EmptyCorrespondenceError, NumericalError, np.linalg.LinAlgError) as exc:
            partial = _result(reference, gp, state, config, trace, False, t0)
            raise RegistrationError(f"iteration {it + 1} failed: {exc}", partial, exc) from exc
        trace.append({
            "iteration": it + 1, "sigma2": info.sigma2, "mean_dist": info.mean_dist,
            "max_dist": info.max_dist, "log_posterior": np.nan, "accepted": "",
        })
        metric = state.mean_displacement if config.stop_rule == "displacement" else info.mean_dist
        if metric < config.tolerance:
            converged = True
            break
    return _result(reference, gp, state, config, trace, converged, t0)


def _result(reference, gp, state, config, trace, converged, t0):
    pos = current_positions(gp, state, config)
    return RegistrationResult(
        reference=reference,
        deformed=_as_geometry(reference, pos),
        alpha=state.alpha.copy(),
        transform=state.transform,
        trace=trace,
        iterations=len(trace),
        converged=converged,
        gp=gp,
        field=local_field(gp, state, config),
        wall_time=time.perf_counter() - t0,
    )


def rigid_correction(pairs, positions, with_scale=False):
    """Umeyama transform from current positions of the paired vertices to their targets.

    Degenerate configurations return the identity with a warning.
    """
    pos = as_points(positions)[pairs.indices]
    try:
        return umeyama_align(pos, pairs.targets, with_scale=with_scale)
    except AlignmentError as exc:
        import warnings

        warnings.warn(f"rigid correction skipped: {exc}", RuntimeWarning, stacklevel=2)
        return SimilarityTransform.identity(pos.shape[1])


# --------------------------------------------------------------------------
# probabilistic mode


def log_likelihood(positions, reference, target, variance, direction="target", filters=None):
    """Independent point likelihood of the target given the deformed reference.

    Every closest-point distance contributes ``log N(dist; 0, variance)``.
    ``direction`` picks the pairs: ``target`` uses each target point and its
    closest point on the deformed reference, ``model`` uses the filtered
    closest-point pairs from the deformed reference to the target (vertices
    whose match is rejected, e.g. on a partial target's boundary, do not
    contribute) and ``symmetric`` sums both. An infinite variance disables
    the likelihood.
    """
    if variance == np.inf:
        return 0.0
    deformed = _as_geometry(reference, positions)
    dist = []
    if direction in ("target", "symmetric"):
        dist.append(closest_points(deformed, as_points(target)).distances)
    if direction in ("model", "symmetric"):
        try:
            pairs = closest_point(deformed, target, filters)
            dist.append(np.linalg.norm(pairs.targets - as_points(positions)[pairs.indices], axis=1))
        except EmptyCorrespondenceError:
            return -np.inf
    dist = np.concatenate(dist)
    return float(np.sum(-0.5 * dist**2 / variance - 0.5 * np.log(2 * np.pi * variance)))


@dataclass
class _ChainPoint:
    alpha: np.ndarray
    log_prior: float
    log_likelihood: float
    posterior: gpmm.PosteriorGp = None

    @property
    def log_posterior(self):
        return self.log_prior + self.log_likelihood


class MetropolisHastings:
    """Metropolis-Hastings over GP coefficients with an informed/random-walk mixture.

    The informed component samples the GP regression posterior computed from
    correspondences at the current state; its transition density is evaluated
    in both directions, so the chain targets ``p(alpha | target)`` exactly.
    Pass ``correspondences`` to freeze the correspondence set.
    """

    def __init__(self, gp, config, target, reference=None, kernel=None, correspondences=None,
                 transform=None):
        self.gp = gp
        self.config = config
        self.target = target
        self.reference = reference if reference is not None else PointSet(gp.reference)
        self.kernel = kernel
        self.frozen = correspondences
        self.p = config.probabilistic
        state = initial_state(gp, config, target, transform)
        self.transform = state.transform
        self.schedule = state.schedule
        self._H = _trend_basis(config, gp.reference)

    def _state(self, alpha):
        return RegistrationState(alpha, self.transform, self.schedule.sigma2, None)

    def positions(self, alpha):
        return self.transform.apply(self.gp.reference + gpmm.instance(self.gp, alpha))

    def informed_posterior(self, alpha):
        if self.p.informed_weight == 0:
            return None
        local, _, _, _ = estimate_observations(self._state(alpha), self.gp, self.config, self.target,
                                               self.reference, self.kernel, self.frozen)
        return gpmm.regress(self.gp, local.indices, local.observed, local.noise)

    def evaluate(self, alpha):
        lp = gpmm.log_prior(alpha)
        ll = log_likelihood(self.positions(alpha), self.reference, self.target, self.p.likelihood_variance,
                            self.p.likelihood, self.config.filters)
        try:
            post = self.informed_posterior(alpha)
        except (EmptyCorrespondenceError, ValidationError):
            post = None
        return _ChainPoint(np.asarray(alpha, dtype=np.float64), lp, ll, post)

    def _log_rw(self, a, b):
        s2 = self.p.random_walk_scale**2
        delta = a - b
        return float(-0.5 * delta @ delta / s2 - 0.5 * len(delta) * np.log(2 * np.pi * s2))

    def log_proposal(self, to_alpha, from_point):
        """log q(to | from) of the mixture."""
        terms = []
        if self.p.informed_weight > 0:
            if from_point.posterior is None:
                terms.append(-np.inf)
            else:
                terms.append(np.log(self.p.informed_weight) + from_point.posterior.log_density(to_alpha))
        if self.p.random_walk_weight > 0:
            terms.append(np.log(self.p.random_walk_weight) + self._log_rw(to_alpha, from_point.alpha))
        return float(np.logaddexp.reduce(terms))

    def log_acceptance_ratio(self, current, proposed):
        return (proposed.log_posterior - current.log_posterior
                + self.log_proposal(current.alpha, proposed)
                - self.log_proposal(proposed.alpha, current))

    def propose(self, current, rng):
        use_informed = current.posterior is not None and rng.random() < self.p.informed_weight
        if use_informed or self.p.random_walk_weight == 0:
            return gpmm.sample(current.posterior, rng), "informed"
        return current.alpha + self.p.random_walk_scale * rng.standard_normal(self.gp.rank), "random_walk"

    def step(self, current, rng):
        """One MH transition; returns ``(point, accepted, log_ratio)``."""
        alpha, _ = self.propose(current, rng)
        proposed = self.evaluate(alpha)
        ratio = self.log_acceptance_ratio(current, proposed)
        if not np.isfinite(proposed.log_posterior) or np.isnan(ratio):
            return current, False, -np.inf
        accepted = np.log(rng.random()) < ratio
        return (proposed if accepted else current), bool(accepted), ratio

    def anneal(self, point, rng=None):
        """Advance the proposal noise schedule; refresh the cached posterior."""
        if self.schedule.variant == "cpd_residual":
            return point
        before = self.schedule.sigma2
        next_sigma(self.schedule)
        if self.schedule.sigma2 != before and point.posterior is not None:
            point.posterior = self.evaluate(point.alpha).posterior
        return point


def mh_step(state, gp, config, target, rng, reference=None, kernel=None, sampler=None):
    """Single Metropolis-Hastings step from ``state``.

    Returns ``(new_state, accepted, log_densities)`` where ``log_densities``
    has the current and proposed log-posteriors and the log acceptance ratio.
    """
    sampler = sampler or MetropolisHastings(gp, config, target, reference, kernel,
                                            transform=state.transform)
    rng = as_generator(rng)
    current = sampler.evaluate(state.alpha)
    alpha, _ = sampler.propose(current, rng)
    proposed = sampler.evaluate(alpha)
    ratio = sampler.log_acceptance_ratio(current, proposed)
    accepted = bool(np.isfinite(ratio) and np.log(rng.random()) < ratio)
    new = state.copy()
    new.iteration = state.iteration + 1
    if accepted:
        new.alpha = proposed.alpha.copy()
    info = {"current": current.log_posterior, "proposed": proposed.log_posterior, "log_ratio": ratio}
    return new, accepted, info


def register_probabilistic(reference, target, config, rng=None, gp=None, kernel=None):
    """Run the MH chain; the result holds the maximum-a-posteriori visited state."""
    t0 = time.perf_counter()
    reference, target, gp, kernel = _prepare(reference, target, config, gp, kernel)
    rng = as_generator(config.seed if rng is None else rng)
    p = config.probabilistic
    transform = None
    alpha0 = np.zeros(gp.rank)
    if p.init == "deterministic":
        det = register_deterministic(reference, target, replace(config, mode="deterministic",
                                                                 null_space=None), gp, kernel)
        alpha0, transform = det.alpha, det.transform
    sampler = MetropolisHastings(gp, config, target, reference, kernel, transform=transform)
    current = sampler.evaluate(alpha0)
    best = current
    burn = p.resolved_burn_in()
    kept_alpha, kept_lp = [], []
    trace = []
    n_acc = 0
    for it in range(p.n_samples):
        sigma2 = sampler.schedule.sigma2
        current, accepted, _ = sampler.step(current, rng)
        n_acc += accepted
        if current.log_posterior > best.log_posterior:
            best = current
        if it >= burn and (it - burn) % p.thin == 0:
            kept_alpha.append(current.alpha.copy())
            kept_lp.append(current.log_posterior)
        trace.append({
            "iteration": it + 1, "sigma2": sigma2, "mean_dist": np.nan, "max_dist": np.nan,
            "log_posterior": current.log_posterior, "accepted": int(accepted),
        })
        current = sampler.anneal(current)
    chain = PosteriorChain(
        alphas=np.array(kept_alpha).reshape(-1, gp.rank),
        transforms=[sampler.transform] * len(kept_alpha),
        log_posteriors=np.array(kept_lp),
        burn_in=burn,
        thin=p.thin,
        n_steps=p.n_samples,
        n_accepted=n_acc,
    )
    state = RegistrationState(best.alpha, sampler.transform, sampler.schedule.sigma2)
    result = _result(reference, gp, state, None, trace, True, t0)
    return result, chain


def posterior_uncertainty(chain, gp):
    """Per-vertex trace of the covariance of deformed positions over the chain."""
    if len(chain) == 0:
        raise ValidationError("posterior chain is empty")
    pos = np.stack([T.apply(gp.reference + gpmm.instance(gp, a))
                    for a, T in zip(chain.alphas, chain.transforms)])
    return pos.var(axis=0).sum(axis=1)


# --------------------------------------------------------------------------
# multi-resolution


def register_multires(reference, target, config, levels, gp=None, kernel=None):
    """Coarse-to-fine deterministic registration with exact GP marginals per level.

    Each level registers a vertex-subset decimation of the reference with the
    full model restricted to those vertices; the result is carried to the next
    level through the full-resolution model.
    """
    t0 = time.perf_counter()
    if not levels:
        raise ConfigError("needs at least one level", field="levels")
    levels = [int(v) for v in levels]
    if sorted(levels) != levels:
        raise ConfigError("levels must be ascending", field="levels")
    reference, target, gp, kernel = _prepare(reference, target, config, gp, kernel)
    if levels[-1] > reference.n:
        raise ConfigError(f"last level exceeds the {reference.n} reference vertices", field="levels")
    if config.estimator == "icp_a" and levels != [reference.n]:
        raise ConfigError("the icp_a estimator needs the full kernel matrix; use null_space='affine'",
                          field="estimator")

    field_full = gp.mean.copy()
    state = None
    trace = []
    converged = False
    H_full = _trend_basis(config, gp.reference)
    for level in levels:
        if level == reference.n:
            coarse, idx, gp_level = reference, np.arange(reference.n), gp
        else:
            coarse, idx = decimate(reference, level, seed=config.seed)
            gp_level = gp.restrict(idx)
        start = initial_state(gp_level, config, target, None if state is None else state.transform)
        start.alpha = gpmm.project(gp_level, field_full[idx])
        if state is not None:
            start.trend_coefficients = state.trend_coefficients
            start.schedule, start.sigma2 = state.schedule, state.sigma2
        res = register_deterministic(coarse, target, config, gp=gp_level, kernel=kernel, state=start)
        trace.extend(res.trace)
        converged = res.converged
        state = start
        state.alpha, state.transform = res.alpha, res.transform
        if H_full is not None:
            H_lvl = H_full[idx]
            tr = res.field - gpmm.instance(gp_level, res.alpha)
            state.trend_coefficients = np.linalg.lstsq(np.kron(H_lvl, np.eye(gp.d)), tr.ravel(),
                                                       rcond=None)[0]
            gp_part = gpmm.instance(gp_level, res.alpha)
        else:
            gp_part = res.field
        if level == reference.n:
            field_full = gp_part
        else:
            field_full = gpmm.interpolate_to(gp, idx, gp_part)
    final = RegistrationState(gpmm.project(gp, field_full), state.transform, state.sigma2,
                              trend_coefficients=state.trend_coefficients)
    if levels[-1] == reference.n:
        final.alpha = state.alpha
    return _result(reference, gp, final, config, trace, converged, t0)


# --------------------------------------------------------------------------
# plain-dict round trip (JSON configs)

_SIMPLE_FIELDS = ("estimator", "w", "mode", "max_iterations", "tolerance", "stop_rule", "rigid_correction",
                  "rigid_with_scale", "transform_source", "null_space", "damping", "seed")


_NESTED_FIELDS = ("prior", "filters", "schedule", "probabilistic")


def _set_field(cfg, key, value):
    """Set one config field; plain dicts for nested fields are merged into the current value."""
    if key not in _NESTED_FIELDS or not isinstance(value, dict):
        setattr(cfg, key, value)
    elif key == "prior":
        unknown = set(value) - {"kernel", "rank", "method", "n_landmarks"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="prior")
        cfg.prior = replace(cfg.prior, **value)
    elif key == "filters":
        cfg.filters = FilterConfig.from_dict(value)
    elif key == "schedule":
        s = dict(value)
        variant = s.pop("type", cfg.schedule.variant)
        unknown = set(s) - {"sigma2", "rate", "floor", "values"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="schedule")
        if "values" in s:
            s["values"] = tuple(s["values"])
        if variant == cfg.schedule.variant:
            cur = cfg.schedule
            s = {"sigma2": cur.sigma2, "rate": cur.rate, "floor": cur.floor, "values": cur.values} | s
        cfg.schedule = SigmaSchedule(variant, **s)
    else:
        p = dict(value)
        unknown = set(p) - {f.name for f in fields(ProbabilisticSpec)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="probabilistic")
        if "likelihood_variance" in p and p["likelihood_variance"] is None:
            p["likelihood_variance"] = np.inf
        cfg.probabilistic = replace(cfg.probabilistic, **p)


def config_from_dict(data):
    """Build a validated config from a JSON-style dict.

    Keys left out take the preset's values; ``lambda`` maps to ``lam`` and a
    ``null`` likelihood variance disables the likelihood.
    """
    data = dict(data)
    name = data.pop("preset", "custom")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}", field="preset")
    cfg = preset(name) if name != "custom" else RegistrationConfig()
    for key in _SIMPLE_FIELDS:
        if key in data:
            setattr(cfg, key, data.pop(key))
    if "lambda" in data:
        cfg.lam = data.pop("lambda")
    for key in _NESTED_FIELDS:
        if key in data:
            _set_field(cfg, key, data.pop(key))
    if data:
        raise ConfigError(f"unknown keys {sorted(data)}", field="config")
    cfg.preset = name
    return cfg.validate()


def config_to_dict(cfg):
    out = {"preset": cfg.preset}
    for key in _SIMPLE_FIELDS:
        out[key] = getattr(cfg, key)
    out["lambda"] = cfg.lam
    kernel = cfg.prior.kernel
    out["prior"] = {"kernel": kernel if isinstance(kernel, dict) else repr(kernel), "rank": cfg.prior.rank,
                    "method": cfg.prior.method, "n_landmarks": cfg.prior.n_landmarks}
    out["filters"] = {f.name: getattr(cfg.filters, f.name) for f in fields(FilterConfig)}
    s = cfg.schedule
    out["schedule"] = {"type": s.variant, "sigma2": s.sigma2, "rate": s.rate, "floor": s.floor}
    if s.variant == "fixed_list":
        out["schedule"]["values"] = list(s.values)
    p = {f.name: getattr(cfg.probabilistic, f.name) for f in fields(ProbabilisticSpec)}
    if p["likelihood_variance"] == np.inf:
        p["likelihood_variance"] = None
    out["probabilistic"] = p
    return out
