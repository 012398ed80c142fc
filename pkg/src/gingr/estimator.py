"""scikit-learn style wrapper around the registration drivers."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import gpmm
from . import registration as reg
from .exceptions import ValidationError
from .geometry import PointSet, as_points
from .metrics import mean_surface_distance


class GingrRegistration(BaseEstimator):
    """Non-rigid registration of a reference shape onto a target.

    Parameters
    ----------
    preset : {"cpd", "bcpd", "icp_t", "icp_a", "custom"}
    kernel : dict, optional
        Kernel spec, e.g. ``{"type": "gaussian", "beta": 0.5}``; required for
        ``custom``.
    estimator : str, optional
        Correspondence estimator; required for ``custom``.
    rank : int, optional
        Number of low-rank basis functions.
    mode : {"deterministic", "probabilistic"}
    max_iterations, tolerance : optional
        Deterministic stopping rule.
    n_samples : int, optional
        Chain length in probabilistic mode.
    levels : list of int, optional
        Vertex counts for coarse-to-fine registration (deterministic only).
    options : dict, optional
        Further :class:`~gingr.registration.RegistrationConfig` fields.
    seed : int
    """

    def __init__(self, preset="icp_t", kernel=None, estimator=None, rank=None, mode="deterministic",
                 max_iterations=None, tolerance=None, n_samples=None, levels=None, options=None, seed=0):
        self.preset = preset
        self.kernel = kernel
        self.estimator = estimator
        self.rank = rank
        self.mode = mode
        self.max_iterations = max_iterations
        self.tolerance = tolerance
        self.n_samples = n_samples
        self.levels = levels
        self.options = options
        self.seed = seed

    def make_config(self):
        overrides = dict(self.options or {})
        if self.preset == "custom" and self.kernel is not None:
            overrides["kernel"] = self.kernel
        for name in ("estimator", "max_iterations", "tolerance"):
            if getattr(self, name) is not None:
                overrides[name] = getattr(self, name)
        overrides["mode"] = self.mode
        overrides["seed"] = self.seed
        prob = overrides.pop("probabilistic", None)
        cfg = reg.preset(self.preset, **overrides)
        if self.kernel is not None and self.preset != "custom":
            cfg.prior.kernel = self.kernel
        if self.rank is not None:
            cfg.prior.rank = int(self.rank)
        if prob is not None:
            cfg.probabilistic = prob if isinstance(prob, reg.ProbabilisticSpec) else reg.ProbabilisticSpec(**prob)
        if self.n_samples is not None:
            cfg.probabilistic.n_samples = int(self.n_samples)
        return cfg.validate()

    def fit(self, X, y):
        """Register reference ``X`` onto target ``y`` (geometries or point arrays)."""
        reference = X if isinstance(X, PointSet) else PointSet(X)
        target = y if isinstance(y, PointSet) else PointSet(y)
        cfg = self.make_config()
        self.chain_ = None
        if cfg.mode == "probabilistic":
            if self.levels:
                raise ValidationError("levels apply to deterministic mode only")
            self.result_, self.chain_ = reg.register_probabilistic(reference, target, cfg, rng=self.seed)
        elif self.levels:
            self.result_ = reg.register_multires(reference, target, cfg, self.levels)
        else:
            self.result_ = reg.register_deterministic(reference, target, cfg)
        self.config_ = cfg
        self.reference_ = reference
        self.alpha_ = self.result_.alpha
        self.transform_ = self.result_.transform
        self.n_iter_ = self.result_.iterations
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit before using the registration")

    def transform(self, X=None):
        """Registered vertex positions.

        ``X`` may be omitted or be any geometry in vertex correspondence with
        the fitted reference; the fitted deformation and global transform are
        applied to its vertices.
        """
        self._check_fitted()
        if X is None:
            return self.result_.deformed.points.copy()
        pts = as_points(X)
        if pts.shape != self.reference_.points.shape:
            raise ValidationError(f"expected {self.reference_.n} vertices in correspondence with the reference")
        return self.transform_.apply(pts + self.result_.field)

    def predict(self, X=None):
        """Registered geometry (reference connectivity with deformed vertices)."""
        self._check_fitted()
        if X is None:
            return self.result_.deformed
        return self.reference_.with_points(self.transform(X))

    def score(self, X, y):
        """Negative symmetric mean surface distance between the fitted result and ``y``."""
        self._check_fitted()
        target = y if isinstance(y, PointSet) else PointSet(y)
        return -mean_surface_distance(self.predict(X), target)

    def uncertainty(self):
        """Per-vertex posterior variance (probabilistic fits)."""
        self._check_fitted()
        if self.chain_ is None:
            raise ValidationError("uncertainty needs a probabilistic fit")
        return reg.posterior_uncertainty(self.chain_, self.result_.gp)

    def posterior_samples(self):
        self._check_fitted()
        if self.chain_ is None:
            raise ValidationError("posterior samples need a probabilistic fit")
        gp = self.result_.gp
        return np.stack([T.apply(gpmm.deformed_points(gp, a))
                         for a, T in zip(self.chain_.alphas, self.chain_.transforms)])
