import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gingr import GingrRegistration
from gingr.exceptions import ValidationError
from gingr.synthetic import icosphere, make_pair


@pytest.fixture(scope="module")
def pair():
    return make_pair("sphere", 2, deformation=0.2, beta=1.0, seed=1)


def test_params_round_trip_through_clone():
    est = GingrRegistration(preset="cpd", rank=30, max_iterations=5, options={"w": 0.1})
    params = est.get_params()
    assert params["rank"] == 30 and params["options"] == {"w": 0.1}
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    twin.set_params(rank=10)
    assert twin.rank == 10 and est.rank == 30


def test_fit_transform_predict_score(pair):
    est = GingrRegistration(preset="icp_t", rank=60, max_iterations=30).fit(pair.reference, pair.target)
    assert est.n_iter_ >= 1 and est.alpha_.shape == (60,)
    pts = est.transform()
    np.testing.assert_allclose(est.transform(pair.reference), pts, atol=1e-12)
    assert est.predict().n == pair.reference.n
    before = GingrRegistration(preset="icp_t", rank=60, max_iterations=1).fit(pair.reference, pair.target)
    assert est.score(None, pair.target) > before.score(None, pair.target)
    assert est.score(None, pair.target) < 0


def test_fit_accepts_plain_arrays():
    mesh = icosphere(1)
    est = GingrRegistration(preset="cpd", rank=20, max_iterations=5).fit(mesh.points, mesh.points * 1.1)
    assert est.transform().shape == mesh.points.shape


def test_unfitted_use_raises():
    est = GingrRegistration()
    with pytest.raises(NotFittedError):
        est.transform()
    with pytest.raises(NotFittedError):
        est.score(None, np.zeros((3, 3)))


def test_transform_needs_matching_vertices(pair):
    est = GingrRegistration(preset="icp_t", rank=20, max_iterations=2).fit(pair.reference, pair.target)
    with pytest.raises(ValidationError):
        est.transform(np.zeros((5, 3)))
    with pytest.raises(ValidationError):
        est.uncertainty()


def test_custom_preset_and_levels(pair):
    est = GingrRegistration(preset="custom", kernel={"type": "gaussian", "beta": 0.8}, estimator="closest_point",
                            rank=40, max_iterations=10, levels=[42, pair.reference.n])
    est.fit(pair.reference, pair.target)
    assert est.config_.prior.kernel["beta"] == 0.8


def test_probabilistic_fit_exposes_samples():
    mesh = icosphere(1)
    est = GingrRegistration(preset="icp_t", rank=10, mode="probabilistic", n_samples=20,
                            options={"rigid_correction": False,
                                     "probabilistic": {"n_samples": 20, "burn_in": 5, "likelihood_variance": 0.01,
                                                       "random_walk_scale": 0.01}})
    est.fit(mesh, mesh.with_points(mesh.points * 1.05))
    samples = est.posterior_samples()
    assert samples.shape == (15, mesh.n, 3)
    assert est.uncertainty().shape == (mesh.n,)
    with pytest.raises(ValidationError):
        clone(est).set_params(levels=[10]).fit(mesh, mesh)
