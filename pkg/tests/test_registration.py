import numpy as np
import pytest

from gingr import gpmm
from gingr import registration as reg
from gingr.correspondence import CorrespondenceSet
from gingr.exceptions import ConfigError, ValidationError
from gingr.geometry import PointSet, SimilarityTransform
from gingr.metrics import mean_surface_distance
from gingr.synthetic import femur_proxy, icosphere, make_pair


def small_config(name, **kw):
    kw.setdefault("max_iterations", 20)
    cfg = reg.preset(name, **kw)
    cfg.prior.rank = min(cfg.prior.rank, 60)
    return cfg


# presets and config


def test_presets_are_complete():
    assert reg.preset("icp_t").rigid_correction and not reg.preset("icp_t").rigid_with_scale
    assert not reg.preset("cpd").rigid_correction
    assert reg.preset("bcpd").transform_source == "reference"
    assert reg.preset("icp_a").null_space == "affine"
    assert reg.preset("cpd").prior.kernel["type"] == "gaussian"
    assert reg.preset("icp_t", beta=0.3).prior.kernel["type"] == "inverse_laplacian"
    assert reg.preset("cpd", beta=0.3).prior.kernel["beta"] == 0.3


@pytest.mark.parametrize("changes,field", [
    ({"max_iterations": 0}, "max_iterations"),
    ({"w": 1.0}, "w"),
    ({"damping": 0.0}, "damping"),
    ({"null_space": "rigid"}, "null_space"),
    ({"estimator": "nearest"}, "estimator"),
])
def test_invalid_fields_are_named(changes, field):
    with pytest.raises(ConfigError) as info:
        reg.preset("icp_t", **changes)
    assert info.value.field == field


def test_custom_preset_needs_kernel_and_estimator():
    with pytest.raises(ConfigError, match="kernel"):
        reg.preset("custom", estimator="cpd")
    with pytest.raises(ConfigError, match="estimator"):
        reg.preset("custom", kernel={"type": "gaussian", "beta": 1.0})
    with pytest.raises(ConfigError):
        reg.preset("nope")


def test_probabilistic_weights_must_sum_to_one():
    cfg = reg.preset("icp_t")
    cfg.mode = "probabilistic"
    cfg.probabilistic = reg.ProbabilisticSpec(informed_weight=0.7, random_walk_weight=0.7)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_dict_round_trip():
    cfg = reg.config_from_dict({"preset": "cpd", "lambda": 3.0, "w": 0.1, "prior": {"rank": 40},
                                "probabilistic": {"likelihood_variance": None}})
    assert cfg.lam == 3.0 and cfg.w == 0.1 and cfg.prior.rank == 40
    assert cfg.probabilistic.likelihood_variance == np.inf
    back = reg.config_from_dict(reg.config_to_dict(cfg))
    assert reg.config_to_dict(back) == reg.config_to_dict(cfg)


def test_config_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        reg.config_from_dict({"preset": "icp_t", "iterations": 3})
    with pytest.raises(ConfigError):
        reg.config_from_dict({"preset": "icp_t", "schedule": {"type": "geometric", "speed": 1}})


def test_kernel_spec_validation():
    with pytest.raises(ConfigError):
        reg.validate_kernel_spec({"type": "gaussian"})
    with pytest.raises(ConfigError):
        reg.validate_kernel_spec({"type": "gaussian", "beta": 1, "sigma": 2})
    with pytest.raises(ValidationError):
        reg.validate_kernel_spec({"type": "gaussian", "beta": -1})
    with pytest.raises(ConfigError):
        reg.validate_kernel_spec({"type": "sum", "terms": []})


def test_build_kernel_mixes_coordinate_and_index_terms():
    mesh = icosphere(1)
    k = reg.build_kernel({"type": "sum", "terms": [{"kernel": {"type": "gaussian", "beta": 0.5}},
                                                   {"kernel": {"type": "inverse_laplacian"}, "weight": 0.2}]},
                         mesh)
    assert k.gram(np.arange(mesh.n)).full().shape == (3 * mesh.n, 3 * mesh.n)


# deterministic iterations


@pytest.mark.parametrize("name", ["icp_t", "icp_a"])
def test_self_registration_is_a_fixed_point(name):
    mesh = icosphere(2)
    cfg = small_config(name)
    kernel, gp = reg.build_model(mesh, cfg)
    state = reg.initial_state(gp, cfg, mesh)
    new, corr, _ = reg.gingr_step(state, gp, cfg, mesh, mesh, kernel)
    np.testing.assert_allclose(reg.current_positions(gp, new, cfg), mesh.points, atol=1e-6)


@pytest.mark.parametrize("name", ["cpd", "bcpd"])
def test_soft_presets_converge_on_identical_shapes(name):
    mesh = femur_proxy(1)
    res = reg.register_deterministic(mesh, mesh, small_config(name, max_iterations=60))
    assert mean_surface_distance(res.deformed, mesh) < 1e-3


def test_bcpd_first_step_recovers_translation():
    mesh = femur_proxy(1)
    t = np.array([0.02, -0.01, 0.005])
    target = mesh.with_points(mesh.points + t)
    cfg = small_config("bcpd")
    kernel, gp = reg.build_model(mesh, cfg)
    state = reg.initial_state(gp, cfg, target)
    # tiny sigma2 makes the assignment a permutation
    state.sigma2 = state.schedule.sigma2 = 1e-6
    new, _, _ = reg.gingr_step(state, gp, cfg, target, mesh, kernel)
    np.testing.assert_allclose(new.transform.translation, t, atol=1e-9)
    assert abs(new.transform.scale - 1) < 1e-9


def test_icp_t_reduces_distance_on_synthetic_pair():
    pair = make_pair("sphere", 2, deformation=0.2, beta=1.0, seed=1)
    res = reg.register_deterministic(pair.reference, pair.target, small_config("icp_t", max_iterations=30))
    first = res.trace[0]["mean_dist"]
    assert res.trace[-1]["mean_dist"] < 0.25 * first
    assert list(res.trace[0]) == list(res.trace_columns())


def test_registration_is_deterministic():
    pair = make_pair("femur_proxy", 1, deformation=0.1, beta=1.0, seed=2)
    a = reg.register_deterministic(pair.reference, pair.target, small_config("cpd"))
    b = reg.register_deterministic(pair.reference, pair.target, small_config("cpd"))
    np.testing.assert_array_equal(a.deformed.points, b.deformed.points)


def test_damping_moves_part_way():
    mesh = icosphere(1)
    target = mesh.with_points(mesh.points * 1.1)
    cfg = small_config("icp_t", rigid_correction=False)
    kernel, gp = reg.build_model(mesh, cfg)
    state = reg.initial_state(gp, cfg, target)
    full, _, _ = reg.gingr_step(state, gp, cfg, target, mesh, kernel)
    half, _, _ = reg.gingr_step(state, gp, cfg.replace(damping=0.5), target, mesh, kernel)
    np.testing.assert_allclose(half.alpha, 0.5 * full.alpha, atol=1e-12)


def test_supplied_correspondences_are_used():
    mesh = icosphere(1)
    cfg = small_config("icp_t", rigid_correction=False)
    kernel, gp = reg.build_model(mesh, cfg)
    state = reg.initial_state(gp, cfg, mesh)
    shift = np.array([0.0, 0, 0.3])
    corr = CorrespondenceSet([0], mesh.points[[0]] + shift, [shift], [1e-3])
    new, used, post = reg.gingr_step(state, gp, cfg, mesh, mesh, kernel, correspondences=corr)
    assert used is corr
    assert reg.local_field(gp, new, cfg)[0, 2] > 0.1


def test_empty_correspondences_raise_with_partial_result():
    mesh = icosphere(1)
    far = mesh.with_points(mesh.points[:, ::-1] * [1, 1, -1] + 100)
    cfg = small_config("icp_t", filters=reg.FilterConfig(max_normal_angle=1e-6))
    with pytest.raises(reg.RegistrationError) as info:
        reg.register_deterministic(mesh, far, cfg)
    assert info.value.partial is not None and info.value.partial.iterations == 0


def test_rigid_correction_helper():
    X = np.random.default_rng(0).standard_normal((10, 3))
    pairs = CorrespondenceSet(np.arange(10), X + [1.0, 2, 3], np.zeros((10, 3)), np.ones(10))
    T = reg.rigid_correction(pairs, X)
    np.testing.assert_allclose(T.translation, [1, 2, 3], atol=1e-12)
    line = CorrespondenceSet(np.arange(3), np.zeros((3, 3)), np.zeros((3, 3)), np.ones(3))
    with pytest.warns(RuntimeWarning):
        T = reg.rigid_correction(line, np.zeros((3, 3)))
    np.testing.assert_array_equal(T.matrix(), np.eye(4))


# multi-resolution


def test_single_full_level_matches_plain_registration():
    pair = make_pair("sphere", 2, deformation=0.2, beta=1.0, seed=4)
    cfg = small_config("icp_t", max_iterations=10)
    plain = reg.register_deterministic(pair.reference, pair.target, cfg)
    multi = reg.register_multires(pair.reference, pair.target, cfg, [pair.reference.n])
    np.testing.assert_allclose(multi.deformed.points, plain.deformed.points, atol=1e-10)


def test_coarse_to_fine_levels():
    pair = make_pair("sphere", 2, deformation=0.2, beta=1.0, seed=4)
    cfg = small_config("icp_t", max_iterations=10)
    res = reg.register_multires(pair.reference, pair.target, cfg, [42, pair.reference.n])
    assert res.deformed.n == pair.reference.n
    assert mean_surface_distance(res.deformed, pair.target) < mean_surface_distance(pair.reference, pair.target)


def test_multires_level_errors():
    mesh = icosphere(1)
    cfg = small_config("icp_t")
    for levels in ([], [mesh.n, 12], [mesh.n + 1]):
        with pytest.raises(ConfigError):
            reg.register_multires(mesh, mesh, cfg, levels)


# probabilistic mode


def prob_config(**spec):
    cfg = small_config("icp_t", rigid_correction=False, mode="probabilistic")
    cfg.prior.rank = 10
    cfg.probabilistic = reg.ProbabilisticSpec(**spec)
    return cfg.validate()


def test_proposal_equal_to_current_has_zero_log_ratio():
    mesh = icosphere(1)
    cfg = prob_config(n_samples=10)
    kernel, gp = reg.build_model(mesh, cfg)
    sampler = reg.MetropolisHastings(gp, cfg, mesh, mesh, kernel)
    p = sampler.evaluate(np.full(gp.rank, 0.1))
    assert sampler.log_acceptance_ratio(p, p) == 0.0


def test_log_ratio_is_antisymmetric():
    mesh = icosphere(1)
    cfg = prob_config(n_samples=10, likelihood_variance=0.1)
    kernel, gp = reg.build_model(mesh, cfg)
    sampler = reg.MetropolisHastings(gp, cfg, mesh, mesh, kernel)
    rng = np.random.default_rng(0)
    a = sampler.evaluate(0.1 * rng.standard_normal(gp.rank))
    b = sampler.evaluate(0.1 * rng.standard_normal(gp.rank))
    assert np.isclose(sampler.log_acceptance_ratio(a, b), -sampler.log_acceptance_ratio(b, a))


def test_mh_step_reports_densities():
    mesh = icosphere(1)
    cfg = prob_config(n_samples=10, likelihood_variance=0.1)
    kernel, gp = reg.build_model(mesh, cfg)
    state = reg.initial_state(gp, cfg, mesh)
    new, accepted, info = reg.mh_step(state, gp, cfg, mesh, 0, mesh, kernel)
    assert set(info) == {"current", "proposed", "log_ratio"} and new.iteration == 1
    assert accepted == (not np.array_equal(new.alpha, state.alpha))


def test_prior_sampling_has_unit_coefficient_variance():
    mesh = icosphere(1)
    cfg = prob_config(n_samples=4000, burn_in=500, likelihood_variance=np.inf, informed_weight=0.0,
                      random_walk_weight=1.0, random_walk_scale=0.8)
    cfg.schedule.sigma2 = 1e6
    res, chain = reg.register_probabilistic(mesh, mesh, cfg, rng=0)
    assert len(chain) == 3500
    assert 0.1 < chain.acceptance_rate < 0.9
    np.testing.assert_allclose(chain.alphas.var(axis=0).mean(), 1.0, rtol=0.25)


def test_chain_without_kept_samples_still_returns_map():
    mesh = icosphere(1)
    cfg = prob_config(n_samples=5, burn_in=5, likelihood_variance=0.1)
    res, chain = reg.register_probabilistic(mesh, mesh, cfg, rng=1)
    assert len(chain) == 0 and res.deformed.n == mesh.n
    with pytest.raises(ValidationError):
        reg.posterior_uncertainty(chain, res.gp)


def test_posterior_uncertainty():
    mesh = icosphere(1)
    cfg = prob_config(n_samples=10)
    _, gp = reg.build_model(mesh, cfg)
    T = SimilarityTransform.identity()
    same = reg.PosteriorChain(np.ones((5, gp.rank)), [T] * 5, np.zeros(5), 0, 1, 5, 0)
    np.testing.assert_allclose(reg.posterior_uncertainty(same, gp), 0, atol=1e-20)
    rng = np.random.default_rng(0)
    draws = rng.standard_normal((4000, gp.rank))
    prior = reg.PosteriorChain(draws, [T] * 4000, np.zeros(4000), 0, 1, 4000, 0)
    np.testing.assert_allclose(reg.posterior_uncertainty(prior, gp), gp.marginal_variance(), rtol=0.15)


def test_probabilistic_run_is_seeded():
    mesh = icosphere(1)
    target = mesh.with_points(mesh.points * 1.05)
    cfg = prob_config(n_samples=30, likelihood_variance=0.01, random_walk_scale=0.05)
    a = reg.register_probabilistic(mesh, target, cfg, rng=5)[1]
    b = reg.register_probabilistic(mesh, target, cfg, rng=5)[1]
    np.testing.assert_array_equal(a.alphas, b.alphas)


def test_likelihood_directions():
    mesh = icosphere(1)
    assert reg.log_likelihood(mesh.points, mesh, mesh, np.inf) == 0.0
    both = reg.log_likelihood(mesh.points, mesh, mesh, 0.5, "symmetric")
    one = reg.log_likelihood(mesh.points, mesh, mesh, 0.5, "target")
    assert np.isclose(both, 2 * one)
    assert np.isclose(one, mesh.n * -0.5 * np.log(2 * np.pi * 0.5))


def test_deterministic_init_starts_from_registration():
    pair = make_pair("sphere", 1, deformation=0.2, beta=1.0, seed=0)
    cfg = prob_config(n_samples=3, likelihood_variance=1e-3, init="deterministic", random_walk_scale=1e-3)
    res, _ = reg.register_probabilistic(pair.reference, pair.target, cfg, rng=0)
    assert mean_surface_distance(res.deformed, pair.target) < mean_surface_distance(pair.reference, pair.target)


def test_mean_field_helpers():
    gp = gpmm.build_low_rank(reg.build_kernel({"type": "gaussian", "beta": 1.0}, PointSet(np.eye(3))),
                             np.eye(3), 9)
    state = reg.RegistrationState(np.zeros(gp.rank), SimilarityTransform.identity(), 1.0)
    np.testing.assert_array_equal(reg.current_positions(gp, state), np.eye(3))
