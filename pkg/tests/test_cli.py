import csv
import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from plyfile import PlyData

from gingr import gpmm, meshio
from gingr.cli import main
from gingr.geometry import Landmark, umeyama_align
from gingr.synthetic import icosphere, two_lobe_mesh

DATA = Path(__file__).resolve().parents[1] / "data" / "sphere_pair"


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def sphere_dir(tmp_path):
    meshio.save_geometry(icosphere(1), tmp_path / "ref.ply")
    meshio.save_landmarks([Landmark("north", [0, 0, 1.0]), Landmark("east", [1.0, 0, 0])], tmp_path / "lm.json")
    return tmp_path


def config(directory, **extra):
    base = {"version": 1, "preset": "icp_t", "reference": "ref.ply", "target": "ref.ply",
            "prior": {"kernel": {"type": "gaussian", "beta": 0.8}, "rank": 20}, "max_iterations": 10}
    base.update(extra)
    return write_json(directory / "run.json", base)


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# register


def test_self_registration_returns_input(sphere_dir):
    cfg = config(sphere_dir)
    assert main(["--out", str(sphere_dir / "out"), "register", str(cfg)]) == 0
    out = meshio.load_geometry(sphere_dir / "out" / "registered.ply")
    np.testing.assert_allclose(out.points, icosphere(1).points, atol=1e-6)
    rows = meshio.read_trace_csv(sphere_dir / "out" / "trace.csv")
    assert rows and set(rows[0]) == {"iteration", "sigma2", "mean_dist", "max_dist", "log_posterior", "accepted"}
    result = json.loads((sphere_dir / "out" / "result.json").read_text())
    assert {"alpha", "transform", "iterations", "converged"} <= set(result)


def test_shipped_example_reduces_distance(tmp_path):
    work = tmp_path / "pair"
    shutil.copytree(DATA, work)
    assert main(["--out", str(tmp_path / "out"), "register", str(work / "icp_t.json")]) == 0
    rows = meshio.read_trace_csv(tmp_path / "out" / "trace.csv")
    assert rows[-1]["mean_dist"] < 0.1 * rows[0]["mean_dist"]


def test_negative_beta_is_a_config_error_naming_the_field(sphere_dir, capsys):
    cfg = config(sphere_dir)
    code = main(["--out", str(sphere_dir / "out"), "register", str(cfg), "--set", "prior.kernel.beta=-1"])
    assert code == 2
    assert "prior.kernel.beta" in capsys.readouterr().err


@pytest.mark.parametrize("override", ["prior.rank=0", "iterations=3", "preset=nope", "prior.kernel.type=magic"])
def test_invalid_configs_exit_2(sphere_dir, override):
    assert main(["--out", str(sphere_dir / "out"), "register", str(config(sphere_dir)), "--set", override]) == 2


def test_missing_input_file_exits_2(sphere_dir):
    cfg = config(sphere_dir, target="missing.ply")
    assert main(["--out", str(sphere_dir / "out"), "register", str(cfg)]) == 2


def test_numeric_failure_exits_3_and_keeps_partial_trace(sphere_dir):
    cfg = config(sphere_dir, filters={"max_normal_angle": 1e-9})
    far = icosphere(1)
    meshio.save_geometry(far.with_points(-far.points[:, ::-1] + 50), sphere_dir / "far.ply")
    code = main(["--out", str(sphere_dir / "out"), "register", str(cfg), "--set", "target=far.ply"])
    assert code == 3
    # the failure hit the first iteration, so the partial trace is the header only
    assert (sphere_dir / "out" / "trace.partial.csv").read_text().startswith("iteration,sigma2")


def test_probabilistic_register_writes_chain_and_uncertainty(sphere_dir):
    cfg = config(sphere_dir, mode="probabilistic", rigid_correction=False,
                 probabilistic={"n_samples": 20, "burn_in": 5, "likelihood_variance": 0.01,
                                "random_walk_scale": 0.01})
    assert main(["--out", str(sphere_dir / "out"), "--seed", "4", "register", str(cfg)]) == 0
    ply = PlyData.read(str(sphere_dir / "out" / "uncertainty.ply"))
    assert len(ply["vertex"]["uncertainty"]) == 42
    assert np.load(sphere_dir / "out" / "chain.npz")["alphas"].shape == (15, 20)


def test_thread_count_must_be_positive(sphere_dir):
    assert main(["--threads", "0", "register", str(config(sphere_dir))]) == 2


def test_no_command_is_a_usage_error():
    assert main([]) == 2


# sample-prior


def test_sample_prior_is_reproducible(sphere_dir):
    cfg = config(sphere_dir)
    for name in ("a", "b"):
        assert main(["--seed", "7", "--out", str(sphere_dir / name), "sample-prior", str(cfg), "--count", "3"]) == 0
    for i in range(3):
        assert digest(sphere_dir / "a" / f"sample_00{i}.ply") == digest(sphere_dir / "b" / f"sample_00{i}.ply")
    assert main(["--seed", "8", "--out", str(sphere_dir / "c"), "sample-prior", str(cfg)]) == 0
    assert digest(sphere_dir / "a" / "sample_000.ply") != digest(sphere_dir / "c" / "sample_000.ply")


def test_sample_prior_zero_is_the_reference(sphere_dir):
    assert main(["--out", str(sphere_dir / "z"), "sample-prior", str(config(sphere_dir)), "--zero"]) == 0
    np.testing.assert_allclose(meshio.load_geometry(sphere_dir / "z" / "sample_000.ply").points,
                               icosphere(1).points, atol=1e-8)


def test_sample_prior_variance_matches_model(sphere_dir):
    out = sphere_dir / "many"
    assert main(["--out", str(out), "sample-prior", str(config(sphere_dir)), "--count", "1000",
                 "--save-model"]) == 0
    gp = gpmm.load_model(out / "model.npz")
    pts = np.stack([meshio.load_geometry(out / f"sample_{i:03d}.ply").points for i in range(1000)])
    emp = pts.var(axis=0).sum(axis=1)
    np.testing.assert_allclose(emp, gp.marginal_variance(), rtol=0.15)


# kernel-map


def test_kernel_map_is_normalized_at_the_landmark(sphere_dir):
    cfg = config(sphere_dir)
    assert main(["--out", str(sphere_dir / "k"), "kernel-map", str(cfg), "--landmark", "north",
                 "--landmarks", str(sphere_dir / "lm.json")]) == 0
    _, attrs = meshio.load_geometry(sphere_dir / "k" / "kernel_map.ply", with_attributes=True)
    vals = attrs["correlation"]
    north = int(np.argmax(icosphere(1).points[:, 2]))
    assert vals[north] == pytest.approx(1.0) and vals.max() == pytest.approx(1.0)


def test_kernel_map_unknown_landmark_exits_2(sphere_dir):
    code = main(["--out", str(sphere_dir / "k"), "kernel-map", str(config(sphere_dir)), "--landmark", "south",
                 "--landmarks", str(sphere_dir / "lm.json")])
    assert code == 2


def test_kernel_map_on_two_lobes(tmp_path):
    mesh, lobe = two_lobe_mesh()
    meshio.save_geometry(mesh, tmp_path / "ref.ply")
    vals = {}
    for name, kernel in (("lap", {"type": "inverse_laplacian"}), ("gauss", {"type": "gaussian", "beta": 0.3})):
        cfg = config(tmp_path, prior={"kernel": kernel, "rank": 20})
        assert main(["--out", str(tmp_path / name), "kernel-map", str(cfg), "--vertex", "0"]) == 0
        _, attrs = meshio.load_geometry(tmp_path / name / "kernel_map.ply", with_attributes=True)
        vals[name] = attrs["correlation"]
    # nearest vertex on the other lobe, across the gap
    other = np.flatnonzero(lobe != lobe[0])
    partner = other[np.argmin(np.linalg.norm(mesh.points[other] - mesh.points[0], axis=1))]
    assert vals["gauss"][0] == pytest.approx(1.0) and vals["lap"][0] == pytest.approx(1.0)
    assert vals["gauss"][partner] > 0.5
    assert vals["lap"][partner] < vals["gauss"][partner]


# benchmark


def test_benchmark_zero_deformation(tmp_path):
    spec = write_json(tmp_path / "bench.json", {"version": 1, "subdivisions": 1, "deformation": 0.0,
                                                "seeds": [0, 1], "algorithms": ["icp_t", "cpd"],
                                                "overrides": {"cpd": {"max_iterations": 20}}})
    assert main(["--out", str(tmp_path / "b"), "benchmark", str(spec)]) == 0
    with open(tmp_path / "b" / "runs.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    assert all(float(r["mean_dist"]) < 1e-3 for r in rows if r["algorithm"] == "icp_t")
    agg = (tmp_path / "b" / "aggregate.csv").read_text().splitlines()
    assert agg[0].startswith("algorithm,runs,failed") and len(agg) == 3


def test_benchmark_is_byte_stable_across_threads(tmp_path):
    spec = write_json(tmp_path / "bench.json", {"version": 1, "subdivisions": 1, "deformation": 0.1,
                                                "seeds": [0, 1], "algorithms": ["icp_t"]})
    for name, threads in (("one", "1"), ("two", "2")):
        assert main(["--threads", threads, "--out", str(tmp_path / name), "benchmark", str(spec),
                     "--no-timing"]) == 0
    assert digest(tmp_path / "one" / "runs.csv") == digest(tmp_path / "two" / "runs.csv")


def test_benchmark_failure_exits_3(tmp_path):
    spec = write_json(tmp_path / "bench.json", {"version": 1, "subdivisions": 1, "seeds": [0],
                                                "algorithms": ["icp_t"], "rotation_deg": 180,
                                                "overrides": {"icp_t": {"filters": {"max_normal_angle": 1e-9}}}})
    assert main(["--out", str(tmp_path / "b"), "benchmark", str(spec)]) == 3
    with open(tmp_path / "b" / "runs.csv", newline="") as fh:
        assert next(csv.DictReader(fh))["status"] == "failed"


def test_benchmark_spec_validation(tmp_path):
    spec = write_json(tmp_path / "bench.json", {"version": 1, "seeds": [], "algorithms": ["icp_t"]})
    assert main(["--out", str(tmp_path / "b"), "benchmark", str(spec)]) == 2
    spec = write_json(tmp_path / "bench.json", {"version": 1, "seeds": [0], "algorithms": ["magic"]})
    assert main(["--out", str(tmp_path / "b"), "benchmark", str(spec)]) == 2


# make-synthetic


def synth(out, *flags):
    return main(["--out", str(out), "make-synthetic", "--subdivisions", "1", *flags])


def test_zero_deformation_target_is_reference(tmp_path):
    assert synth(tmp_path, "--deformation", "0") == 0
    ref = meshio.load_geometry(tmp_path / "reference.ply")
    tgt = meshio.load_geometry(tmp_path / "target.ply")
    np.testing.assert_allclose(tgt.points, ref.points, atol=1e-8)


def test_known_similarity_is_recovered(tmp_path):
    assert synth(tmp_path, "--deformation", "0", "--rotation-deg", "30", "--scale", "1.3",
                 "--translation", "0.5", "-1", "2") == 0
    ref = meshio.load_geometry(tmp_path / "reference.ply")
    tgt = meshio.load_geometry(tmp_path / "target.ply")
    T = umeyama_align(ref.points, tgt.points, with_scale=True)
    info = json.loads((tmp_path / "transform.json").read_text())["transform"]
    assert abs(T.scale - info["scale"]) < 1e-8 and abs(T.scale - 1.3) < 1e-8
    np.testing.assert_allclose(T.rotation, info["rotation"], atol=1e-8)
    np.testing.assert_allclose(T.translation, [0.5, -1, 2], atol=1e-8)


def test_partiality_keeps_about_half(tmp_path):
    assert synth(tmp_path, "--partiality", "0.5") == 0
    n_ref = meshio.load_geometry(tmp_path / "reference.ply").n
    n_tgt = meshio.load_geometry(tmp_path / "target.ply").n
    assert 0.4 < n_tgt / n_ref < 0.6
    with open(tmp_path / "ground_truth.csv", newline="") as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == n_tgt


@pytest.mark.parametrize("flags", [["--partiality", "1.0"], ["--scale", "0"], ["--base", "cube"],
                                   ["--deformation", "-1"]])
def test_invalid_synthetic_parameters_exit_2(tmp_path, flags):
    assert synth(tmp_path, *flags) == 2


def test_make_synthetic_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "11", "--out", str(tmp_path / name), "make-synthetic", "--subdivisions", "1",
                     "--noise", "0.01"]) == 0
    for f in ("reference.ply", "target.ply", "ground_truth.csv", "transform.json"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
