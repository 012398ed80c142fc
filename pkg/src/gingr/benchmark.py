"""Seeded synthetic benchmark: algorithms x pairs, per-run and aggregate CSV."""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import registration as reg
from .exceptions import ConfigError, GingrError
from .metrics import hausdorff_distance, mean_surface_distance
from .synthetic import BASES, crop_mesh, make_pair

RUN_COLUMNS = ("algorithm", "seed", "status", "mean_dist", "hausdorff", "wall_time", "iterations", "error")
AGG_COLUMNS = ("algorithm", "runs", "failed", "mean_dist", "mean_dist_std", "hausdorff", "wall_time",
               "iterations")


@dataclass
class BenchmarkSpec:
    """Generator parameters, seeds and algorithms.

    Algorithms are preset names; a ``-P`` suffix runs the preset in
    probabilistic mode with the ``probabilistic`` settings. ``overrides``
    maps an algorithm name to extra config fields.
    """

    base: str = "sphere"
    subdivisions: int = 2
    deformation: float = 0.2
    beta: float = 1.0
    noise: float = 0.0
    partiality: float = 0.0
    crop_direction: tuple = None
    rotation_deg: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    seeds: list = field(default_factory=lambda: [0])
    algorithms: list = field(default_factory=lambda: ["icp_t"])
    overrides: dict = field(default_factory=dict)
    probabilistic: dict = field(default_factory=lambda: {"n_samples": 100, "init": "deterministic"})

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="benchmark")
        return cls(**data).validate()

    def validate(self):
        if self.base not in BASES:
            raise ConfigError(f"must be one of {BASES}", field="base")
        if not self.seeds:
            raise ConfigError("needs at least one seed", field="seeds")
        if not self.algorithms:
            raise ConfigError("needs at least one algorithm", field="algorithms")
        if not 0 <= self.partiality < 1:
            raise ConfigError("must be in [0, 1)", field="partiality")
        for name in ("deformation", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", field=name)
        for algo in self.algorithms:
            if algo.removesuffix("-P") not in reg.PRESETS or algo.removesuffix("-P") == "custom":
                raise ConfigError(f"unknown algorithm {algo!r}", field="algorithms")
        for algo in self.overrides:
            if algo not in self.algorithms:
                raise ConfigError(f"override for unlisted algorithm {algo!r}", field="overrides")
        return self


def algorithm_config(spec, algorithm, seed):
    name = algorithm.removesuffix("-P")
    params = dict(spec.overrides.get(algorithm, {}))
    if algorithm.endswith("-P"):
        params["mode"] = "probabilistic"
        params["probabilistic"] = {**spec.probabilistic, **params.get("probabilistic", {})}
    return reg.preset(name, seed=int(seed), **params)


def run_one(spec, algorithm, seed, rng=None):
    """One registration; failures are returned as rows, never raised."""
    row = {"algorithm": algorithm, "seed": seed, "status": "ok", "mean_dist": np.nan, "hausdorff": np.nan,
           "wall_time": np.nan, "iterations": 0, "error": ""}
    t0 = time.perf_counter()
    try:
        pair = make_pair(spec.base, spec.subdivisions, spec.deformation, spec.beta, spec.noise, spec.partiality,
                         spec.rotation_deg, spec.translation, spec.scale, spec.crop_direction, seed=seed)
        cfg = algorithm_config(spec, algorithm, seed)
        if cfg.mode == "probabilistic":
            result, _ = reg.register_probabilistic(pair.reference, pair.target, cfg, rng=rng)
        else:
            result = reg.register_deterministic(pair.reference, pair.target, cfg)
        deformed = result.deformed
        if len(pair.ground_truth) < pair.reference.n:
            keep = np.zeros(pair.reference.n, dtype=bool)
            keep[pair.ground_truth] = True
            deformed, _ = crop_mesh(deformed, keep)
        row["mean_dist"] = mean_surface_distance(deformed, pair.target)
        row["hausdorff"] = hausdorff_distance(deformed, pair.target)
        row["iterations"] = result.iterations
    except (GingrError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - t0
    return row


def run_benchmark(spec, threads=1, master_seed=0):
    """All (algorithm, seed) runs; rows come back in a fixed order.

    Each run gets its own RNG stream spawned from ``master_seed``, so results
    do not depend on ``threads``.
    """
    jobs = [(algo, seed) for algo in spec.algorithms for seed in spec.seeds]
    streams = np.random.SeedSequence(master_seed).spawn(len(jobs))
    args = [(a, s, np.random.default_rng(ss)) for (a, s), ss in zip(jobs, streams)]
    if threads <= 1:
        return [run_one(spec, *a) for a in args]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda a: run_one(spec, *a), args))


def aggregate(rows):
    out = []
    for algo in dict.fromkeys(r["algorithm"] for r in rows):
        mine = [r for r in rows if r["algorithm"] == algo]
        ok = [r for r in mine if r["status"] == "ok"]

        def stat(key, fn=np.mean):
            return float(fn([r[key] for r in ok])) if ok else np.nan

        out.append({"algorithm": algo, "runs": len(mine), "failed": len(mine) - len(ok),
                    "mean_dist": stat("mean_dist"), "mean_dist_std": stat("mean_dist", np.std),
                    "hausdorff": stat("hausdorff"), "wall_time": stat("wall_time"),
                    "iterations": stat("iterations")})
    return out


def write_csv(rows, columns, path, timing=True):
    """CSV with 9 significant digits; ``timing=False`` blanks wall times for byte-stable output."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            cells = []
            for c in columns:
                v = r[c]
                if c == "wall_time" and not timing:
                    cells.append("")
                elif isinstance(v, (float, np.floating)):
                    cells.append("" if np.isnan(v) else f"{float(v):.9g}")
                else:
                    cells.append(str(v))
            w.writerow(cells)


def spec_to_dict(spec):
    return asdict(spec)
