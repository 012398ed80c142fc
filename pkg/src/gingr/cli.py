"""Command-line interface.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical failure.
"""

import argparse
import csv
import json
import os
import sys
from importlib import resources

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import benchmark as bench
from . import gpmm
from . import registration as reg
from .exceptions import ConfigError, GingrError, NumericalError, ValidationError
from .meshio import (
    load_geometry,
    load_landmarks,
    save_chain,
    save_geometry,
    write_trace_csv,
)
from .synthetic import BASES, make_pair

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(ConfigError):
    pass


def load_schema(name="config"):
    text = resources.files("gingr").joinpath("schema", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def parse_override(item):
    """``a.b.c=value``; the value is parsed as JSON, falling back to a string."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value", field="--set")
    key, raw = item.split("=", 1)
    if not key or any(not part for part in key.split(".")):
        raise UsageError(f"override {item!r} has an empty key", field="--set")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data, overrides):
    for item in overrides or ():
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise UsageError(f"cannot set {'.'.join(path)}: {part} is not an object", field=".".join(path))
            node = child
        node[path[-1]] = value
    return data


def validate_document(data, schema_name):
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    error = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if error is not None:
        where = ".".join(str(p) for p in error.absolute_path) or "config"
        raise ConfigError(error.message, field=where)
    return data


def read_config(path, overrides=(), schema_name="config"):
    """Load a JSON document, apply ``--set`` overrides and validate it."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", field=str(path)) from exc
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", field=str(path)) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", field=str(path))
    apply_overrides(data, overrides)
    return validate_document(data, schema_name)


def _resolve(base_dir, value):
    return value if value is None or os.path.isabs(value) else os.path.join(base_dir, value)


class Run:
    """A validated run configuration with resolved paths."""

    FILE_KEYS = ("reference", "target", "reference_landmarks", "target_landmarks", "model", "output_dir")

    def __init__(self, path, overrides=(), seed=None, out=None):
        data = read_config(path, overrides)
        base = os.path.dirname(os.path.abspath(path))
        self.files = {k: _resolve(base, data.pop(k, None)) for k in self.FILE_KEYS}
        data.pop("version", None)
        self.levels = data.pop("levels", None)
        if seed is not None:
            data["seed"] = seed
        kernel = data.get("prior", {}).get("kernel")
        if kernel is not None:
            data["prior"]["kernel"] = self._resolve_kernel(base, kernel)
        self.config = reg.config_from_dict(data)
        self.out = out or self.files["output_dir"] or "."

    def _resolve_kernel(self, base, spec):
        spec = dict(spec)
        if "training_dir" in spec:
            spec["training_dir"] = _resolve(base, spec["training_dir"])
        if "terms" in spec:
            spec["terms"] = [dict(t, kernel=self._resolve_kernel(base, t["kernel"])) for t in spec["terms"]]
        return spec

    def reference(self):
        return load_geometry(self.files["reference"])

    def target(self):
        if self.files["target"] is None:
            raise ConfigError("is required for this command", field="target")
        return load_geometry(self.files["target"])

    def model(self, reference):
        if self.files["model"]:
            gp = gpmm.load_model(self.files["model"])
            if gp.n != reference.n:
                raise ValidationError(f"model has {gp.n} vertices, reference has {reference.n}")
            kernel = None
            if self.config.estimator == "icp_a":
                kernel = reg.build_kernel(self.config.prior.kernel, reference)
            return kernel, gp
        return reg.build_model(reference, self.config)

    def landmarks(self):
        r, t = self.files["reference_landmarks"], self.files["target_landmarks"]
        if (r is None) != (t is None):
            raise ConfigError("reference_landmarks and target_landmarks go together", field="reference_landmarks")
        return None if r is None else (load_landmarks(r), load_landmarks(t))


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def _transform_dict(T):
    return {"scale": T.scale, "rotation": T.rotation.tolist(), "translation": T.translation.tolist()}


# --------------------------------------------------------------------------
# commands


def cmd_register(args):
    run = Run(args.config, args.set, args.seed, args.out)
    cfg = run.config
    lms = run.landmarks()
    if lms is not None:
        cfg.landmarks = lms
    reference, target = run.reference(), run.target()
    kernel, gp = run.model(reference)
    out = _outdir(run.out)
    chain = None
    if cfg.mode == "probabilistic":
        if run.levels:
            raise ConfigError("multi-resolution levels apply to deterministic mode only", field="levels")
        result, chain = reg.register_probabilistic(reference, target, cfg, gp=gp, kernel=kernel)
    elif run.levels:
        result = reg.register_multires(reference, target, cfg, run.levels, gp=gp, kernel=kernel)
    else:
        result = reg.register_deterministic(reference, target, cfg, gp=gp, kernel=kernel)
    save_geometry(result.deformed, os.path.join(out, "registered.ply"))
    write_trace_csv(result.trace, os.path.join(out, "trace.csv"))
    _write_json({"alpha": result.alpha.tolist(), "transform": _transform_dict(result.transform),
                 "iterations": result.iterations, "converged": result.converged},
                os.path.join(out, "result.json"))
    _write_json(reg.config_to_dict(cfg), os.path.join(out, "config.effective.json"))
    if chain is not None:
        save_chain(chain, os.path.join(out, "chain.npz"))
        if len(chain):
            var = reg.posterior_uncertainty(chain, result.gp)
            save_geometry(result.deformed, os.path.join(out, "uncertainty.ply"),
                          attributes={"uncertainty": np.sqrt(var)})
        else:
            print("retained chain is empty; no uncertainty written", file=sys.stderr)
    return EXIT_OK


def cmd_sample_prior(args):
    run = Run(args.config, args.set, args.seed, args.out)
    if args.count < 1:
        raise ConfigError("must be >= 1", field="--count")
    reference = run.reference()
    _, gp = run.model(reference)
    out = _outdir(run.out)
    rng = np.random.default_rng(run.config.seed)
    width = max(3, len(str(args.count - 1)))
    for i in range(args.count):
        alpha = np.zeros(gp.rank) if args.zero else gpmm.sample_prior(gp, rng)
        shape = reference.with_points(gpmm.deformed_points(gp, alpha))
        save_geometry(shape, os.path.join(out, f"sample_{i:0{width}d}.ply"))
    if args.save_model:
        gpmm.save_model(gp, os.path.join(out, "model.npz"))
    return EXIT_OK


def kernel_map_values(kernel, reference, vertex):
    """Per-vertex Frobenius norm of k(landmark, x), normalized to 1 at the landmark."""
    if kernel.is_coordinate_based:
        pts = reference.points
        km = kernel.gram(pts[vertex:vertex + 1], pts)
    else:
        km = kernel.gram(np.array([vertex]), np.arange(reference.n))
    vals = km.values
    d = reference.d
    if km.scalar:
        norms = np.abs(vals[0]) * np.sqrt(d)
    else:
        blocks = vals.reshape(d, reference.n, d)
        norms = np.sqrt((blocks**2).sum(axis=(0, 2)))
    if norms[vertex] <= 0:
        raise NumericalError("kernel vanishes at the landmark; cannot normalize")
    return norms / norms[vertex]


def cmd_kernel_map(args):
    run = Run(args.config, args.set, args.seed, args.out)
    reference = run.reference()
    if args.vertex is not None:
        if not 0 <= args.vertex < reference.n:
            raise ConfigError(f"vertex {args.vertex} out of range [0, {reference.n})", field="--vertex")
        vertex = args.vertex
    else:
        path = args.landmarks or run.files["reference_landmarks"]
        if path is None:
            raise ConfigError("needs --landmarks or reference_landmarks in the config", field="--landmark")
        by_id = {lm.id: lm for lm in load_landmarks(path)}
        if args.landmark not in by_id:
            raise ConfigError(f"unknown landmark {args.landmark!r}; known: {sorted(by_id)}", field="--landmark")
        vertex = int(np.argmin(np.linalg.norm(reference.points - by_id[args.landmark].point, axis=1)))
    kernel = reg.build_kernel(run.config.prior.kernel, reference)
    values = kernel_map_values(kernel, reference, vertex)
    out = _outdir(run.out)
    save_geometry(reference, os.path.join(out, "kernel_map.ply"), attributes={"correlation": values})
    return EXIT_OK


def cmd_benchmark(args):
    data = read_config(args.spec, args.set, schema_name="benchmark")
    data.pop("version", None)
    spec = bench.BenchmarkSpec.from_dict(data)
    out = _outdir(args.out or ".")
    rows = bench.run_benchmark(spec, threads=args.threads, master_seed=args.seed or 0)
    bench.write_csv(rows, bench.RUN_COLUMNS, os.path.join(out, "runs.csv"), timing=not args.no_timing)
    bench.write_csv(bench.aggregate(rows), bench.AGG_COLUMNS, os.path.join(out, "aggregate.csv"),
                    timing=not args.no_timing)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"run {r['algorithm']} seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_make_synthetic(args):
    if args.base not in BASES:
        raise ConfigError(f"must be one of {BASES}", field="--base")
    if not 0 <= args.subdivisions <= 5:
        raise ConfigError("must be in [0, 5]", field="--subdivisions")
    for name in ("deformation", "noise"):
        if getattr(args, name) < 0:
            raise ConfigError("must be >= 0", field=f"--{name}")
    if not 0 <= args.partiality < 1:
        raise ConfigError("must be in [0, 1)", field="--partiality")
    if args.scale <= 0 or args.beta <= 0:
        raise ConfigError("must be > 0", field="--scale" if args.scale <= 0 else "--beta")
    seed = args.seed if args.seed is not None else 0
    pair = make_pair(args.base, args.subdivisions, args.deformation, args.beta, args.noise, args.partiality,
                     args.rotation_deg, tuple(args.translation), args.scale, seed=seed)
    out = _outdir(args.out or ".")
    save_geometry(pair.reference, os.path.join(out, "reference.ply"))
    save_geometry(pair.target, os.path.join(out, "target.ply"))
    with open(os.path.join(out, "ground_truth.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("target_index", "reference_index"))
        w.writerows(enumerate(pair.ground_truth.tolist()))
    _write_json({"transform": _transform_dict(pair.transform),
                 "parameters": {k: getattr(args, k) for k in ("base", "subdivisions", "deformation", "beta",
                                                               "noise", "partiality", "rotation_deg",
                                                               "translation", "scale")} | {"seed": seed}},
                os.path.join(out, "transform.json"))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _global_flags(parser, default=None):
    # subcommands repeat the flags with suppressed defaults so they never mask a value given earlier
    def d(value):
        return argparse.SUPPRESS if default is argparse.SUPPRESS else value

    parser.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=d(1), help="worker / BLAS threads")
    parser.add_argument("--out", default=d(None), help="output directory")
    return parser


def build_parser():
    common = _global_flags(argparse.ArgumentParser(add_help=False), argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="gingr",
                                     description="Gaussian-process non-rigid registration of shapes.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted key, JSON value)")
        return p

    with_config(sub.add_parser("register", parents=[common], help="register reference onto target"))
    p = with_config(sub.add_parser("sample-prior", parents=[common], help="write random prior shapes"))
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--zero", action="store_true", help="clamp coefficients to 0 (mean shape)")
    p.add_argument("--save-model", action="store_true", help="also write the low-rank model")
    p = with_config(sub.add_parser("kernel-map", parents=[common], help="kernel correlation to a landmark"))
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--landmark", help="landmark id")
    group.add_argument("--vertex", type=int, help="reference vertex index")
    p.add_argument("--landmarks", help="landmark JSON (defaults to the config's reference_landmarks)")
    p = sub.add_parser("benchmark", parents=[common], help="run the synthetic benchmark")
    p.add_argument("spec", help="JSON benchmark specification")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--no-timing", action="store_true", help="leave wall times blank (byte-stable CSV)")
    p = sub.add_parser("make-synthetic", parents=[common], help="generate a synthetic pair")
    p.add_argument("--base", default="sphere", help=f"one of {BASES}")
    p.add_argument("--subdivisions", type=int, default=3)
    p.add_argument("--deformation", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--partiality", type=float, default=0.0)
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--translation", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--scale", type=float, default=1.0)
    return parser


COMMANDS = {
    "register": cmd_register,
    "sample-prior": cmd_sample_prior,
    "kernel-map": cmd_kernel_map,
    "benchmark": cmd_benchmark,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except reg.RegistrationError as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        if exc.partial is not None:
            out = _outdir(args.out or ".")
            write_trace_csv(exc.partial.trace, os.path.join(out, "trace.partial.csv"))
        return EXIT_CONFIG if isinstance(exc.cause, ValidationError) else EXIT_NUMERIC
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GingrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
