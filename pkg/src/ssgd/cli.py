"""Experiment runner: YAML configs, single runs, sweeps and theory reports.

    ssgd run config.yaml [--seed N] [--out DIR] [--deterministic]
    ssgd sweep config.yaml --grid algorithm.T=1,5,30 [--grid ...]
    ssgd constants config.yaml
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .algorithms import (
    RunTrace,
    ScheduleConfig,
    SsgdConfig,
    run_algorithm1,
    run_bsa,
    run_ssgd,
    run_stocbio,
    run_ttsa,
)
from .core import (
    BilevelError,
    DivergenceError,
    FullBatchStream,
    InvalidArgumentError,
    InvalidStateError,
    RngStream,
    UnsupportedProblemError,
)
from .estimators import EstimatorConfig
from .hyperclean import HypercleanOracle, generate_blobs
from .synthetic import SyntheticOracle, generate_dataset
from .theory import format_report, measure_profile, theorem1_params, theorem2_params

log = logging.getLogger("ssgd")

EXIT_IO = 4
PROBLEM_KINDS = ("synthetic", "hyperclean")
ALGORITHMS = ("ssgd", "stocbio", "bsa", "ttsa", "alg1")


class ConfigError(InvalidArgumentError):
    """Config validation failure; the message names the key and, if known, the line."""


@dataclass
class ProblemSpec:
    kind: str = "synthetic"
    data_seed: int = 0
    # synthetic
    w0: list = field(default_factory=lambda: [2.0, 5.0, 7.0])
    dim: int | None = None
    n_samples: int = 20000
    r: float = 0.5
    # hyperclean
    n_tr: int = 200
    n_val: int = 200
    n_test: int = 200
    d: int = 5
    C: int = 3
    corruption: float = 0.3
    c: float = 0.001
    separation: float = 1.5


@dataclass
class AlgorithmSpec:
    name: str = "ssgd"
    K: int = 1000
    T: int = 5
    J: int = 3
    alpha: float = 0.001
    beta: float = 0.1
    eta: float = 0.1
    batch: int = 5
    S: int | None = None
    D: int | None = None
    D_g: int | None = None
    D_f: int | None = None
    estimator: str = "sgd"
    warm_start: bool = False
    warm_start_y: bool = False
    d_alpha: float = 0.1
    d_beta: float = 0.1
    max_calls: int | None = None
    stop_grad_norm: float | None = None


@dataclass
class TheorySpec:
    domain_radius: float = 10.0
    rho2_scale: float = 1.0


@dataclass
class ExperimentConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    record_every: int = 1
    deterministic: bool = False
    workers: int = 1
    label: str | None = None

    def variant(self) -> str:
        if self.label:
            return self.label
        a = self.algorithm
        return f"alg1_{a.estimator}" if a.name == "alg1" else a.name


_SECTIONS = {"problem": ProblemSpec, "algorithm": AlgorithmSpec, "theory": TheorySpec}
_REQUIRED = {("problem", "kind"), ("algorithm", "name")}


# -- parsing ----------------------------------------------------------------------
def _line_map(node, prefix=()) -> dict:
    """Dotted key path -> 1-based line number, from a composed YAML node."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            out.update(_line_map(v, path))
    return out


def _where(lines, path) -> str:
    key = ".".join(path)
    line = lines.get(tuple(path))
    return f"line {line}: key '{key}'" if line else f"key '{key}'"


def _check_type(value, ftype: str, where: str):
    """Coerce a YAML scalar to the annotated field type or fail."""
    optional = "None" in ftype
    base = ftype.replace(" | None", "")
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: value is required")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if base == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def _build(cls, data: dict, lines: dict, prefix: tuple):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(lines, prefix)}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = prefix + (str(key),)
        if key not in known:
            raise ConfigError(f"{_where(lines, path)}: unknown key")
        kwargs[key] = _check_type(value, known[key].type, _where(lines, path))
    for sec, name in _REQUIRED:
        if prefix == (sec,) and name not in data:
            raise ConfigError(f"{_where(lines, prefix)}: missing required key '{sec}.{name}'")
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig, lines: dict) -> None:
    def fail(path, msg):
        raise ConfigError(f"{_where(lines, path)}: {msg}")

    p, a = cfg.problem, cfg.algorithm
    if p.kind not in PROBLEM_KINDS:
        fail(("problem", "kind"), f"must be one of {PROBLEM_KINDS}")
    if a.name not in ALGORITHMS:
        fail(("algorithm", "name"), f"must be one of {ALGORITHMS}")
    if a.estimator not in ("bp", "ns", "sgd"):
        fail(("algorithm", "estimator"), "must be one of bp, ns, sgd")
    for name in ("alpha", "beta", "eta", "d_alpha", "d_beta"):
        if not getattr(a, name) > 0:
            fail(("algorithm", name), f"{name} must be positive")
    for name in ("K", "T", "J", "batch", "S", "D", "D_g", "D_f", "max_calls"):
        val = getattr(a, name)
        if val is not None and val < 1:
            fail(("algorithm", name), f"{name} must be >= 1")
    if a.stop_grad_norm is not None and a.stop_grad_norm < 0:
        fail(("algorithm", "stop_grad_norm"), "must be nonnegative")
    if a.warm_start and a.estimator != "sgd":
        fail(("algorithm", "warm_start"), "only applies to the sgd estimator")
    if p.kind == "synthetic":
        if len(p.w0) < 2 or not all(isinstance(w, (int, float)) and not isinstance(w, bool) for w in p.w0):
            fail(("problem", "w0"), "must be a list of at least 2 numbers")
        if p.dim is not None and p.dim < len(p.w0):
            fail(("problem", "dim"), "must be >= len(w0)")
        if p.n_samples < 2:
            fail(("problem", "n_samples"), "must be >= 2")
        if not p.r > 0:
            fail(("problem", "r"), "must be positive")
    else:
        for name in ("n_tr", "n_val", "d", "C"):
            if getattr(p, name) < 1:
                fail(("problem", name), "must be >= 1")
        if p.n_test < 0:
            fail(("problem", "n_test"), "must be >= 0")
        if not 0 <= p.corruption <= 1:
            fail(("problem", "corruption"), "must lie in [0, 1]")
        if not p.c > 0:
            fail(("problem", "c"), "must be positive")
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                for s in cfg.seeds):
        fail(("seeds",), "must be a non-empty list of nonnegative integers")
    if cfg.record_every < 1:
        fail(("record_every",), "must be >= 1")
    if cfg.workers < 1:
        fail(("workers",), "must be >= 1")
    if not cfg.theory.domain_radius > 0:
        fail(("theory", "domain_radius"), "must be positive")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment document, applying defaults."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    lines = _line_map(node) if node is not None else {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    top = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top:
            raise ConfigError(f"{_where(lines, (str(key),))}: unknown key")
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, lines, (key,))
        else:
            kwargs[key] = _check_type(value, top[key].type, _where(lines, (key,)))
    for sec, name in _REQUIRED:
        if sec not in data:
            raise ConfigError(f"missing required key '{sec}.{name}'")
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg, lines)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def apply_override(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Return a validated copy with the dotted ``key`` set to ``value``."""
    doc = dataclasses.asdict(cfg)
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"key '{key}': unknown section '{part}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"key '{key}': unknown key")
    node[parts[-1]] = value
    return parse_config(yaml.safe_dump(doc, sort_keys=False))


# -- running ------------------------------------------------------------------------
def build_problem(spec: ProblemSpec):
    rng = RngStream(spec.data_seed, 0)
    if spec.kind == "synthetic":
        w0 = list(spec.w0)
        if spec.dim is not None:
            w0 += [w0[-1]] * (spec.dim - len(w0))
        return generate_dataset(rng, w0, n_samples=spec.n_samples, r=spec.r)
    return generate_blobs(rng, spec.n_tr, spec.n_val, spec.d, spec.C, spec.corruption,
                          n_test=spec.n_test, separation=spec.separation, c=spec.c)


def build_oracle(problem):
    if hasattr(problem, "n_classes"):
        return HypercleanOracle(problem)
    return SyntheticOracle(problem)


def run_single(cfg: ExperimentConfig, seed: int, problem=None) -> RunTrace:
    """One run of the configured algorithm; batches come from RngStream(seed, 1)."""
    problem = build_problem(cfg.problem) if problem is None else problem
    oracle = build_oracle(problem)
    rng = FullBatchStream() if cfg.deterministic else RngStream(seed, 1)
    a = cfg.algorithm
    stop = {"max_calls": a.max_calls, "stop_grad_norm": a.stop_grad_norm,
            "record_every": cfg.record_every, "label": cfg.variant()}
    batch = {k: a.batch if getattr(a, k) is None else getattr(a, k) for k in ("S", "D", "D_g", "D_f")}
    if a.name in ("ssgd", "stocbio"):
        sc = SsgdConfig(K=a.K, T=a.T, J=a.J, alpha=a.alpha, beta=a.beta, eta=a.eta, seed=seed, **batch)
        fn = run_ssgd if a.name == "ssgd" else run_stocbio
        return fn(oracle, sc, rng=rng, **stop)
    if a.name in ("bsa", "ttsa"):
        sched = ScheduleConfig(a.name, d_alpha=a.d_alpha, d_beta=a.d_beta, J=a.J, eta=a.eta,
                               batch=a.batch if a.S is None else a.S, seed=seed)
        fn = run_bsa if a.name == "bsa" else run_ttsa
        return fn(oracle, sched, a.K, rng=rng, **stop)
    est = EstimatorConfig(a.estimator, J=a.J, eta=a.eta, warm_start=a.warm_start,
                          D_f=batch["D_f"], D_g=batch["D_g"], D=batch["D"])
    return run_algorithm1(oracle, est, a.K, a.T, a.alpha, a.beta, rng=rng, S=batch["S"],
                          warm_start_y=a.warm_start_y, seed=seed, **stop)


def _run_job(job):
    cfg, seed, path = job
    t0 = time.perf_counter()
    try:
        trace = run_single(cfg, seed)
    except DivergenceError as exc:
        return {"variant": cfg.variant(), "seed": seed, "status": "diverged", "error": str(exc)}
    trace.write_csv(path)
    last = trace.rows[-1]
    return {"variant": cfg.variant(), "seed": seed, "status": "ok", "trace": str(path),
            "iterations": last.iter, "final_grad_norm": last.grad_norm, "final_phi": last.phi,
            "total_calls": last.total_calls, "gc_f": last.gc_f, "gc_g": last.gc_g,
            "jv_g": last.jv_g, "hv_g": last.hv_g, "wall_time_s": time.perf_counter() - t0}


SUMMARY_METRICS = ("final_grad_norm", "final_phi", "total_calls", "gc_f", "gc_g", "jv_g", "hv_g",
                   "wall_time_s")


def summarize(results: list[dict]) -> dict:
    """Per-variant mean/min/max of the final metrics over non-diverged seeds."""
    out = {}
    for res in sorted(results, key=lambda r: (r["variant"], r["seed"])):
        entry = out.setdefault(res["variant"], {"seeds": [], "diverged": {}, "metrics": {}})
        entry["seeds"].append(res["seed"])
        if res["status"] != "ok":
            entry["diverged"][str(res["seed"])] = res["error"]
    for variant, entry in out.items():
        ok = [r for r in results if r["variant"] == variant and r["status"] == "ok"]
        for m in SUMMARY_METRICS:
            if ok:
                vals = np.array([r[m] for r in ok], dtype=float)
                entry["metrics"][m] = {"mean": float(vals.mean()), "min": float(vals.min()),
                                       "max": float(vals.max())}
    return out


def run_experiment(cfg: ExperimentConfig, variants: list[ExperimentConfig] | None = None) -> list[Path]:
    """Run every (variant, seed); write one trace CSV each plus summary.json.

    Returns the written paths, traces first. Diverged runs leave no trace
    and are listed in the summary.
    """
    variants = variants or [cfg]
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    jobs = [(v, s, out / f"{v.variant()}_seed{s}.csv") for v in variants for s in v.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    for res in results:
        if res["status"] == "ok":
            log.info("%s seed %d: %d iterations, final ||grad phi|| %.4g",
                     res["variant"], res["seed"], res["iterations"], res["final_grad_norm"])
        else:
            log.warning("%s seed %d diverged: %s", res["variant"], res["seed"], res["error"])
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summarize(results), indent=2, sort_keys=True) + "\n")
    return [Path(r["trace"]) for r in results if r["status"] == "ok"] + [summary_path]


def grid_variants(cfg: ExperimentConfig, grid: list[str]) -> list[ExperimentConfig]:
    """Cartesian product of ``key=a,b,c`` overrides; labels encode the values."""
    axes = []
    for item in grid:
        if "=" not in item:
            raise ConfigError(f"grid entry '{item}' must look like key=a,b,c")
        key, values = item.split("=", 1)
        parsed = [yaml.safe_load(v) for v in values.split(",") if v.strip()]
        if not parsed:
            raise ConfigError(f"grid entry '{item}' has no values")
        axes.append([(key.strip(), v) for v in parsed])
    variants = []
    for combo in itertools.product(*axes):
        v = copy.deepcopy(cfg)
        for key, value in combo:
            v = apply_override(v, key, value)
        suffix = "_".join(f"{k.split('.')[-1]}={val}" for k, val in combo)
        v.label = f"{cfg.variant()}_{suffix}"
        variants.append(v)
    return variants


def constants_report(cfg: ExperimentConfig) -> str:
    if cfg.problem.kind != "synthetic":
        raise UnsupportedProblemError("constants are only available for the synthetic problem")
    problem = build_problem(cfg.problem)
    profile = measure_profile(problem, cfg.theory.domain_radius)
    params, notes = {}, []
    for name, fn in (("theorem1", lambda: theorem1_params(profile, J=cfg.algorithm.J,
                                                          rho2_scale=cfg.theory.rho2_scale)),
                     ("theorem2", lambda: theorem2_params(profile, rho2_scale=cfg.theory.rho2_scale))):
        try:
            params[name] = fn()
        except InvalidStateError as exc:
            notes.append(f"# {name}: not applicable ({exc})")
    return format_report(profile, params) + "".join(n + "\n" for n in notes)


# -- command line ------------------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssgd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true", help="full-batch mode")
        p.add_argument("--workers", type=int)
        if name == "sweep":
            p.add_argument("--grid", action="append", required=True, metavar="KEY=A,B,C")
    p = sub.add_parser("constants")
    p.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "constants":
            sys.stdout.write(constants_report(cfg))
            return 0
        if args.seed is not None:
            cfg = apply_override(cfg, "seeds", [args.seed])
        if args.out:
            cfg.out = args.out
        if args.deterministic:
            cfg.deterministic = True
        if args.workers:
            cfg.workers = args.workers
        variants = grid_variants(cfg, args.grid) if args.command == "sweep" else None
        paths = run_experiment(cfg, variants)
    except BilevelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in paths:
        print(path)
    summary = json.loads(paths[-1].read_text())
    if any(entry["diverged"] for entry in summary.values()):
        print("error: some runs diverged; see summary.json", file=sys.stderr)
        return DivergenceError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
