"""Command-line entry point: solve, simulate, certify, synthesize, compare.

Exit codes: 0 success, 1 configuration or validation error (no outputs
are written), 2 the solved state has no feasible control.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import math
import os
import platform
import sys

import numpy as np

from . import __version__, _jit
from .cert import SEGWAY_REGION, FeasibilityCertificate, sample_feasibility, uniform_states
from .config import ConfigError, RunConfig, check_section, load_config, section_error, section_value
from .model import SegwayAdditiveModel, SegwayMultiplicativeModel
from .outputs import OutputDir, write_csv, write_json
from .safety import SafetyIndexParams, TiltIndex
from .sim import SafeController, nominal_controller, probe_battery, rollout, safe_control
from .synthesis import DEFAULT_RANGES, SynthesisConfig, cma_es_synthesize

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INFEASIBLE = 2

log = logging.getLogger("mmrssa")


def _is_segway(model) -> bool:
    return isinstance(model, (SegwayAdditiveModel, SegwayMultiplicativeModel))


def _region(cfg: RunConfig, section: str):
    raw = section_value(cfg, section, "region", "array", None)
    if raw is None:
        if not _is_segway(cfg.model):
            raise section_error(cfg, section, "a non-Segway model needs an explicit 'region'")
        return SEGWAY_REGION
    if len(raw) != cfg.model.n or not all(isinstance(r, list) and len(r) == 2 for r in raw):
        raise section_error(cfg, f"{section}.region", f"expected {cfg.model.n} [low, high] pairs")
    region = tuple((float(a), float(b)) for a, b in raw)
    if any(a > b for a, b in region):
        raise section_error(cfg, f"{section}.region", "each pair needs low <= high")
    return region


def _state_names(model) -> list[str]:
    if _is_segway(model):
        return ["p", "tilt", "p_dot", "tilt_rate"]
    return [f"x{i}" for i in range(model.n)]


def _rollout_seeds(seed: int, count: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32).astype(np.int64)


def _standard_error(rate: float, n: int) -> float:
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / max(n, 1))


# ------------------------------------------------------------------ commands

def cmd_solve(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    check_section(cfg, "solve", ("state", "u_ref"))
    x = section_value(cfg, "solve", "state", "vector", None)
    if x is None:
        raise section_error(cfg, "solve", "missing required field 'state'")
    if x.shape != (cfg.model.n,):
        raise section_error(cfg, "solve.state", f"expected {cfg.model.n} entries")
    u_ref = section_value(cfg, "solve", "u_ref", "vector", None)
    if u_ref is None:
        u_ref = nominal_controller(x) if _is_segway(cfg.model) else np.zeros(cfg.model.m)
    elif u_ref.shape != (cfg.model.m,):
        raise section_error(cfg, "solve.u_ref", f"expected {cfg.model.m} entries")
    res = safe_control(x, u_ref, cfg.model, cfg.index, cfg.gamma, cfg.eps_f, cfg.solver, cfg.eps0,
                       cfg.bilevel)
    payload = {"state": x, "u_ref": u_ref, "solver": cfg.solver, "eps_f": cfg.eps_f,
               **res.to_dict()}
    write_json(out.path("result.json"), payload)
    return EXIT_OK if res.feasible else EXIT_INFEASIBLE


def cmd_simulate(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    from .fastsim import rollout_batch

    keys = ("rollouts", "T", "dt", "x0", "target_speed", "gain", "filtered", "trace")
    check_section(cfg, "simulate", keys)
    if not _is_segway(cfg.model):
        raise section_error(cfg, "model.kind", "simulation needs a Segway model")
    n = section_value(cfg, "simulate", "rollouts", "int", 100)
    T = section_value(cfg, "simulate", "T", "number", 10.0)
    dt = section_value(cfg, "simulate", "dt", "number", 0.01)
    x0 = section_value(cfg, "simulate", "x0", "vector", np.zeros(4))
    speed = section_value(cfg, "simulate", "target_speed", "number", 1.0)
    gain = section_value(cfg, "simulate", "gain", "number", 10.0)
    filtered = section_value(cfg, "simulate", "filtered", "bool", True)
    trace = section_value(cfg, "simulate", "trace", "bool", True)
    if n < 1 or not (T > 0 and dt > 0) or x0.shape != (4,):
        raise section_error(cfg, "simulate", "need rollouts >= 1, T > 0, dt > 0 and a 4-entry x0")
    seeds = _rollout_seeds(cfg.seed, n)
    batch = rollout_batch(cfg.model, cfg.index, seeds, x0, T, dt, cfg.gamma, cfg.eps_f, cfg.solver,
                          cfg.eps0, cfg.bilevel, speed, gain, filtered, threads=threads)
    write_csv(out.path("rollouts.csv"),
              ["seed", "steps", "max_tilt", "violations", "infeasible_steps", "terminated"],
              zip(batch.seeds, batch.steps, batch.max_tilt, batch.violations, batch.infeasible,
                  batch.terminated))
    total = int(batch.steps.sum())
    rate = batch.violation_rate
    summary = {"rollouts": n, "T": T, "dt": dt, "steps": total,
               "within_tilt_limit": int(np.sum(batch.max_tilt < 0.1)),
               "terminated": int(batch.terminated.sum()),
               "violation_rate": rate, "violation_rate_se": _standard_error(rate, total),
               "infeasible_rate": float(batch.infeasible.sum() / max(total, 1)),
               "max_tilt": float(batch.max_tilt.max())}
    write_json(out.path("summary.json"), summary)
    if trace:
        ctrl = SafeController(cfg.model, cfg.index, cfg.gamma, cfg.eps_f, cfg.solver, speed, gain)
        nominal = None
        if not filtered:
            ctrl, nominal = None, (lambda x: nominal_controller(x, speed, gain))
        rec = rollout(ctrl, x0, T, dt, np.random.default_rng(int(seeds[0])), cfg.model, cfg.index,
                      cfg.gamma, nominal)
        write_csv(out.path("trajectory.csv"),
                  ["t", "p", "tilt", "p_dot", "tilt_rate", "u", "phi", "slack", "status"], rec.rows())
    return EXIT_OK


def cmd_certify(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    keys = ("samples", "sampler", "z_target", "prior_alpha", "prior_beta", "region",
            "trajectory_controller")
    check_section(cfg, "certify", keys)
    n = section_value(cfg, "certify", "samples", "int", 100_000)
    sampler = section_value(cfg, "certify", "sampler", "str", "uniform")
    z = section_value(cfg, "certify", "z_target", "number", 0.9999)
    a = section_value(cfg, "certify", "prior_alpha", "number", 1.0)
    b = section_value(cfg, "certify", "prior_beta", "number", 1.0)
    ctrl = section_value(cfg, "certify", "trajectory_controller", "str", "nominal")
    if n < 1 or sampler not in ("uniform", "trajectory") or not 0 <= z <= 1 or a <= 0 or b <= 0:
        raise section_error(cfg, "certify", "need samples >= 1, a known sampler, z_target in [0, 1] "
                                            "and positive prior parameters")
    region = _region(cfg, "certify")
    res = sample_feasibility(cfg.model, cfg.index, n, cfg.seed, sampler, cfg.gamma, cfg.eps_f,
                             cfg.solver, region, ctrl, threads, cfg.bilevel)
    cert = FeasibilityCertificate(res.n_feasible, res.n_infeasible, a, b, z)
    write_json(out.path("certificate.json"),
               {**cert.to_dict(), "sampler": sampler, "solver": cfg.solver, "region": region,
                "safety_index": cfg.index.params.as_dict() if cfg.index.params else "phi0"})
    write_csv(out.path("samples.csv"), _state_names(cfg.model) + ["feasible"], res.rows())
    return EXIT_OK


def _ranges(cfg):
    raw = section_value(cfg, "synthesize", "ranges", "object", None)
    if raw is None:
        return DEFAULT_RANGES
    out = []
    for k, name in enumerate(("alpha", "k_v", "beta")):
        pair = raw.get(name, list(DEFAULT_RANGES[k]))
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(v, (int, float)) for v in pair) or not pair[0] < pair[1]):
            raise section_error(cfg, f"synthesize.ranges.{name}", "expected [low, high] with low < high")
        out.append((float(pair[0]), float(pair[1])))
    return tuple(out)


def cmd_synthesize(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    keys = ("population", "generations", "eval_samples", "ranges", "sampler", "sigma0", "z_target",
            "certificate_samples", "require_upright_safe", "trajectory_controller", "region", "start")
    check_section(cfg, "synthesize", keys)
    kw = {}
    for key, kind in (("population", "int"), ("generations", "int"), ("eval_samples", "int"),
                      ("sampler", "str"), ("sigma0", "number"), ("z_target", "number"),
                      ("require_upright_safe", "bool"), ("trajectory_controller", "str")):
        v = section_value(cfg, "synthesize", key, kind, None)
        if v is not None:
            kw[key] = v
    start = section_value(cfg, "synthesize", "start", "object", None)
    try:
        if start is not None:
            kw["start"] = SafetyIndexParams(**start)
        scfg = SynthesisConfig(ranges=_ranges(cfg), seed=cfg.seed, region=_region(cfg, "synthesize"), **kw)
    except (TypeError, ValueError) as exc:
        raise section_error(cfg, "synthesize", str(exc)) from None
    n_cert = section_value(cfg, "synthesize", "certificate_samples", "int", 100_000)
    result = cma_es_synthesize(scfg, cfg.model, cfg.solver, cfg.gamma, cfg.eps_f, threads)
    # fresh certificate sample, disjoint seed from the search sample
    fresh = sample_feasibility(cfg.model, TiltIndex(result.best), n_cert, cfg.seed + 1, scfg.sampler,
                               cfg.gamma, cfg.eps_f, cfg.solver, scfg.region,
                               scfg.trajectory_controller, threads, cfg.bilevel)
    cert = fresh.certificate(scfg.z_target)
    write_json(out.path("best_params.json"),
               {**result.to_dict(), "solver": cfg.solver, "sampler": scfg.sampler,
                "ranges": scfg.ranges, "certificate": cert.to_dict()})
    header = ["generation", "best_fitness", "best_feasible_fraction", "best_n_infeasible",
              "mean_fitness", "mean_feasible_fraction", "alpha", "k_v", "beta"]
    write_csv(out.path("generations.csv"), header, ([row[h] for h in header] for row in result.history))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    check_section(cfg, "compare", ("probes", "n_points", "states", "region"))
    n_points = section_value(cfg, "compare", "n_points", "int", 10_000)
    states = section_value(cfg, "compare", "states", "matrix", None)
    if states is not None:
        from .sim import compare_feasible_sets

        if states.shape[1] != cfg.model.n:
            raise section_error(cfg, "compare.states", f"each state needs {cfg.model.n} entries")
        reports = [compare_feasible_sets(x, cfg.model, cfg.index, cfg.gamma, cfg.eps_f, cfg.solver,
                                         n_points=n_points) for x in states]
    else:
        probes = section_value(cfg, "compare", "probes", "int", 50)
        region = _region(cfg, "compare")
        reports = probe_battery(cfg.model, cfg.index, probes, np.random.default_rng(cfg.seed),
                                lambda r: uniform_states(1, r, region)[0], cfg.gamma, cfg.eps_f,
                                cfg.solver, n_points)
    header = _state_names(cfg.model) + ["multi_modal_interval", "uni_modal_interval",
                                                       "rhs_multi", "rhs_uni"]
    write_csv(out.path("compare.csv"), header, (r.to_row() for r in reports))
    mm = np.array([r.multi_modal_interval for r in reports])
    uu = np.array([r.uni_modal_interval for r in reports])
    write_json(out.path("summary.json"),
               {"probes": len(reports), "multi_ge_uni": int(np.sum(mm >= uu)),
                "multi_gt_uni": int(np.sum(mm > uu)), "solver": cfg.solver,
                "control_box": [cfg.model.lower, cfg.model.upper]})
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "certify": cmd_certify,
            "synthesize": cmd_synthesize, "compare": cmd_compare}


# ---------------------------------------------------------------------- main

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    raw = json.loads(json.dumps(cfg.raw))
    changes = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative", source="arguments")
        raw["seed"] = changes["seed"] = args.seed
    if args.eps_f is not None:
        if not 0.0 < args.eps_f < 1.0:
            raise ConfigError("--eps-f must lie in (0, 1)", source="arguments")
        raw["eps_f"] = changes["eps_f"] = args.eps_f
    if args.solver is not None:
        raw.setdefault("solver", {})["default"] = changes["solver"] = args.solver
    return dataclasses.replace(cfg, raw=raw, **changes)


def _manifest(cfg: RunConfig, command: str, threads: int, files, code: int):
    import numba

    return {"command": command, "config": cfg.source, "config_sha256": cfg.digest(),
            "seed": cfg.seed, "solver": cfg.solver, "eps_f": cfg.eps_f, "threads": threads,
            "exit_code": code, "outputs": sorted(files),
            "versions": {"mmrssa": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "numba": numba.__version__},
            "jit": _jit.HAS_NUMBA,
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmrssa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", ""))
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--solver", choices=("additive", "multiplicative"))
        p.add_argument("--eps-f", type=float, dest="eps_f")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = max(1, args.threads)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        with OutputDir(args.out) as out:
            code = COMMANDS[args.command](cfg, out, threads)
            write_json(out.path("manifest.json"),
                       _manifest(cfg, args.command, threads, out.files, code))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return code


if __name__ == "__main__":
    sys.exit(main())
