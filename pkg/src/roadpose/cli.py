"""Command-line front end: localize frames, run the benchmark, self-test.

Settings are layered as built-in defaults < ``--config`` file < environment
(``ROADPOSE_*``, mirroring the flags) < command-line flags.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import formats
from . import multiview as mv
from .errors import FormatError, RoadposeError
from .gradcheck import check_gradients
from .pipeline import PipelineConfig, ate, localize_frame
from .residuals import EnergyWeights
from .shape_model import ShapePrior, load_prior, synthetic_prior
from .solver import SolverConfig
from .synthbench import (NoiseSpec, SceneSpec, RoadProfile, VehicleSpec, default_suite, dumps_report, flat_suite,
                         format_table, generate, report_dict, run_benchmark, sloped_suite, summarize,
                         truth_residuals)

log = logging.getLogger("roadpose")

ENV_PREFIX = "ROADPOSE_"
EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2
SUITES = {"default": default_suite, "sloped": sloped_suite, "flat": flat_suite}
ZERO_AT_TRUTH = ("reprojection", "ground", "normal", "base", "consistency", "regularizer", "plane_prior")


def example_frame_path():
    return Path(str(resources.files("roadpose") / "data" / "example" / "frame.json"))


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_list(name):
    v = _env(name)
    return v.split(os.pathsep) if v else None


def build_parser():
    p = argparse.ArgumentParser(prog="roadpose", description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=("localize", "bench", "selftest"), default=_env("MODE", "localize"))
    p.add_argument("--config", default=_env("CONFIG"), help="JSON config with weights/solver/pipeline sections")
    p.add_argument("--prior", default=_env("PRIOR"), help="shape prior file (default: built-in synthetic prior)")
    p.add_argument("--frames", nargs="+", default=_env_list("FRAMES"), help="frame input files")
    p.add_argument("--corr", nargs="+", default=_env_list("CORR"), help="extra correspondence files")
    p.add_argument("--truth", nargs="+", default=_env_list("TRUTH"),
                   help="result files whose translations serve as ground truth")
    p.add_argument("--example", action="store_true", default=bool(_env("EXAMPLE")),
                   help="localize the bundled example scene")
    p.add_argument("--out", default=_env("OUT", "roadpose_out"))
    p.add_argument("--seed", type=int, default=int(_env("SEED", 0)))
    p.add_argument("--seeds", type=int, default=None if _env("SEEDS") is None else int(_env("SEEDS")),
                   help="seeds per suite cell (bench)")
    p.add_argument("--suite", default=_env("SUITE", "default"), help="default | sloped | flat | suite file")
    p.add_argument("--jobs", type=int, default=int(_env("JOBS", 1)))
    p.add_argument("--weights", nargs="+", metavar="KEY=VAL",
                   default=_env("WEIGHTS").split(",") if _env("WEIGHTS") else None)
    p.add_argument("--coplanar-baseline", action="store_true", default=bool(_env("COPLANAR_BASELINE")),
                   help="freeze every plane at the coplanar assumption (ablation)")
    p.add_argument("--configs", type=int, default=100, help="random configurations per term (selftest)")
    p.add_argument("--break-jacobian", default=_env("BREAK_JACOBIAN"), help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _typed(cls, kv, where):
    """Coerce string/JSON values to the dataclass field types of ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in kv.items():
        if k not in types:
            raise ValueError(f"{where}: unknown key {k!r}")
        t = str(types[k])
        if isinstance(v, str):
            if "bool" in t:
                v = v.lower() in ("1", "true", "yes")
            elif "int" in t:
                v = int(v)
            elif "tuple" in t:
                v = tuple(float(x) for x in v.split(":"))
            elif "float" in t:
                v = float(v)
        elif isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def parse_weights(items):
    kv = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"--weights expects KEY=VAL, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def resolve_config(args) -> PipelineConfig:
    file_cfg = formats.load_config(args.config) if args.config else {}
    w = dict(file_cfg.get("weights", {}))
    w.update(parse_weights(args.weights))
    weights = EnergyWeights(**_typed(EnergyWeights, w, "weights"))
    solver = SolverConfig(**_typed(SolverConfig, file_cfg.get("solver", {}), "solver"))
    pipe = _typed(PipelineConfig, file_cfg.get("pipeline", {}), "pipeline")
    for k in ("weights", "solver"):
        if k in pipe:
            raise ValueError(f"pipeline: {k!r} belongs in its own section")
    pipe.setdefault("seed", args.seed)
    if args.coplanar_baseline:
        pipe["coplanar_baseline"] = True
    return PipelineConfig(weights=weights, solver=solver, **pipe)


def _prior(args) -> ShapePrior:
    return load_prior(args.prior) if args.prior else synthetic_prior()


def _localize_task(task):
    frame, prior, cfg = task
    return localize_frame(frame, prior, cfg)


def cmd_localize(args, cfg: PipelineConfig) -> int:
    prior = _prior(args)
    paths = list(args.frames or [])
    if args.example:
        paths.append(example_frame_path())
    if not paths:
        raise ValueError("localize needs --frames or --example")
    extra = [mv.load_correspondences(p) for p in args.corr or ()]
    frames = [formats.load_frame(p, extra) for p in paths]
    truth = {}
    for p in args.truth or ():
        d = formats.load_result(p)
        truth[d["frame_id"]] = formats.translations(d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(f, prior, cfg) for f in frames]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_localize_task, tasks))
    else:
        results = [_localize_task(t) for t in tasks]
    partial = False
    for res in results:
        obj = f"{res.frame_id}.obj"
        d = formats.result_to_dict(res, obj)
        if res.frame_id in truth:
            e = ate(res, truth[res.frame_id])
            d["ate"] = {"per_vehicle": e.per_vehicle, "mean": e.mean, "std": e.std}
        (out / f"{res.frame_id}.json").write_text(formats._dumps(d))
        (out / obj).write_text(formats.dumps_wireframe(res, prior.edges))
        for vid, reason in res.unlocalized:
            print(f"{res.frame_id}: vehicle {vid} not localized: {reason}", file=sys.stderr)
            partial = True
        print(f"{res.frame_id}: {len(res.vehicles)} localized, {len(res.unlocalized)} failed")
    return EXIT_PARTIAL if partial else EXIT_OK


def _suite(args):
    if args.suite in SUITES:
        fn = SUITES[args.suite]
        suite = fn(seeds=args.seeds) if args.seeds is not None else fn()
        if args.seed:
            from dataclasses import replace
            suite = [replace(s, seed=s.seed + 1000003 * args.seed) for s in suite]
        return suite
    return formats.load_suite(args.suite, seeds=args.seeds, base_seed=args.seed or None)


def cmd_bench(args, cfg: PipelineConfig) -> int:
    prior = _prior(args)
    suite = _suite(args)
    rows = run_benchmark(suite, cfg, jobs=args.jobs, prior=prior)
    table = summarize(rows)
    meta = {"suite": str(args.suite), "scenes": len(suite), "seed": args.seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(dumps_report(report_dict(rows, table, meta)))
    text = format_table(table)
    (out / "bench.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def check_round_trip(prior=None):
    """Zero-noise default suite: terms that vanish at the truth are below 1e-10."""
    worst = 0.0
    for spec in default_suite(seeds=1):
        r = truth_residuals(generate(spec, prior), prior)
        worst = max([worst] + [r[t] for t in ZERO_AT_TRUTH if t in r])
    return worst < 1e-10, f"max residual {worst:.2e}"


def check_flat_smoke(prior=None):
    spec = SceneSpec(RoadProfile("flat"), (VehicleSpec(20.0, 0.0, 0.2),), NoiseSpec(), seed=7, scene_id="flat-smoke")
    scene = generate(spec, prior)
    res = localize_frame(scene.frame, prior or synthetic_prior(), PipelineConfig())
    if res.unlocalized:
        return False, f"unlocalized: {res.unlocalized}"
    e = ate(res, scene.truth.translations()).mean
    return e < 0.05, f"ATE {e:.2e} m"


def cmd_selftest(args, cfg: PipelineConfig) -> int:
    prior = _prior(args)
    ok_all = True
    t0 = time.perf_counter()
    for c in check_gradients(args.configs, seed=args.seed, prior=prior, break_term=args.break_jacobian):
        ok = c.ok()
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'} gradient[{c.term}]: max rel err {c.max_error:.2e} "
              f"over {c.configurations} configurations")
    for name, fn in (("round-trip", check_round_trip), ("flat-smoke", check_flat_smoke)):
        ok, detail = fn(prior)
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"selftest {'passed' if ok_all else 'FAILED'} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if ok_all else EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = {"localize": cmd_localize, "bench": cmd_bench, "selftest": cmd_selftest}[args.mode]
        return cmd(args, cfg)
    except (RoadposeError, ValueError, OSError) as e:
        print(f"roadpose: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
