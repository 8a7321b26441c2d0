"""Experiment runner: single runs, sweeps and figure recipes.

Outputs are CSV and JSON only.  ``DUPLEXSIM_OUT`` overrides ``--out``.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import metrics
from .cost import edap_csv, edap_sweep
from .errors import CapacityExceeded, ConfigError, DuplexSimError, InvalidArgument, InvariantViolation
from .hardware import load_system
from .invariants import check_trace
from .model import load_model
from .sched import MODES, Engine, default_system_for_mode, gen_workload
from .sched.engine import DEFAULT_SYSTEM

log = logging.getLogger("duplexsim")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


@dataclass
class ExperimentSpec:
    model: str = "mixtral"
    system: str | None = None          # None: default system of each mode
    modes: list = field(default_factory=lambda: ["duplex"])
    l_in: list = field(default_factory=lambda: [2048])
    l_out: list = field(default_factory=lambda: [1024])
    batch: list = field(default_factory=lambda: [64])
    qps: float | None = None
    n_requests: int = 100
    seeds: list = field(default_factory=lambda: [0])
    out: Path = Path("out")
    emit_trace: bool = False
    emit_placement: bool = False
    workers: int = 1
    cv: float = 0.25

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("mode", "at least one mode is required")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError("mode", f"{m!r} is not one of {', '.join(MODES)}")
        for name in ("l_in", "l_out", "batch"):
            vals = getattr(self, name)
            if not vals:
                raise ConfigError(name, "range must be non-empty")
            if min(vals) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.n_requests < 0:
            raise ConfigError("requests", "must be >= 0")
        if self.qps is not None and self.qps <= 0:
            raise ConfigError("qps", "must be > 0")

    def jobs(self) -> list[tuple]:
        """Every (mode, l_in, l_out, batch, seed) combination in key order."""
        return list(itertools.product(self.modes, self.l_in, self.l_out, self.batch, self.seeds))


@dataclass
class RunResult:
    key: dict
    latency: list
    throughput: dict
    energy: list
    roofline: list
    trace_lines: list | None = None
    placement: dict | None = None


def run_one(spec: ExperimentSpec, job: tuple, check: bool = True) -> RunResult:
    mode, l_in, l_out, batch, seed = job
    model = load_model(spec.model)
    if spec.system is None:
        system = default_system_for_mode(mode, model, batch)
    else:
        system = load_system(spec.system, model, batch).with_batch(batch)
    wl = gen_workload(seed, spec.n_requests, l_in, l_out, spec.cv, spec.qps)
    engine = Engine(model, system, mode, seed)
    trace = engine.run(wl)
    if check:
        check_trace(trace)
    key = {"mode": mode, "model": model.name, "l_in": l_in, "l_out": l_out, "batch": batch,
           "seed": seed}
    empty = trace.empty
    return RunResult(
        key=key,
        latency=[] if empty else metrics.latency_rows(trace, key),
        throughput={} if empty else metrics.throughput_row(trace, key),
        energy=metrics.energy_rows(trace, key),
        roofline=[{**key, **r} for r in metrics.roofline_points(trace)],
        trace_lines=list(trace.iter_jsonl()) if spec.emit_trace else None,
        placement=engine.placement.to_dict() if spec.emit_placement else None,
    )


def _run_job(args):
    spec, job = args
    return run_one(spec, job)


def execute(spec: ExperimentSpec) -> list[RunResult]:
    """Run every job; results come back in job order whatever the worker count."""
    jobs = spec.jobs()
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            return list(pool.map(_run_job, [(spec, j) for j in jobs]))
    return [run_one(spec, j) for j in jobs]


def _tag(key: dict) -> str:
    return f"{key['mode']}_in{key['l_in']}_out{key['l_out']}_b{key['batch']}_s{key['seed']}"


def write_reports(spec: ExperimentSpec, results: list[RunResult]) -> None:
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    metrics.to_csv([r for res in results for r in res.latency], metrics.LATENCY_COLUMNS,
                   out / "latency.csv", header=metrics.PERCENTILE_NOTE)
    metrics.to_csv([res.throughput for res in results if res.throughput],
                   metrics.THROUGHPUT_COLUMNS, out / "throughput.csv")
    metrics.to_csv([r for res in results for r in res.energy], metrics.ENERGY_COLUMNS,
                   out / "energy.csv")
    single = len(results) == 1
    for res in results:
        if res.trace_lines is not None:
            name = "trace.jsonl" if single else f"trace_{_tag(res.key)}.jsonl"
            (out / name).write_text("".join(line + "\n" for line in res.trace_lines))
        if res.placement is not None:
            name = "placement.json" if single else f"placement_{_tag(res.key)}.json"
            (out / name).write_text(json.dumps(res.placement, indent=2, sort_keys=True))


def sweep_rows(results: list[RunResult], baseline: str | None) -> list[dict]:
    """Throughput per cell, normalised to ``baseline`` at the same cell when present."""
    ref = {}
    if baseline:
        for res in results:
            if res.key["mode"] == baseline and res.throughput:
                k = (res.key["l_in"], res.key["l_out"], res.key["batch"], res.key["seed"])
                ref[k] = res.throughput["throughput"]
    rows = []
    for res in results:
        if not res.throughput:
            continue
        k = (res.key["l_in"], res.key["l_out"], res.key["batch"], res.key["seed"])
        tput = res.throughput["throughput"]
        rows.append({**res.key, "throughput": tput,
                     "normalized": tput / ref[k] if k in ref else ""})
    return rows


SWEEP_COLUMNS = ("mode", "model", "l_in", "l_out", "batch", "seed", "throughput", "normalized")

RECIPES = {
    # reduced throughput grid over lengths and batch sizes
    "throughput_grid": {"l_in": [256, 2048], "l_out": [256, 1024], "batch": [32, 64],
             "modes": ["gpu_baseline", "duplex", "duplex_pe", "duplex_pe_et"], "n_requests": 48},
}


def cmd_run(spec: ExperimentSpec) -> int:
    results = execute(spec)
    write_reports(spec, results)
    for res in results:
        if res.throughput:
            log.info("%s: %.1f tok/s", _tag(res.key), res.throughput["throughput"])
    return EXIT_OK


def cmd_sweep(spec: ExperimentSpec, baseline: str | None = "gpu_baseline") -> int:
    if baseline and baseline not in spec.modes:
        spec.modes = [baseline] + list(spec.modes)
    results = execute(spec)
    write_reports(spec, results)
    metrics.to_csv(sweep_rows(results, baseline), SWEEP_COLUMNS, spec.out / "sweep.csv")
    return EXIT_OK


FIGURES = ("stage_ratio", "roofline", "edap", "throughput", "latency")


def cmd_figures(name: str, spec: ExperimentSpec) -> int:
    if name not in FIGURES:
        raise InvalidArgument(f"unknown figure {name!r}; expected one of {', '.join(FIGURES)}")
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    if name == "edap":
        edap_csv(edap_sweep([1, 2, 4, 8, 16, 32]), out / "edap.csv")
        return EXIT_OK
    if name == "stage_ratio":
        rows = []
        for l_in, l_out in itertools.product([256, 1024, 2048], [256, 1024]):
            s = ExperimentSpec(model=spec.model, modes=["gpu_baseline"], l_in=[l_in], l_out=[l_out],
                               batch=spec.batch, n_requests=spec.n_requests, seeds=spec.seeds[:1])
            for res in execute(s):
                rows.append({**res.key, "stage_ratio": res.throughput["stage_ratio"]})
        metrics.to_csv(rows, ("model", "l_in", "l_out", "batch", "seed", "stage_ratio"),
                       out / "stage_ratio.csv")
        return EXIT_OK
    if name == "roofline":
        s = ExperimentSpec(model=spec.model, modes=["gpu_baseline"], l_in=spec.l_in[:1],
                           l_out=spec.l_out[:1], batch=spec.batch[:1],
                           n_requests=spec.n_requests, seeds=spec.seeds[:1])
        rows = [r for res in execute(s) for r in res.roofline]
        metrics.to_csv(rows, ("mode", "model", "l_in", "l_out", "batch", "seed")
                       + metrics.ROOFLINE_COLUMNS, out / "roofline.csv")
        return EXIT_OK
    modes = ["gpu_baseline", "duplex", "duplex_pe", "duplex_pe_et"]
    if name == "latency":
        modes = ["gpu_baseline", "hetero", "duplex", "duplex_pe_et"]
    s = ExperimentSpec(model=spec.model, modes=modes, l_in=spec.l_in, l_out=spec.l_out,
                       batch=spec.batch, n_requests=spec.n_requests, seeds=spec.seeds,
                       workers=spec.workers, out=out)
    results = execute(s)
    if name == "throughput":
        metrics.to_csv(sweep_rows(results, "gpu_baseline"), SWEEP_COLUMNS, out / "throughput.csv")
    else:
        metrics.to_csv([r for res in results for r in res.latency], metrics.LATENCY_COLUMNS,
                       out / "latency.csv", header=metrics.PERCENTILE_NOTE)
    return EXIT_OK


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _modes(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", default="mixtral",
                        help="model preset (mixtral, glam, grok1, opt, llama3) or JSON/YAML file")
    common.add_argument("--system", default=None,
                        help="system preset or JSON/YAML file; default depends on the mode "
                             f"({', '.join(f'{k}->{v}' for k, v in DEFAULT_SYSTEM.items())})")
    common.add_argument("--mode", type=_modes, default=["duplex"],
                        help=f"comma-separated modes: {', '.join(MODES)}")
    common.add_argument("--l-in", type=_ints, default=[2048], help="mean input length(s)")
    common.add_argument("--l-out", type=_ints, default=[1024], help="mean output length(s)")
    common.add_argument("--batch", type=_ints, default=[64], help="max batch size(s)")
    common.add_argument("--qps", type=float, default=None,
                        help="Poisson arrival rate; omit for closed-loop serving")
    common.add_argument("--requests", type=int, default=None,
                        help="requests per run (default 100, or the recipe's count)")
    common.add_argument("--seeds", type=_ints, default=[0], help="comma-separated seeds")
    common.add_argument("--cv", type=float, default=0.25,
                        help="coefficient of variation of request lengths")
    common.add_argument("--out", default="out",
                        help="output directory (overridden by DUPLEXSIM_OUT)")
    common.add_argument("--emit-trace", action="store_true", help="write JSONL traces")
    common.add_argument("--emit-placement", action="store_true", help="write placement JSON")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel simulations (default: available CPUs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="duplexsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every (mode x seed) combination")
    sw = sub.add_parser("sweep", parents=[common], help="cartesian sweep over lengths and batches")
    sw.add_argument("--recipe", choices=sorted(RECIPES), help="predefined sweep ranges")
    sw.add_argument("--baseline", default="gpu_baseline",
                    help="mode used as the normalisation denominator ('' to disable)")
    fg = sub.add_parser("figures", parents=[common], help="reduced figure experiments")
    fg.add_argument("name", help=f"one of {', '.join(FIGURES)}")
    return p


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    out = Path(os.environ.get("DUPLEXSIM_OUT") or args.out)
    kw = dict(model=args.model, system=args.system, modes=args.mode, l_in=args.l_in,
              l_out=args.l_out, batch=args.batch, qps=args.qps, n_requests=100,
              seeds=args.seeds, out=out, emit_trace=args.emit_trace,
              emit_placement=args.emit_placement, workers=max(1, args.workers), cv=args.cv)
    if getattr(args, "recipe", None):
        kw.update(RECIPES[args.recipe])
    if args.requests is not None:
        kw["n_requests"] = args.requests
    return ExperimentSpec(**kw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = spec_from_args(args)
        if args.command == "run":
            return cmd_run(spec)
        if args.command == "sweep":
            return cmd_sweep(spec, args.baseline or None)
        return cmd_figures(args.name, spec)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, CapacityExceeded, InvalidArgument, DuplexSimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
