"""Command-line entry point: build racelines, run scenarios, sweep toggles and
benchmark the delay filter.

Exit codes: 0 success, 1 validation errors, 2 runtime controller failure.
Verbosity via the DELAYMPC_LOG environment variable (DEBUG/INFO/WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, raceline as rl
from .delays import DelayProcess, sample_sequence
from .influence import FilterConfig, InfluenceFilter
from .scenario import ScenarioError, load_scenario


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); the contract is 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _setup_logging():
    level = os.environ.get("DELAYMPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")


def _build_parser() -> _Parser:
    parser = _Parser(prog="delaympc",
                     description="delay-aware tube MPC / CBF control lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_line = sub.add_parser("raceline", help="optimize a track's racing line")
    p_line.add_argument("track", help="track CSV (x,y,w rows)")
    p_line.add_argument("--out", required=True, help="output CSV path")
    p_line.add_argument("--spacing", type=float, default=2.0)
    p_line.add_argument("--w-veh", type=float, default=2.0)
    p_line.add_argument("--a-lat", type=float, default=6.0)
    p_line.add_argument("--a-acc", type=float, default=3.0)
    p_line.add_argument("--a-brake", type=float, default=5.0)
    p_line.add_argument("--v-max", type=float, default=18.0)

    p_run = sub.add_parser("run", help="simulate one scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", required=True, help="output directory")
    _common_run_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="toggle comparison across seeds")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--toggle", default="compensation",
                         choices=["compensation", "actuator"])
    p_sweep.add_argument("--seeds", type=int, default=5)
    _common_run_flags(p_sweep)

    p_bench = sub.add_parser("filter-bench", help="delay filter coverage stats")
    p_bench.add_argument("delayspec", help="JSON delay/filter specification")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--beta", type=float, default=None)

    return parser


def _common_run_flags(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--plan", choices=["A", "B"], default=None)
    p.add_argument("--no-computation-compensation", action="store_true")
    p.add_argument("--no-actuator-model", action="store_true")
    p.add_argument("--fixed-delay", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)


def _apply_overrides(scn, args):
    if args.seed is not None:
        scn.seed = args.seed
    if args.plan is not None:
        scn.plan = args.plan
    if args.no_computation_compensation:
        scn.compensation.computation_shift = False
    if args.no_actuator_model:
        scn.compensation.actuator_model = False
    if args.fixed_delay is not None:
        scn.compensation.fixed_delay = args.fixed_delay
    if args.beta is not None:
        scn.filter_cfg = FilterConfig(**{**scn.filter_cfg.__dict__, "beta": args.beta})
    return scn


def _cmd_raceline(args) -> int:
    track = rl.load_track(args.track, spacing=args.spacing, w_veh=args.w_veh)
    line = rl.min_curvature_line(track)
    line = rl.velocity_profile(line, args.a_lat, args.a_acc, args.a_brake,
                               v_max=args.v_max)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("x,y,s,vx,ax,psi,kappa,alpha,half_width\n")
        for i in range(len(line.x)):
            row = [line.x[i], line.y[i], line.s[i], line.vx[i], line.ax[i],
                   line.psi[i], line.kappa[i], line.alpha[i], line.half_width[i]]
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
    print(f"raceline: {len(line.x)} samples, length {line.length:.1f} m, "
          f"sum kappa^2 {line.sum_kappa_sq():.6f} -> {out}")
    return 0


def _cmd_run(args) -> int:
    scn = _apply_overrides(load_scenario(args.scenario), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, trace = harness.run(scn)
    trace.write_csv(out / "trace.csv")
    trace.write_cycles_csv(out / "cycles.csv")
    trace.write_filter_csv(out / "filter.csv")
    harness.write_metrics(metrics, out / "metrics.json")
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0 if metrics.completed else 2


def _cmd_sweep(args) -> int:
    scn_path = args.scenario
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_seed_scn = _apply_overrides(load_scenario(scn_path), args)
    base_seed = base_seed_scn.seed
    rows = []
    for setting in (True, False):
        lap_times, violations, min_hs, completed = [], 0, [], 0
        for k in range(args.seeds):
            scn = _apply_overrides(load_scenario(scn_path), args)
            scn.seed = base_seed + k
            if args.toggle == "compensation":
                scn.compensation.computation_shift = setting
            else:
                scn.compensation.actuator_model = setting
            metrics, _ = harness.run(scn)
            if metrics.lap_time is not None:
                lap_times.append(metrics.lap_time)
            violations += metrics.lane_violations
            min_hs.append(metrics.min_h)
            completed += int(metrics.completed)
        rows.append({
            "toggle": args.toggle,
            "enabled": setting,
            "seeds": args.seeds,
            "mean_lap_time": float(np.mean(lap_times)) if lap_times else None,
            "laps_finished": len(lap_times),
            "lane_violations": violations,
            "min_h": float(np.min(min_hs)) if min_hs else None,
            "runs_completed": completed,
        })
    with open(out / "sweep.csv", "w") as fh:
        keys = list(rows[0])
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join("" if row[k] is None else str(row[k]) for k in keys) + "\n")
    with open(out / "sweep.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{'setting':>12} {'lap time':>10} {'violations':>11} {'min h':>9}")
    for row in rows:
        lap = "DNF" if row["mean_lap_time"] is None else f"{row['mean_lap_time']:.2f}"
        state = "on" if row["enabled"] else "off"
        print(f"{args.toggle + ' ' + state:>12} {lap:>10} "
              f"{row['lane_violations']:>11d} {row['min_h']:>9.3f}")
    return 0


def _cmd_filter_bench(args) -> int:
    path = Path(args.delayspec)
    if not path.exists():
        raise ScenarioError(f"delay spec not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})")
    unknown = set(raw) - {"delay", "steps", "seeds", "burn_in", "filter"}
    if unknown:
        raise ScenarioError(f"{path}: unknown keys {sorted(unknown)}")
    proc = DelayProcess(**raw.get("delay", {}))
    steps = int(raw.get("steps", 1000))
    seeds = int(raw.get("seeds", 10))
    burn_in = int(raw.get("burn_in", 50))
    fcfg_kw = dict(raw.get("filter", {}))
    if args.beta is not None:
        fcfg_kw["beta"] = args.beta
    fcfg = FilterConfig(**fcfg_kw)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coverages = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        delays = sample_sequence(proc, steps, rng)
        filt = InfluenceFilter(fcfg)
        for d in delays:
            filt.update(float(d))
        coverages.append(filt.coverage(burn_in=burn_in))
        if seed == 0:
            with open(out / "filter_trace.csv", "w") as fh:
                fh.write("t_c_obs,x_pred,p_pred,bound\n")
                for r in filt.history:
                    fh.write(f"{r.t_obs:.12g},{r.x_pred:.12g},"
                             f"{r.p_pred:.12g},{r.bound:.12g}\n")
    summary = {
        "steps": steps,
        "seeds": seeds,
        "burn_in": burn_in,
        "beta": fcfg.beta,
        "bound_uses_stddev": fcfg.bound_uses_stddev,
        "coverage_per_seed": [round(c, 6) for c in coverages],
        "coverage_min": min(coverages),
        "coverage_mean": float(np.mean(coverages)),
    }
    with open(out / "coverage.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"coverage over {seeds} seeds: min {summary['coverage_min']:.3f} "
          f"mean {summary['coverage_mean']:.3f}")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        if args.command == "raceline":
            return _cmd_raceline(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "filter-bench":
            return _cmd_filter_bench(args)
    except (ScenarioError, rl.TrackError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime controller failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
