"""certaindex command line: simulate, calibrate, verify-theory, replay.

Exit codes: 0 ok, 1 verification failed, 2 config or input error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import yaml

from . import theory
from .config import OUT_DIR_ENV, ConfigError, ExperimentConfig, PolicyEntry, load_config, policy_to_dict
from .probe import AnswerRecord, ProbeConfig, TraceFormatError, evaluate_trace, flag_hesitation, read_traces
from .runtime import SUPPORTED_SIGNALS, generate_workload
from .scheduler import (
    AllocationPolicy,
    CalibrationRun,
    calibrate_recheck_threshold,
    calibrate_threshold,
    calibration_runs,
    fit_budget_curve,
    profile_workload,
)
from .sim import SimConfig, TraceRef, run

log = logging.getLogger("certaindex")

SUMMARY_COLUMNS = (
    "policy", "rate", "slo_scale", "cap", "programs", "truncated", "mean_latency", "p90_latency",
    "attainment", "total_tokens", "accuracy", "throughput", "makespan",
    "phi_p50", "phi_p90", "phi_p99", "phi_mean",
)
REPLAY_COLUMNS = ("program_id", "exit_step", "reason", "tokens_at_exit", "tokens_full", "savings")
CALIBRATION_COLUMNS = ("certaindex", "correct_if_stopped", "correct_if_full", "tokens_saved")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


# -- simulate ------------------------------------------------------------------


def build_workload(cfg: ExperimentConfig, seed: int | None = None) -> list:
    if cfg.trace is not None:
        traces = read_traces(cfg.trace)
        return [TraceRef(pid, tuple(recs)) for pid, recs in traces.items()]
    return generate_workload(cfg.n_programs, cfg.archetype, cfg.seed if seed is None else seed, **cfg.generator)


def _default_signal(archetype: str) -> str:
    return "consistency" if archetype == "CoT" else "certaindex_entropy"


def calibrate_entry(entry: PolicyEntry, cap: int, cfg: ExperimentConfig) -> AllocationPolicy:
    """Resolve a policy for ``cap``, profiling a calibration workload if asked to."""
    policy = entry.build(cap)
    if entry.calibrate is None or policy.kind == "even":
        return policy
    if cfg.trace is not None:
        raise ConfigError(f"policies.{entry.name}.calibrate", "calibration needs a synthetic workload")
    cal = entry.calibrate
    seed = cal["seed"] if cal["seed"] is not None else cfg.seed + 1
    n = cal["n_programs"] or cfg.n_programs
    specs = generate_workload(n, cfg.archetype, seed, **cfg.generator)
    profiles = profile_workload(specs, cap)
    detect = policy.detect_at_knob
    tol = cal["tolerance"]

    if policy.kind == "length_proxy":
        rows = [CalibrationRun(p.tokens[detect - 1], p.correct[detect - 1], p.correct[-1]) for p in profiles]
        return replace(policy, length_threshold=calibrate_threshold(rows, tol, policy.length_direction))

    signal = next(iter(policy.thresholds), _default_signal(cfg.archetype))
    if signal not in SUPPORTED_SIGNALS[cfg.archetype]:
        raise ConfigError(f"policies.{entry.name}.thresholds", f"signal {signal!r} is not available for {cfg.archetype}")
    direction = policy.direction(signal)
    t = calibrate_threshold(calibration_runs(profiles, detect, signal), tol, direction)
    policy = replace(policy, thresholds={signal: t})
    if policy.kind in ("k_step_threshold", "dynamic_curve_fit"):
        tr = calibrate_recheck_threshold(profiles, detect, t, policy.recheck_every, signal, tol, direction)
        policy = replace(policy, recheck_thresholds={signal: tr})
    if policy.kind == "initial_curve_fit":
        policy = replace(policy, curve=fit_budget_curve(profiles, [detect], policy.curve_signal, cal["buckets"]))
    elif policy.kind == "dynamic_curve_fit":
        checkpoints = list(range(detect, cap, policy.recheck_every))
        policy = replace(policy, curve=fit_budget_curve(profiles, checkpoints, policy.curve_signal, cal["buckets"]))
    return policy


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _point_name(policy: str, rate, slo: float, cap: int) -> str:
    r = "fixed" if rate is None else f"{rate:g}"
    return f"{policy}_rate{r}_slo{slo:g}_cap{cap}"


def run_point(args: tuple) -> tuple[dict, str, str]:
    """One grid point: returns (summary row, report json, report csv)."""
    cfg, workload, rate, slo, cap, name, policy = args
    sim_cfg = SimConfig(
        workload=workload,
        allocation=policy,
        inter=cfg.inter,
        seed=cfg.seed,
        arrival_rate=rate,
        arrivals=cfg.arrival_times,
        token_rate=cfg.token_rate,
        slo_scale=slo,
        base_deadline=cfg.base_deadline,
        horizon=cfg.horizon,
        probe_config=cfg.probe,
    )
    report = run(sim_cfg)
    s = report.summary()
    fair = s.pop("fairness") or {}
    row = {"policy": name, "rate": rate, "slo_scale": slo, "cap": cap, **s}
    for key in ("p50", "p90", "p99", "mean"):
        row[f"phi_{key}"] = fair.get(key)
    return row, report.to_json(), report.to_csv()


def simulate(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    workload = build_workload(cfg)
    if cfg.arrival_times is not None and len(cfg.arrival_times) != len(workload):
        raise ConfigError("arrival.times", f"need {len(workload)} times (one per program), got {len(cfg.arrival_times)}")
    resolved: dict[tuple[str, int], AllocationPolicy] = {}
    for entry in cfg.policies:
        for cap in cfg.caps:
            resolved[(entry.name, cap)] = calibrate_entry(entry, cap, cfg)
    tasks = [
        (cfg, workload, rate, slo, cap, entry.name, resolved[(entry.name, cap)])
        for rate, slo, cap, entry in cfg.grid()
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_point, tasks))
    else:
        results = [run_point(t) for t in tasks]

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for task, (row, rep_json, rep_csv) in zip(tasks, results):
        _, _, rate, slo, cap, name, _ = task
        stem = _point_name(name, rate, slo, cap)
        if "json" in cfg.formats:
            (out / f"{stem}.json").write_text(rep_json + "\n", encoding="utf-8")
        if "csv" in cfg.formats:
            (out / f"{stem}.csv").write_text(rep_csv, encoding="utf-8")
        rows.append(row)
    (out / "summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    policies = {f"{n}@{c}": policy_to_dict(p, n) for (n, c), p in resolved.items()}
    body = {"seed": cfg.seed, "policies": policies, "points": rows}
    (out / "summary.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return rows


def _json_default(v):
    raise TypeError(f"not serializable: {v!r}")


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def format_table(rows: list[dict], columns: tuple[str, ...]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.format is not None:
        cfg = replace(cfg, formats=(args.format,))
    rows = simulate(cfg, args.jobs)
    cols = ("policy", "rate", "slo_scale", "cap", "attainment", "mean_latency", "total_tokens", "accuracy")
    print(format_table(rows, cols))
    print(f"wrote {len(rows)} report(s) and a summary to {cfg.out_dir}")
    return EXIT_OK


# -- calibrate -----------------------------------------------------------------


def _parse_bool(v: str, column: str, line_no: int) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ConfigError(f"line {line_no}, column {column}", f"expected a boolean, got {v!r}")


def read_calibration_csv(path: str | Path) -> list[CalibrationRun]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in CALIBRATION_COLUMNS:
            if col not in header:
                raise ConfigError(f"column {col}", f"missing from {path} (found: {', '.join(header) or 'nothing'})")
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            try:
                c = float(rec["certaindex"])
                saved = float(rec["tokens_saved"])
            except (TypeError, ValueError):
                raise ConfigError(f"line {line_no}, column certaindex/tokens_saved", "expected a number") from None
            rows.append(CalibrationRun(
                c,
                _parse_bool(rec["correct_if_stopped"], "correct_if_stopped", line_no),
                _parse_bool(rec["correct_if_full"], "correct_if_full", line_no),
                saved,
            ))
    if not rows:
        raise ConfigError(str(path), "calibration set is empty")
    return rows


def cmd_calibrate(args) -> int:
    runs = read_calibration_csv(args.csv)
    direction = args.direction or ("le" if args.signal == "mean_output_length" else "ge")
    t = calibrate_threshold(runs, args.tolerance, direction)
    policy = AllocationPolicy(
        kind="static_threshold",
        resource_cap=max(args.detect_at_knob, 1),
        detect_at_knob=args.detect_at_knob,
        thresholds={args.signal: t},
        directions={args.signal: direction} if args.direction else {},
    )
    fragment = yaml.safe_dump(policy_to_dict(policy, args.name), sort_keys=False)
    if args.out:
        Path(args.out).write_text(fragment, encoding="utf-8")
    print(fragment, end="")
    if math.isinf(t):
        print("# no feasible threshold: early stopping disabled", file=sys.stderr)
    return EXIT_OK


# -- verify-theory -------------------------------------------------------------


def cmd_verify_theory(args) -> int:
    k = theory.required_probes(args.M, args.epsilon, args.delta)
    cov = theory.concentration_coverage(args.M, args.epsilon, args.delta, args.replications, args.seed)
    sweep = theory.lemma2_sweep(args.sweep_M, args.sweep_k)
    cov_ok = cov["coverage"] >= cov["target"]
    sweep_ok = sweep["failures"] == 0
    print(f"required_probes(M={args.M}, epsilon={args.epsilon}, delta={args.delta}) = {k}")
    print(f"coverage: {cov['coverage']:.4f} over {cov['replications']} replications "
          f"(target >= {cov['target']:.4f}) {'PASS' if cov_ok else 'FAIL'}")
    print(f"window-agreement sweep (M<={args.sweep_M}, k<={args.sweep_k}): {sweep['checked']} sequences, "
          f"{sweep['failures']} counterexamples {'PASS' if sweep_ok else 'FAIL'}")
    return EXIT_OK if cov_ok and sweep_ok else EXIT_FAIL


# -- replay --------------------------------------------------------------------


_REASON_NAMES = {"certain": "exit_certain", "budget": "exit_budget", "criteria_external": "end_of_trace"}


def replay_table(traces: dict, cfg: ProbeConfig, max_tokens: int | None = None) -> list[dict]:
    """Exit decision and savings per program. ``max_tokens`` defaults to each trace's length."""
    rows = []
    for pid, records in traces.items():
        full = records[-1].token_offset
        pc = replace(cfg, max_tokens=max_tokens if max_tokens is not None else full)
        trace = evaluate_trace(records, pc)
        at_exit = next(r.token_offset for r in trace.records if r.step_index == trace.terminated_at)
        rows.append({
            "program_id": pid,
            "exit_step": trace.terminated_at,
            "reason": _REASON_NAMES[trace.termination_reason],
            "tokens_at_exit": at_exit,
            "tokens_full": full,
            "savings": 1.0 - at_exit / full,
        })
    return rows


def replay_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPLAY_COLUMNS)
    for r in rows:
        w.writerow([r["program_id"], r["exit_step"], r["reason"], r["tokens_at_exit"], r["tokens_full"], f"{r['savings']:.6f}"])
    return buf.getvalue()


def cmd_replay(args) -> int:
    markers = tuple(args.markers.split(",")) if args.markers else ProbeConfig().hesitation_markers
    try:
        cfg = ProbeConfig(interval_tokens=args.interval, window=args.window, threshold=args.tau, hesitation_markers=markers)
    except ValueError as exc:
        raise ConfigError("probe", str(exc)) from None
    traces = read_traces(args.trace)
    # re-flag recorded answers against the configured markers
    traces = {
        pid: [AnswerRecord(r.step_index, r.token_offset, r.answer, r.hesitant or flag_hesitation(r.answer, markers)) for r in recs]
        for pid, recs in traces.items()
    }
    rows = replay_table(traces, cfg, args.max_tokens)
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = replay_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    total_full = sum(r["tokens_full"] for r in rows)
    total_exit = sum(r["tokens_at_exit"] for r in rows)
    print(f"# {len(rows)} programs, overall token savings {1 - total_exit / total_full:.6f}", file=sys.stderr)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="certaindex", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a simulation sweep from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help=f"output directory (default: config, then ${OUT_DIR_ENV}, then ./out)")
    s.add_argument("--format", choices=("csv", "json"))
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="calibrate a threshold from a CSV of profiled runs")
    c.add_argument("csv")
    c.add_argument("--tolerance", type=float, default=0.0)
    c.add_argument("--signal", default="certaindex_entropy")
    c.add_argument("--direction", choices=("ge", "le"))
    c.add_argument("--detect-at-knob", type=int, default=5)
    c.add_argument("--name", default="calibrated")
    c.add_argument("--out")
    c.add_argument("--seed", type=int, default=0, help="accepted for uniformity; calibration is deterministic")
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("verify-theory", help="Monte-Carlo and exhaustive checks of the stopping-rule guarantees")
    v.add_argument("--M", type=int, default=4)
    v.add_argument("--epsilon", type=float, default=0.5)
    v.add_argument("--delta", type=float, default=0.1)
    v.add_argument("--replications", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--sweep-M", type=int, default=3)
    v.add_argument("--sweep-k", type=int, default=3)
    v.set_defaults(func=cmd_verify_theory)

    r = sub.add_parser("replay", help="replay a probe-trace JSONL through the exit rule")
    r.add_argument("trace")
    r.add_argument("--tau", type=float, default=1.0)
    r.add_argument("--window", type=int, default=3)
    r.add_argument("--interval", type=int, default=64)
    r.add_argument("--max-tokens", type=int)
    r.add_argument("--markers", help="comma-separated hesitation markers (default: wait,hmm)")
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--out")
    r.add_argument("--seed", type=int, default=0, help="accepted for uniformity; replay is deterministic")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceFormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if str(exc).endswith("trace file is empty"):
            print(f"input error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
