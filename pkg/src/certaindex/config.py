"""Experiment configuration: a YAML file parsed into typed objects.

Every validation failure raises ConfigError naming the offending field by
its dotted path (``policies[1].kind``), which the CLI turns into exit code 2.
The full grammar is documented in the README.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .probe import ProbeConfig
from .runtime import ARCHETYPES
from .scheduler import POLICY_KINDS, AllocationPolicy, BudgetCurve, InterSchedPolicy

__all__ = [
    "ConfigError",
    "PolicyEntry",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "parse_policy",
    "policy_to_dict",
    "GENERATOR_KEYS",
    "OUT_DIR_ENV",
]

OUT_DIR_ENV = "CERTAINDEX_OUT_DIR"

GENERATOR_KEYS = {
    "p_solvable": float,
    "convergence_range": list,
    "easy_cutoff": int,
    "n_groups": int,
    "noise": float,
    "residual_noise": float,
    "tokens_mean": float,
    "tokens_spread": float,
    "tokens_sigma": float,
    "hesitation_rate": float,
    "interval_tokens": int,
}

_POLICY_KEYS = {
    "name", "kind", "detect_at_knob", "thresholds", "recheck_thresholds", "directions",
    "recheck_every", "curve", "curve_signal", "length_threshold", "length_direction", "calibrate",
}
_CALIBRATE_KEYS = {"tolerance", "n_programs", "seed", "buckets"}


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def _section(raw: dict, key: str, path: str) -> dict:
    val = raw.get(key) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"{path}{key}", "expected a mapping")
    return val


def _check_keys(d: dict, allowed: set, path: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else str(k), "unknown field")


def _num(d: dict, key: str, path: str, default=None, kind=float, positive=False):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
    if positive and not v > 0:
        raise ConfigError(f"{path}.{key}", "must be > 0")
    return v


def _num_list(v, path: str, kind=float, positive=True) -> list:
    if not isinstance(v, list) or not v:
        raise ConfigError(path, "expected a non-empty list")
    out = []
    for i, x in enumerate(v):
        out.append(_num({"x": x}, "x", f"{path}[{i}]", kind=kind, positive=positive))
    return out


def _float_map(v, path: str) -> dict[str, float]:
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise ConfigError(path, "expected a mapping of signal -> cutoff")
    return {str(k): _num(v, k, path) for k in v}


@dataclass(frozen=True)
class PolicyEntry:
    """A named allocation policy in the sweep, optionally self-calibrating."""

    name: str
    fields: dict = field(default_factory=dict)
    calibrate: dict | None = None

    def build(self, resource_cap: int) -> AllocationPolicy:
        kw = dict(self.fields)
        kw.setdefault("detect_at_knob", min(5, resource_cap))
        kw["detect_at_knob"] = min(kw["detect_at_knob"], resource_cap)
        if self.calibrate is not None and kw.get("kind") in ("initial_curve_fit", "dynamic_curve_fit") and "curve" not in kw:
            # placeholder until calibration fills it in
            kw["curve"] = BudgetCurve((0.0, 1.0), (resource_cap,))
        return AllocationPolicy(resource_cap=resource_cap, **kw)


def parse_policy(raw: Any, path: str = "policy") -> PolicyEntry:
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    _check_keys(raw, _POLICY_KEYS, path)
    kind = raw.get("kind")
    if kind not in POLICY_KINDS:
        raise ConfigError(f"{path}.kind", f"unknown policy kind {kind!r} (expected one of {', '.join(POLICY_KINDS)})")
    fields: dict[str, Any] = {"kind": kind}
    for key in ("detect_at_knob", "recheck_every"):
        v = _num(raw, key, path, kind=int, positive=True)
        if v is not None:
            fields[key] = v
    if "thresholds" in raw:
        fields["thresholds"] = _float_map(raw["thresholds"], f"{path}.thresholds")
    if raw.get("recheck_thresholds") is not None:
        fields["recheck_thresholds"] = _float_map(raw["recheck_thresholds"], f"{path}.recheck_thresholds")
    if raw.get("directions") is not None:
        d = raw["directions"]
        if not isinstance(d, dict) or any(v not in ("ge", "le") for v in d.values()):
            raise ConfigError(f"{path}.directions", "expected a mapping of signal -> 'ge' | 'le'")
        fields["directions"] = {str(k): v for k, v in d.items()}
    if raw.get("length_threshold") is not None:
        fields["length_threshold"] = _num(raw, "length_threshold", path)
    if raw.get("length_direction") is not None:
        fields["length_direction"] = raw["length_direction"]
    if raw.get("curve_signal") is not None:
        fields["curve_signal"] = str(raw["curve_signal"])
    if raw.get("curve") is not None:
        c = raw["curve"]
        if not isinstance(c, dict) or set(c) != {"edges", "budgets"}:
            raise ConfigError(f"{path}.curve", "expected a mapping with 'edges' and 'budgets'")
        try:
            fields["curve"] = BudgetCurve(
                tuple(_num_list(c["edges"], f"{path}.curve.edges", positive=False)),
                tuple(_num_list(c["budgets"], f"{path}.curve.budgets", kind=int, positive=False)),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}.curve", str(exc)) from None
    calibrate = None
    if raw.get("calibrate") is not None:
        cal = raw["calibrate"]
        if cal is True:
            cal = {}
        if not isinstance(cal, dict):
            raise ConfigError(f"{path}.calibrate", "expected a mapping or true")
        _check_keys(cal, _CALIBRATE_KEYS, f"{path}.calibrate")
        calibrate = {
            "tolerance": _num(cal, "tolerance", f"{path}.calibrate", 0.0),
            "n_programs": _num(cal, "n_programs", f"{path}.calibrate", None, int, positive=True),
            "seed": _num(cal, "seed", f"{path}.calibrate", None, int),
            "buckets": _num(cal, "buckets", f"{path}.calibrate", 10, int, positive=True),
        }
        if not 0.0 <= calibrate["tolerance"] <= 1.0:
            raise ConfigError(f"{path}.calibrate.tolerance", "must lie in [0, 1]")
    name = str(raw.get("name", kind))
    entry = PolicyEntry(name, fields, calibrate)
    if calibrate is None and kind in ("initial_curve_fit", "dynamic_curve_fit") and "curve" not in fields:
        raise ConfigError(f"{path}.curve", f"required for kind {kind!r} unless calibrate is set")
    if kind == "length_proxy" and "length_threshold" not in fields:
        raise ConfigError(f"{path}.length_threshold", "required for kind 'length_proxy'")
    try:
        entry.build(max(fields.get("detect_at_knob", 1), 1))
    except ValueError as exc:
        msg = str(exc)
        sub = msg.split(":", 1)[0] if ":" in msg else "kind"
        raise ConfigError(f"{path}.{sub}", msg.split(":", 1)[-1].strip()) from None
    return entry


def policy_to_dict(policy: AllocationPolicy, name: str | None = None) -> dict:
    """Plain-data form of a policy, suitable for YAML; parse_policy inverts it."""
    out: dict[str, Any] = {"kind": policy.kind, "detect_at_knob": policy.detect_at_knob}
    if name is not None:
        out = {"name": name, **out}
    if policy.thresholds:
        out["thresholds"] = {k: float(v) for k, v in policy.thresholds.items()}
    if policy.recheck_thresholds is not None:
        out["recheck_thresholds"] = {k: float(v) for k, v in policy.recheck_thresholds.items()}
    if policy.directions:
        out["directions"] = dict(policy.directions)
    if policy.recheck_every != 1:
        out["recheck_every"] = policy.recheck_every
    if policy.curve is not None:
        out["curve"] = {"edges": list(policy.curve.edges), "budgets": list(policy.curve.budgets)}
    if policy.curve_signal != "certaindex_entropy":
        out["curve_signal"] = policy.curve_signal
    if policy.length_threshold is not None:
        out["length_threshold"] = float(policy.length_threshold)
    if policy.length_direction != "ge":
        out["length_direction"] = policy.length_direction
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    archetype: str = "SC"
    n_programs: int = 100
    trace: str | None = None
    generator: dict = field(default_factory=dict)
    arrival_rate: float | None = None
    arrival_times: tuple[float, ...] | None = None
    batch_capacity: int = 8
    token_rate: float = 50.0
    slo_scale: float = 1.0
    base_deadline: float = 60.0
    horizon: float = math.inf
    probe: ProbeConfig | None = None
    inter: InterSchedPolicy = field(default_factory=InterSchedPolicy)
    policies: tuple[PolicyEntry, ...] = (PolicyEntry("even", {"kind": "even"}),)
    rates: tuple[float | None, ...] = (None,)
    slo_scales: tuple[float, ...] = (1.0,)
    caps: tuple[int, ...] = (20,)
    out_dir: str = "out"
    formats: tuple[str, ...] = ("csv", "json")

    def grid(self) -> list[tuple[float | None, float, int, PolicyEntry]]:
        return [(r, s, c, p) for r in self.rates for s in self.slo_scales for c in self.caps for p in self.policies]


_TOP_KEYS = {"seed", "workload", "arrival", "backend", "slo", "horizon", "probe", "scheduler", "policies", "sweep", "output"}


def parse_config(raw: Any, base_dir: str | Path = ".") -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping at the top level")
    _check_keys(raw, _TOP_KEYS, "")
    seed = _num(raw, "seed", "", 0, int)

    wl = _section(raw, "workload", "")
    _check_keys(wl, {"archetype", "n_programs", "trace", "generator"}, "workload")
    archetype = wl.get("archetype", "SC")
    if archetype not in ARCHETYPES:
        raise ConfigError("workload.archetype", f"unknown archetype {archetype!r} (expected one of {', '.join(ARCHETYPES)})")
    n_programs = _num(wl, "n_programs", "workload", 100, int, positive=True)
    trace = wl.get("trace")
    if trace is not None:
        trace = str(Path(base_dir) / trace) if not os.path.isabs(str(trace)) else str(trace)
        archetype = "CoT"
    gen = _section(wl, "generator", "workload.")
    _check_keys(gen, set(GENERATOR_KEYS), "workload.generator")
    generator = {}
    for k, v in gen.items():
        if GENERATOR_KEYS[k] is list:
            lohi = _num_list(v, f"workload.generator.{k}", kind=int)
            if len(lohi) != 2 or lohi[0] > lohi[1]:
                raise ConfigError(f"workload.generator.{k}", "expected [lo, hi] with lo <= hi")
            generator[k] = tuple(lohi)
        else:
            generator[k] = _num(gen, k, "workload.generator", kind=GENERATOR_KEYS[k])

    arr = _section(raw, "arrival", "")
    _check_keys(arr, {"rate", "times"}, "arrival")
    rate = _num(arr, "rate", "arrival", None, positive=True)
    times = None
    if arr.get("times") is not None:
        times = tuple(_num_list(arr["times"], "arrival.times", positive=False))
        if any(t < 0 for t in times):
            raise ConfigError("arrival.times", "times must be >= 0")

    be = _section(raw, "backend", "")
    _check_keys(be, {"batch_capacity", "token_rate"}, "backend")
    capacity = _num(be, "batch_capacity", "backend", 8, int, positive=True)
    token_rate = _num(be, "token_rate", "backend", 50.0, positive=True)

    slo = _section(raw, "slo", "")
    _check_keys(slo, {"scale", "base_deadline"}, "slo")
    slo_scale = _num(slo, "scale", "slo", 1.0, positive=True)
    base_deadline = _num(slo, "base_deadline", "slo", 60.0, positive=True)
    horizon = _num(raw, "horizon", "", math.inf, positive=True)

    probe = None
    if raw.get("probe") is not None:
        pr = _section(raw, "probe", "")
        _check_keys(pr, {"interval_tokens", "window", "threshold", "hesitation_markers", "max_tokens"}, "probe")
        kw = {}
        for key, kind in (("interval_tokens", int), ("window", int), ("max_tokens", int), ("threshold", float)):
            v = _num(pr, key, "probe", None, kind, positive=True)
            if v is not None:
                kw[key] = v
        if pr.get("hesitation_markers") is not None:
            m = pr["hesitation_markers"]
            if not isinstance(m, list) or not all(isinstance(x, str) for x in m):
                raise ConfigError("probe.hesitation_markers", "expected a list of strings")
            kw["hesitation_markers"] = tuple(m)
        try:
            probe = ProbeConfig(**kw)
        except ValueError as exc:
            raise ConfigError("probe", str(exc)) from None

    sc = _section(raw, "scheduler", "")
    _check_keys(sc, {"gang", "order", "starvation_limit", "prior_tokens", "exact_estimates"}, "scheduler")
    for key in ("gang", "exact_estimates"):
        if key in sc and not isinstance(sc[key], bool):
            raise ConfigError(f"scheduler.{key}", "expected true or false")
    try:
        inter = InterSchedPolicy(
            gang=sc.get("gang", True),
            order=sc.get("order", "fifo"),
            starvation_limit=_num(sc, "starvation_limit", "scheduler", math.inf, positive=True),
            batch_capacity=capacity,
            prior_tokens=_num(sc, "prior_tokens", "scheduler", 128.0, positive=True),
            exact_estimates=sc.get("exact_estimates", False),
        )
    except ValueError as exc:
        sub, _, msg = str(exc).partition(":")
        raise ConfigError(f"scheduler.{sub}", msg.strip()) from None

    pols_raw = raw.get("policies", [{"kind": "even"}])
    if not isinstance(pols_raw, list) or not pols_raw:
        raise ConfigError("policies", "expected a non-empty list")
    policies = tuple(parse_policy(p, f"policies[{i}]") for i, p in enumerate(pols_raw))
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ConfigError("policies", "policy names must be unique")

    sw = _section(raw, "sweep", "")
    _check_keys(sw, {"rates", "slo_scales", "caps"}, "sweep")
    if "rates" in sw:
        if times is not None:
            raise ConfigError("sweep.rates", "cannot sweep rates with fixed arrival.times")
        rates = tuple(_num_list(sw["rates"], "sweep.rates"))
    else:
        rates = (rate,)
    if times is None and rates == (None,) and trace is None:
        raise ConfigError("arrival", "give arrival.rate, arrival.times or sweep.rates")
    if times is not None and trace is None and len(times) != n_programs:
        raise ConfigError("arrival.times", f"need {n_programs} times (one per program), got {len(times)}")
    slo_scales = tuple(_num_list(sw["slo_scales"], "sweep.slo_scales")) if "slo_scales" in sw else (slo_scale,)
    caps = tuple(_num_list(sw["caps"], "sweep.caps", kind=int)) if "caps" in sw else (20,)

    out = _section(raw, "output", "")
    _check_keys(out, {"dir", "formats"}, "output")
    out_dir = str(out.get("dir") or os.environ.get(OUT_DIR_ENV) or "out")
    formats = tuple(out.get("formats", ["csv", "json"]))
    if not formats or any(f not in ("csv", "json") for f in formats):
        raise ConfigError("output.formats", "expected a non-empty subset of [csv, json]")

    return ExperimentConfig(
        seed=seed, archetype=archetype, n_programs=n_programs, trace=trace, generator=generator,
        arrival_rate=rate, arrival_times=times, batch_capacity=capacity, token_rate=token_rate,
        slo_scale=slo_scale, base_deadline=base_deadline, horizon=horizon, probe=probe, inter=inter,
        policies=policies, rates=rates, slo_scales=slo_scales, caps=caps, out_dir=out_dir, formats=formats,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML: {exc}") from None
    return parse_config(raw, Path(path).parent)
