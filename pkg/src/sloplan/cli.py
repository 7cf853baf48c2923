"""Command-line entry points: fit, generate, simulate, capacity.

An experiment config is a JSON object; relative paths inside it resolve
against the config file's directory::

    {
      "scenario": "chatbot",            # builtin name, scenario file or inline object
      "trace": "trace.jsonl",           # optional; replaces trace generation
      "slo": {...},                     # optional; defaults to the scenario's
      "model": "model.json",            # perf model file or inline object
      "cluster": {"replicas": 1},       # cluster file or inline object
      "scheduler": {"timeout": 0.1},    # scheduler knobs
      "sim": {"noise": 0.0},            # simulator knobs
      "duration_s": 30,
      "capacity": {"rate_bounds": [0.5, 32], "tolerance": 0.05, "seeds": [0, 1, 2]}
    }
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import perf_model, workload
from .baselines import AlwaysDeclineScheduler, FixedCapScheduler, PrefillGreedyScheduler
from .dp_scheduler import SchedulerConfig, SloScheduler
from .errors import SloplanError
from .metrics import MetricsLog, capacity_search, overall_attainment, scenario_evaluator
from .sim_executor import SimConfig, Simulation, write_event_log
from .tiers_router import ClusterConfig

SCHEDULERS = ("slos", "prefill-greedy", "fixed-cap", "always-decline")
DATA_DIR = Path(__file__).with_name("data")


class ConfigError(SloplanError):
    pass


@dataclass
class ExperimentConfig:
    path: Path | None
    scenario: workload.Scenario | None
    trace: list[workload.RequestSpec] | None
    slo: workload.SloConfig
    model: perf_model.PerfModel
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    scheduler: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    duration: float = 30.0
    capacity: dict = field(default_factory=dict)


def _resolve(base: Path | None, ref: str) -> Path:
    p = Path(ref)
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


def _load_part(base: Path | None, value, loader_file, loader_dict, what: str):
    if isinstance(value, dict):
        return loader_dict(value)
    p = _resolve(base, str(value))
    if not p.exists():
        raise ConfigError(f"{what} file not found: {p}")
    return loader_file(p)


def _scenario(base: Path | None, value) -> workload.Scenario:
    if isinstance(value, str) and value in workload.BUILTIN_SCENARIOS:
        return workload.builtin_scenario(value)
    return _load_part(base, value, workload.load_scenario, workload.Scenario.from_dict, "scenario")


def load_experiment(path: str | Path) -> ExperimentConfig:
    """Parse an experiment config; builtin names like ``toy`` resolve to packaged data."""
    path = Path(path)
    if not path.exists() and (DATA_DIR / str(path) / "experiment.json").exists():
        path = DATA_DIR / str(path) / "experiment.json"
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent
    try:
        scenario = _scenario(base, raw["scenario"]) if "scenario" in raw else None
        if "slo" in raw:
            slo = workload.SloConfig.from_dict(raw["slo"])
        elif scenario is not None:
            slo = scenario.slo
        else:
            raise ConfigError("need a scenario or an slo section")
        trace = None
        if "trace" in raw:
            trace = workload.load_trace(_resolve(base, raw["trace"]), slo)
        if trace is None and scenario is None:
            raise ConfigError("need a scenario or a trace")
        if "model" not in raw:
            raise ConfigError("missing 'model'")
        model = _load_part(base, raw["model"], perf_model.load_model, perf_model.PerfModel.from_dict, "model")
        cluster = _load_part(base, raw.get("cluster", {}), lambda p: ClusterConfig.from_dict(json.loads(p.read_text())), ClusterConfig.from_dict, "cluster")
        return ExperimentConfig(
            path=path,
            scenario=scenario,
            trace=trace,
            slo=slo,
            model=model,
            cluster=cluster,
            scheduler=dict(raw.get("scheduler", {})),
            sim=dict(raw.get("sim", {})),
            duration=float(raw.get("duration_s", 30.0)),
            capacity=dict(raw.get("capacity", {})),
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (SloplanError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {type(exc).__name__}: {exc}") from None


def _dataclass_from(cls, values: dict, **overrides):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**merged)


def make_schedulers(name: str, exp: ExperimentConfig, replicas: int, spec: bool = False) -> list:
    cfg = _dataclass_from(SchedulerConfig, exp.scheduler, mode="spec" if spec else None)
    tight = min(exp.slo.tpot_tiers)
    out = []
    for _ in range(replicas):
        if name == "slos":
            out.append(SloScheduler(exp.model, dataclasses.replace(cfg)))
        elif name == "prefill-greedy":
            out.append(PrefillGreedyScheduler(exp.model, cfg))
        elif name == "fixed-cap":
            out.append(FixedCapScheduler(exp.model, cfg, tightest_tpot=tight))
        elif name == "always-decline":
            out.append(AlwaysDeclineScheduler(exp.model, cfg))
        else:
            raise ConfigError(f"unknown scheduler {name!r}")
    return out


def _sim_config(exp: ExperimentConfig, noise: float | None, debug: bool) -> SimConfig:
    overrides = {"noise": noise, "record_events": True if debug else None}
    if "memory_total" not in exp.sim:
        overrides["memory_total"] = exp.cluster.memory_total
    return _dataclass_from(SimConfig, exp.sim, **overrides)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- commands ---------------------------------------------------------------------


def cmd_fit(args) -> int:
    samples = perf_model.load_profile(args.profile)
    model = perf_model.fit(samples, num_terms=args.terms)
    perf_model.save_model(model, args.out)
    r2 = perf_model.r_squared(model, samples)
    print(json.dumps({"model": model.to_dict(), "r_squared": r2, "samples": len(samples)}, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    if args.config in workload.BUILTIN_SCENARIOS:
        sc = workload.builtin_scenario(args.config)
    else:
        sc = workload.load_scenario(args.config)
    if args.rate is not None:
        sc = sc.with_rate(args.rate)
    trace = workload.generate_trace(sc, args.seed, args.duration)
    workload.write_trace(args.out, trace)
    print(json.dumps({"requests": len(trace), "out": str(args.out)}))
    return 0


def _trace_for(exp: ExperimentConfig, seed: int, rate: float | None):
    if exp.trace is not None and rate is None:
        return exp.trace
    sc = exp.scenario.with_rate(rate) if rate is not None else exp.scenario
    return workload.generate_trace(sc, seed, exp.duration)


def cmd_simulate(args) -> int:
    exp = load_experiment(args.config)
    replicas = args.replicas or exp.cluster.replicas
    cluster = dataclasses.replace(exp.cluster, replicas=replicas)
    trace = _trace_for(exp, args.seed, args.rate)
    scheds = make_schedulers(args.scheduler, exp, replicas, args.spec == "on")
    sim = Simulation(trace, scheds, exp.model, exp.slo, _sim_config(exp, args.noise, args.debug_log), cluster.policy(), args.seed)
    sim.run()
    log = MetricsLog.from_simulation(sim)
    summary = log.summary()
    summary.update(scheduler=args.scheduler, spec=args.spec, seed=args.seed)
    out = Path(args.out)
    _write(out / "metrics.jsonl", log.to_jsonl())
    _write(out / "requests.csv", log.to_csv())
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.debug_log:
        write_event_log(sim, out / "events.jsonl")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_capacity(args) -> int:
    exp = load_experiment(args.config)
    if exp.scenario is None:
        raise ConfigError("capacity search needs a scenario (rates are scaled from it)")
    replicas = args.replicas or exp.cluster.replicas
    policy = dataclasses.replace(exp.cluster, replicas=replicas).policy()
    cap = exp.capacity
    bounds = tuple(cap.get("rate_bounds", (0.5, 32.0)))
    bounds = (bounds[0], bounds[1] * replicas)
    seeds = tuple(cap.get("seeds", (args.seed, args.seed + 1, args.seed + 2)))
    variants = [args.scheduler] if args.scheduler else ["slos", "fixed-cap", "prefill-greedy"]
    rows = []
    for name in variants:
        ev = scenario_evaluator(
            exp.scenario,
            lambda name=name: make_schedulers(name, exp, replicas, args.spec == "on"),
            exp.model,
            exp.duration,
            _sim_config(exp, args.noise, False),
            policy,
            overall_attainment,
        )
        res = capacity_search(ev, bounds, args.target, float(cap.get("tolerance", 0.05)), seeds, replicas)
        rows.append({"scheduler": name, "replicas": replicas, "capacity_per_gpu": res.capacity_per_gpu, "total_rate": res.rate, "evaluations": res.evaluations})
    base = rows[0]["capacity_per_gpu"]
    for r in rows:
        r["ratio_to_first"] = (base / r["capacity_per_gpu"]) if r["capacity_per_gpu"] > 0 else None
    out = Path(args.out)
    _write(out / "capacity.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
    table = ["scheduler,replicas,capacity_per_gpu,total_rate"]
    table += [f"{r['scheduler']},{r['replicas']},{r['capacity_per_gpu']!r},{r['total_rate']!r}" for r in rows]
    _write(out / "capacity.csv", "\n".join(table) + "\n")
    print("\n".join(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sloplan", description="SLO-aware LLM serving planner and simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a perf model to a profile CSV")
    p.add_argument("profile")
    p.add_argument("--out", required=True)
    p.add_argument("--terms", type=int, default=2)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("generate", help="write a synthetic trace")
    p.add_argument("--config", required=True, help="scenario file or builtin name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--rate", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    for name, func, text in (
        ("simulate", cmd_simulate, "run one experiment and write per-request metrics"),
        ("capacity", cmd_capacity, "search the highest rate that meets the attainment target"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="experiment file or packaged name (e.g. toy)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--scheduler", choices=SCHEDULERS, default="slos" if name == "simulate" else None)
        p.add_argument("--spec", choices=("off", "on"), default="off")
        p.add_argument("--replicas", type=int)
        p.add_argument("--noise", type=float)
        p.add_argument("--debug-log", action="store_true")
        if name == "simulate":
            p.add_argument("--rate", type=float, help="regenerate the scenario trace at this rate")
        else:
            p.add_argument("--target", type=float, default=0.9)
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SloplanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
