"""SLO-aware planning and simulation for multi-stage LLM serving.

The pieces, bottom up:

* :mod:`sloplan.perf_model` - batch latency model, its inverse and fitting
* :mod:`sloplan.workload` - SLO tiers, request traces and synthetic scenarios
* :mod:`sloplan.batch_planner` - prefill budget of a time gap (autoregressive and speculative)
* :mod:`sloplan.dp_scheduler` - admission control by dynamic programming
* :mod:`sloplan.baselines` - reference schedulers without admission control
* :mod:`sloplan.sim_executor` - discrete-event replica simulator
* :mod:`sloplan.tiers_router` - best-effort tier and multi-replica routing
* :mod:`sloplan.metrics` - SLO attainment, summaries and capacity search
"""

from .batch_planner import Batch, acceptance, form_batches_ar, form_batches_spec, solve_spec_lengths
from .dp_scheduler import PlanItem, RunningRequest, SchedulePlan, SchedulerConfig, SloScheduler, schedule, schedule_throughput
from .metrics import MetricsLog, attainment, capacity_search, disagg_goodput, disagg_ratio, overall_attainment
from .perf_model import PerfModel, fit, predict, time2bs
from .sim_executor import SimConfig, Simulation, run
from .tiers_router import ClusterConfig, RoutingPolicy
from .workload import RequestSpec, SloConfig, StageSpec, builtin_scenario, generate_trace

__all__ = [
    "Batch",
    "ClusterConfig",
    "MetricsLog",
    "PerfModel",
    "PlanItem",
    "RequestSpec",
    "RoutingPolicy",
    "RunningRequest",
    "SchedulePlan",
    "SchedulerConfig",
    "SimConfig",
    "Simulation",
    "SloConfig",
    "SloScheduler",
    "StageSpec",
    "acceptance",
    "attainment",
    "builtin_scenario",
    "capacity_search",
    "disagg_goodput",
    "disagg_ratio",
    "fit",
    "form_batches_ar",
    "form_batches_spec",
    "generate_trace",
    "overall_attainment",
    "predict",
    "run",
    "schedule",
    "schedule_throughput",
    "solve_spec_lengths",
    "time2bs",
]
