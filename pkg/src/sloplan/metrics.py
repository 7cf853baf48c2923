"""Per-request SLO accounting, scenario summaries and capacity search.

A request attains its SLO only if every stage does: each prefill finishes
by its deadline and every TPOT window of every decode stage stays within
the stage's TPOT.  Windows are non-overlapping runs of ``tpot_window``
tokens measured from the stage's decode anchor; a short trailing window is
measured over its own length.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BoundsNotBracketingError, InvalidParametersError
from .workload import DECODE, PREFILL, SloConfig

# Slack for floating comparisons of emission times against SLO lines.
SLO_EPS = 1e-9


def window_samples(anchor: float, emissions: Sequence[float], window: int) -> list[float]:
    """Per-window TPOT samples ``(e_k - e_{k-w}) / w`` with ``e_0 = anchor``."""
    if not emissions:
        return []
    times = [anchor] + list(emissions)
    out = []
    k = 0
    n = len(emissions)
    while k < n:
        w = min(window, n - k)
        out.append((times[k + w] - times[k]) / w)
        k += w
    return out


@dataclass
class StageRecord:
    kind: str
    tokens: int
    available: float | None
    deadline: float | None = None  # prefill
    done_at: float | None = None  # prefill
    tpot: float | None = None  # decode
    anchor: float | None = None  # decode
    emitted: int = 0
    samples: list[float] = field(default_factory=list)
    met: bool = False

    @property
    def ttft(self) -> float | None:
        if self.done_at is None or self.available is None:
            return None
        return self.done_at - self.available

    @property
    def violations(self) -> int:
        return sum(1 for s in self.samples if s > self.tpot + SLO_EPS) if self.tpot is not None else 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "tokens": self.tokens, "available_s": self.available, "met": self.met}
        if self.kind == PREFILL:
            d.update(deadline_s=self.deadline, done_s=self.done_at, ttft_s=self.ttft)
        else:
            d.update(tpot_s=self.tpot, anchor_s=self.anchor, emitted=self.emitted, tpot_samples=self.samples)
        return d


@dataclass
class RequestRecord:
    id: str
    tier: str  # standard | best_effort | dropped | pending
    demoted: bool
    hops: int
    replica: int
    arrival: float
    finished_at: float | None
    preemptions: int
    stages: list[StageRecord]

    @property
    def attained(self) -> bool:
        return self.finished_at is not None and all(s.met for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tier": self.tier,
            "demoted": self.demoted,
            "hops": self.hops,
            "replica": self.replica,
            "arrival_s": self.arrival,
            "finished_s": self.finished_at,
            "preemptions": self.preemptions,
            "attained": self.attained,
            "stages": [s.to_dict() for s in self.stages],
        }


def _nan_to_none(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def record_from_state(st, slo: SloConfig) -> RequestRecord:
    stages = []
    for k, spec in enumerate(st.spec.stages):
        avail = _nan_to_none(st.available_at[k])
        if spec.kind == PREFILL:
            done = _nan_to_none(st.prefill_done[k])
            deadline = _nan_to_none(st.stage_deadline[k])
            met = done is not None and deadline is not None and done <= deadline + SLO_EPS
            stages.append(StageRecord(PREFILL, spec.tokens, avail, deadline, done, met=met))
        else:
            tpot = slo.tpot_tiers[spec.slo_tier]
            anchor = _nan_to_none(st.anchors[k])
            em = st.emissions[k]
            samples = window_samples(anchor, em, slo.tpot_window) if anchor is not None else []
            rec = StageRecord(DECODE, spec.tokens, avail, tpot=tpot, anchor=anchor, emitted=len(em), samples=samples)
            rec.met = len(em) == spec.tokens and rec.violations == 0
            stages.append(rec)
    return RequestRecord(
        id=st.id,
        tier=st.tier,
        demoted=st.demoted,
        hops=st.hops,
        replica=st.replica,
        arrival=st.spec.arrival,
        finished_at=st.finished_at,
        preemptions=st.preemptions,
        stages=stages,
    )


def _pct(values: Sequence[float], q: float) -> float | None:
    return float(np.percentile(np.asarray(values, dtype=float), q)) if len(values) else None


@dataclass
class MetricsLog:
    records: list[RequestRecord]
    duration: float = 0.0
    num_replicas: int = 1
    batches: int = 0
    plans: int = 0
    infeasible_plans: int = 0

    @classmethod
    def from_simulation(cls, sim) -> "MetricsLog":
        recs = [record_from_state(sim.states[r.id], sim.slo) for r in sim.trace]
        return cls(
            recs,
            duration=sim.clock,
            num_replicas=len(sim.replicas),
            batches=sim.batches_run,
            plans=sum(r.plans for r in sim.replicas),
            infeasible_plans=sum(r.infeasible_plans for r in sim.replicas),
        )

    # -- views -------------------------------------------------------------------

    def standard(self) -> list[RequestRecord]:
        return [r for r in self.records if r.tier == "standard"]

    def best_effort(self) -> list[RequestRecord]:
        return [r for r in self.records if r.tier == "best_effort"]

    def summary(self) -> dict:
        std = self.standard()
        be = self.best_effort()
        ttft = [s.ttft for r in std for s in r.stages if s.kind == PREFILL and s.ttft is not None]
        tpot = [x for r in std for s in r.stages if s.kind == DECODE for x in s.samples]
        windows = sum(1 for r in std for s in r.stages if s.kind == DECODE for _ in s.samples)
        bad = sum(s.violations for r in std for s in r.stages if s.kind == DECODE)
        return {
            "requests": len(self.records),
            "standard": len(std),
            "demoted": sum(1 for r in self.records if r.demoted),
            "dropped": sum(1 for r in self.records if r.tier == "dropped"),
            "unserved": sum(1 for r in self.records if r.finished_at is None),
            "attainment": attainment(self),
            "overall_attainment": overall_attainment(self),
            "best_effort_finished": sum(1 for r in be if r.finished_at is not None),
            "window_violation_rate": (bad / windows) if windows else 0.0,
            "ttft_p50_s": _pct(ttft, 50),
            "ttft_p99_s": _pct(ttft, 99),
            "tpot_p50_s": _pct(tpot, 50),
            "tpot_p99_s": _pct(tpot, 99),
            "max_hops": max((r.hops for r in self.records), default=0),
            "replicas": self.num_replicas,
            "batches": self.batches,
            "plans": self.plans,
            "infeasible_plans": self.infeasible_plans,
            "sim_end_s": self.duration,
        }

    def load_series(self, bin_s: float = 1.0) -> list[dict]:
        """Arrivals and standard admissions per time bin."""
        if not self.records:
            return []
        nbins = int(math.floor(max(r.arrival for r in self.records) / bin_s)) + 1
        arr = [0] * nbins
        adm = [0] * nbins
        for r in self.records:
            b = int(r.arrival // bin_s)
            arr[b] += 1
            if r.tier == "standard":
                adm[b] += 1
        return [{"t_s": k * bin_s, "arrivals": a, "admitted": m} for k, (a, m) in enumerate(zip(arr, adm))]

    # -- persistence ---------------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "tier", "demoted", "hops", "replica", "arrival_s", "ttft_s", "max_window_tpot_s", "finished_s", "attained"])
        for r in self.records:
            first = r.stages[0]
            samples = [x for s in r.stages if s.kind == DECODE for x in s.samples]
            w.writerow(
                [
                    r.id,
                    r.tier,
                    int(r.demoted),
                    r.hops,
                    r.replica,
                    repr(r.arrival),
                    "" if first.ttft is None else repr(first.ttft),
                    repr(max(samples)) if samples else "",
                    "" if r.finished_at is None else repr(r.finished_at),
                    int(r.attained),
                ]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def attainment(log: MetricsLog) -> float:
    """Fraction of standard-tier requests that attained every stage SLO."""
    std = log.standard()
    if not std:
        return 1.0
    return sum(1 for r in std if r.attained) / len(std)


def overall_attainment(log: MetricsLog) -> float:
    """Attained standard requests over all requests; demoted and dropped count as misses."""
    if not log.records:
        return 1.0
    return sum(1 for r in log.records if r.tier == "standard" and r.attained) / len(log.records)


# --------------------------------------------------------------------------
# Capacity search


@dataclass
class CapacityResult:
    capacity_per_gpu: float  # requests/second/GPU
    rate: float  # total requests/second at the capacity point
    evaluations: list[tuple[float, float]]  # (rate, median attainment)
    num_gpus: int = 1


def capacity_search(
    evaluate: Callable[[float, int], float],
    rate_bounds: tuple[float, float],
    target_attainment: float = 0.9,
    tolerance: float = 0.05,
    seeds: Sequence[int] = (0, 1, 2),
    num_gpus: int = 1,
    max_steps: int = 40,
) -> CapacityResult:
    """Largest total rate whose median attainment over ``seeds`` reaches the target.

    ``evaluate(rate, seed)`` runs one simulation and returns its attainment.
    Bisection stops once the bracket is within ``tolerance`` of its upper end.
    """
    lo, hi = rate_bounds
    if not 0 <= lo < hi:
        raise InvalidParametersError(f"bad rate bounds {rate_bounds}")
    evals: list[tuple[float, float]] = []

    def med(rate: float) -> float:
        if rate == 0:
            return 1.0
        a = float(np.median([evaluate(rate, s) for s in seeds]))
        evals.append((rate, a))
        return a

    if med(lo) < target_attainment:
        raise BoundsNotBracketingError(f"lower bound {lo} already misses the target")
    if med(hi) >= target_attainment:
        raise BoundsNotBracketingError(f"upper bound {hi} still meets the target")
    floor = 1e-3 * rate_bounds[1]  # below this a zero-capacity scheduler has been resolved
    for _ in range(max_steps):
        if hi - lo <= tolerance * hi or hi <= floor:
            break
        mid = 0.5 * (lo + hi)
        if med(mid) >= target_attainment:
            lo = mid
        else:
            hi = mid
    return CapacityResult(lo / num_gpus, lo, evals, num_gpus)


def scenario_evaluator(
    scenario,
    make_schedulers: Callable[[], list],
    model,
    duration: float,
    sim_config=None,
    policy=None,
    metric: Callable[[MetricsLog], float] = overall_attainment,
) -> Callable[[float, int], float]:
    """``evaluate(rate, seed)`` that simulates ``scenario`` scaled to ``rate``."""
    from .sim_executor import run
    from .workload import generate_trace

    def evaluate(rate: float, seed: int) -> float:
        trace = generate_trace(scenario.with_rate(rate), seed, duration)
        log = run(trace, make_schedulers(), model, scenario.slo, sim_config, policy, seed)
        return metric(log)

    return evaluate


# --------------------------------------------------------------------------
# Disaggregated-deployment analysis


def disagg_ratio(mean_prefill_len: float, mean_decode_len: float, tpot: float, overhead: float) -> float:
    """Prefill-to-decode device ratio ``(1 - C/TPOT) * E[prefill] / E[decode]``."""
    if not (tpot > 0 and 0 <= overhead <= tpot) or mean_decode_len <= 0 or mean_prefill_len < 0:
        raise InvalidParametersError("need tpot >= overhead >= 0, tpot > 0 and positive lengths")
    return (1.0 - overhead / tpot) * mean_prefill_len / mean_decode_len


def disagg_goodput(max_token_tpt: float, mean_in: float, mean_out: float, tpot: float, overhead: float) -> float:
    """Request goodput ``tpt / (TPOT/(TPOT - C) * E[O] + E[I])``."""
    if not (tpot > overhead >= 0) or max_token_tpt < 0 or mean_in < 0 or mean_out < 0:
        raise InvalidParametersError("need tpot > overhead >= 0 and nonnegative inputs")
    denom = tpot / (tpot - overhead) * mean_out + mean_in
    if denom <= 0:
        raise InvalidParametersError("mean lengths must not both be zero")
    return max_token_tpt / denom
