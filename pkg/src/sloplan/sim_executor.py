"""Discrete-event replica simulator.

Every replica executes the batches its scheduler plans; the wall time of a
batch is the perf-model prediction, optionally perturbed by multiplicative
uniform noise.  Speculative decode entries accept a random number of tokens.
Requests move through their prefill and decode stages, tool calls park a
request for their external delay, and best-effort requests soak up whatever
capacity the standard plan leaves in each batch.

All replicas share one event heap ordered by ``(time, sequence)``, so a run
is a pure function of its inputs and seed.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .batch_planner import Batch, slot_capacity
from .dp_scheduler import PlanItem, RunningRequest, SchedulePlan
from .errors import CannotSatisfyError, SimulationError, UnknownRequestError
from .perf_model import PerfModel
from .tiers_router import Dispatcher, RoutingPolicy, demote_to_best_effort
from .workload import DECODE, PREFILL, DerivedDeadlines, RequestSpec, SloConfig, derive_deadlines

STANDARD = "standard"
BEST_EFFORT = "best_effort"
PENDING = "pending"
DROPPED = "dropped"


@dataclass
class SimConfig:
    noise: float = 0.0  # epsilon of the uniform [-eps, +eps] wall-time perturbation
    alpha: float = 0.8  # true per-token acceptance probability of the drafter
    memory_total: int = 1 << 20
    be_reserve: float = 0.1  # fraction of memory best-effort residency must leave free
    be_speculate: bool = True
    tighten_factor: float = 0.8
    tighten_lag: float = 0.0  # tokens behind the SLO line that trigger tightening
    tighten_window: bool = True  # measure the line per TPOT window instead of per stage
    drain: float | None = None  # simulated seconds after the last arrival; None sizes it from the trace
    record_events: bool = False


@dataclass
class RequestState:
    spec: RequestSpec
    deadlines: DerivedDeadlines
    origin: int = 0
    replica: int = 0
    tier: str = PENDING
    demoted: bool = False
    hops: int = 0
    stage: int = 0
    done: int = 0  # tokens finished in the current stage
    recompute: int = 0  # context to rebuild after a best-effort preemption
    resident: bool = False
    available_at: list[float] = field(default_factory=list)  # per stage
    stage_deadline: list[float] = field(default_factory=list)  # prefill stages
    prefill_done: list[float] = field(default_factory=list)
    anchors: list[float] = field(default_factory=list)  # decode stages
    emissions: list[list[float]] = field(default_factory=list)  # decode stages
    finished_at: float | None = None
    preemptions: int = 0
    tightened: int = 0

    def __post_init__(self):
        n = len(self.spec.stages)
        self.available_at = [math.nan] * n
        self.stage_deadline = [math.nan] * n
        self.prefill_done = [math.nan] * n
        self.anchors = [math.nan] * n
        self.emissions = [[] for _ in range(n)]
        self.available_at[0] = self.spec.arrival
        self.stage_deadline[0] = self.deadlines.prefill_deadline

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def memory(self) -> int:
        return self.spec.memory_units

    @property
    def finished(self) -> bool:
        return self.stage >= len(self.spec.stages)

    @property
    def kind(self) -> str | None:
        return None if self.finished else self.spec.stages[self.stage].kind

    def ready(self, now: float) -> bool:
        return not self.finished and self.available_at[self.stage] <= now + 1e-12

    def context_tokens(self) -> int:
        """Tokens whose KV state exists: finished stages plus progress in this one."""
        return sum(s.tokens for s in self.spec.stages[: self.stage]) + self.done

    def last_emission(self) -> float | None:
        for k in range(min(self.stage, len(self.emissions) - 1), -1, -1):
            if self.emissions[k]:
                return self.emissions[k][-1]
        return None

    def _decode_index(self, stage: int) -> int:
        return sum(1 for s in self.spec.stages[:stage] if s.kind == DECODE)

    def stage_tpot(self, slo: SloConfig, stage: int | None = None) -> float:
        st = self.spec.stages[self.stage if stage is None else stage]
        return slo.tpot_tiers[st.slo_tier]

    def decode_run(self, start: int) -> tuple[int, float]:
        """Tokens and tightest TPOT index range of consecutive decode stages from ``start``."""
        tokens, tiers = 0, []
        k = start
        while k < len(self.spec.stages) and self.spec.stages[k].kind == DECODE:
            tokens += self.spec.stages[k].tokens
            tiers.append(k)
            k += 1
        return tokens, tiers


@dataclass
class BatchOutcome:
    wall_time: float
    accepted: dict[str, int]
    prefill_completed: list[str]


class Replica:
    def __init__(self, rid: int, scheduler, model: PerfModel, slo: SloConfig, cfg: SimConfig, seed: int):
        self.id = rid
        self.scheduler = scheduler
        self.model = model
        self.slo = slo
        self.cfg = cfg
        self.memory_total = cfg.memory_total
        self.memory_free = cfg.memory_total
        self.rng = np.random.default_rng([seed, rid])
        self.standard: dict[str, RequestState] = {}
        self.best_effort: list[RequestState] = []
        self.pending: list[RequestState] = []
        self.plan: deque[Batch] = deque()
        self.last_plan = -math.inf
        self.finished_since = 0
        self.stage_ready = False
        self.busy = False
        self.wake_pending = False
        sched_cfg = getattr(scheduler, "config", None)
        self.timeout = getattr(sched_cfg, "timeout", 0.1)
        self.thresh_new = getattr(sched_cfg, "thresh_new", 4)
        self.thresh_finished = getattr(sched_cfg, "thresh_finished", 4)
        max_chunk = getattr(sched_cfg, "max_chunk", 2048)
        be_time = min(min(slo.tpot_tiers), model.predict(max_chunk, 0))
        self.be_capacity = slot_capacity(model, be_time) if model.predict(1, 0) <= be_time else 1
        self.plans = 0
        self.infeasible_plans = 0

    # -- memory ---------------------------------------------------------------

    def resident_memory(self) -> int:
        return sum(r.memory for r in self.standard.values()) + sum(r.memory for r in self.best_effort if r.resident)

    def check_memory(self) -> None:
        assert self.memory_free >= 0
        assert self.memory_free + self.resident_memory() == self.memory_total

    def _allocate(self, st: RequestState) -> None:
        if st.memory > self.memory_free:
            raise SimulationError(f"allocation of {st.memory} units for {st.id} exceeds free memory", math.nan)
        self.memory_free -= st.memory
        st.resident = True

    def _release(self, st: RequestState) -> None:
        if st.resident:
            self.memory_free += st.memory
            st.resident = False


def preempt_best_effort(replica: Replica, needed: int) -> list[str]:
    """Evict resident best-effort requests, largest first, until ``needed`` units are free.

    Generated tokens are kept; the request later rebuilds its whole context
    with one prefill.
    """
    if needed <= replica.memory_free:
        return []
    victims = sorted((r for r in replica.best_effort if r.resident), key=lambda r: (-r.memory, r.id))
    evictable = sum(r.memory for r in victims)
    if replica.memory_free + evictable < needed:
        raise CannotSatisfyError(
            f"replica {replica.id}: need {needed} units, {replica.memory_free} free and {evictable} evictable"
        )
    out = []
    for r in victims:
        if replica.memory_free >= needed:
            break
        replica._release(r)
        r.recompute = r.context_tokens()
        r.preemptions += 1
        out.append(r.id)
    return out


def resume_prefill_tokens(st: RequestState) -> int:
    """Size of the single prefill that resumes a preempted request."""
    rest = st.spec.stages[st.stage].tokens - st.done if st.kind == PREFILL else 0
    return st.recompute + rest


def _sample_accepted(rng: np.random.Generator, sl: int, alpha: float) -> int:
    """One guaranteed token plus the run of consecutive accepted drafts, capped at ``sl``."""
    if sl <= 1:
        return 1
    extra = 0
    while extra < sl - 1 and rng.random() < alpha:
        extra += 1
    return 1 + extra


def execute_batch(
    replica: Replica,
    batch: Batch,
    now: float,
    states: dict[str, RequestState],
    on_transition: Callable[[RequestState, float], None] | None = None,
) -> BatchOutcome:
    """Run one batch starting at ``now`` and apply its effects at the end time."""
    ntok = batch.num_tokens
    if ntok == 0:
        return BatchOutcome(0.0, {}, [])
    for rid, _, _ in batch.entries:
        st = states.get(rid)
        if st is None:
            raise UnknownRequestError(f"batch references unknown request {rid!r}")
        if not st.resident:
            raise SimulationError(f"request {rid} is not resident", now)
    wall = replica.model.predict(ntok, batch.spec_step)
    eps = replica.cfg.noise
    if eps > 0:
        wall *= 1.0 + replica.rng.uniform(-eps, eps)
    end = now + wall
    accepted: dict[str, int] = {}
    completed: list[str] = []
    for rid, kind, tokens in batch.entries:
        st = states[rid]
        if kind == PREFILL:
            use = min(tokens, st.recompute)
            st.recompute -= use
            tokens -= use
            if tokens and st.kind == PREFILL:
                need = st.spec.stages[st.stage].tokens - st.done
                st.done += min(tokens, need)
                if st.done >= st.spec.stages[st.stage].tokens:
                    st.prefill_done[st.stage] = end
                    completed.append(rid)
                    _advance(st, end, on_transition)
        else:
            k = _sample_accepted(replica.rng, tokens, replica.cfg.alpha) if batch.spec_step else tokens
            need = st.spec.stages[st.stage].tokens - st.done
            k = min(k, need)
            accepted[rid] = k
            st.emissions[st.stage].extend([end] * k)
            st.done += k
            if st.done >= st.spec.stages[st.stage].tokens:
                _advance(st, end, on_transition)
    return BatchOutcome(wall, accepted, completed)


def _advance(st: RequestState, t: float, on_transition) -> None:
    prev = st.spec.stages[st.stage]
    st.stage += 1
    st.done = 0
    if not st.finished:
        nxt = st.spec.stages[st.stage]
        if nxt.kind == PREFILL:
            avail = t + nxt.external_delay
            st.available_at[st.stage] = avail
            pidx = sum(1 for s in st.spec.stages[: st.stage] if s.kind == PREFILL)
            st.stage_deadline[st.stage] = st.deadlines.stage_deadline(pidx, avail)
        else:
            st.available_at[st.stage] = t
            if prev.kind == DECODE:
                st.anchors[st.stage] = st.last_emission()
            else:
                st.anchors[st.stage] = max(t, st.stage_deadline[st.stage - 1])
    if on_transition is not None:
        on_transition(st, t)


class Simulation:
    """Event loop over one or more replicas sharing a router."""

    def __init__(
        self,
        trace: Sequence[RequestSpec],
        schedulers: Sequence,
        model: PerfModel,
        slo: SloConfig,
        config: SimConfig | None = None,
        policy: RoutingPolicy | None = None,
        seed: int = 0,
    ):
        self.cfg = config or SimConfig()
        self.model = model
        self.slo = slo
        self.policy = policy or RoutingPolicy(num_replicas=len(schedulers))
        if self.policy.num_replicas != len(schedulers):
            raise ValueError("one scheduler per replica required")
        self.dispatcher = Dispatcher(self.policy)
        self.replicas = [Replica(k, s, model, slo, self.cfg, seed) for k, s in enumerate(schedulers)]
        self.trace = sorted(trace, key=lambda r: (r.arrival, r.id))
        self.states: dict[str, RequestState] = {}
        for r in self.trace:
            r.validate(slo)
            if r.id in self.states:
                raise ValueError(f"duplicate request id {r.id!r}")
            self.states[r.id] = RequestState(r, derive_deadlines(r, slo, model))
        self.events: list = []
        self._seq = itertools.count()
        self.clock = 0.0
        self.log: list[dict] = []
        self.batches_run = 0
        last = self.trace[-1].arrival if self.trace else 0.0
        drain = self.cfg.drain
        if drain is None:
            drain = 10.0 + 2.0 * max((self._zero_load_span(st) for st in self.states.values()), default=0.0)
        self.end_time = last + drain

    def _zero_load_span(self, st: RequestState) -> float:
        """Longest time a request may legitimately take: every stage at its SLO."""
        d = st.deadlines
        span = sum(z * s for z, s in zip(d.zero_load_ttft, d.slowdowns))
        span += sum(stage.external_delay for stage in st.spec.stages)
        tpots = iter(d.decode_tpots)
        span += sum(stage.tokens * next(tpots) for stage in st.spec.stages if stage.kind == DECODE)
        return span

    # -- event plumbing ------------------------------------------------------------

    def _push(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self.events, (t, next(self._seq), kind, payload))

    def _record(self, t: float, kind: str, rid: str | None, **detail) -> None:
        if self.cfg.record_events:
            self.log.append({"time": round(t, 9), "event": kind, "request": rid, "detail": detail})

    def _wake(self, rep: Replica, t: float) -> None:
        if not rep.busy and not rep.wake_pending:
            rep.wake_pending = True
            self._push(t, "step", rep.id)

    # -- main loop -----------------------------------------------------------------

    def run(self):
        for r in self.trace:
            self._push(r.arrival, "arrival", r.id)
        while self.events:
            t, _, kind, payload = heapq.heappop(self.events)
            if t > self.end_time:
                break
            self.clock = t
            try:
                if kind == "arrival":
                    st = self.states[payload]
                    st.origin = self.dispatcher.origin()
                    self._offer(st, st.origin, t)
                elif kind == "offer":
                    rid, rep_id = payload
                    self._offer(self.states[rid], rep_id, t)
                elif kind == "step":
                    self._step(self.replicas[payload], t)
                elif kind == "done":
                    self._batch_done(payload, t)
                elif kind == "ready":
                    st = self.states[payload]
                    rep = self.replicas[st.replica]
                    rep.stage_ready = True
                    self._record(t, "stage_ready", st.id, stage=st.stage)
                    self._wake(rep, t)
            except (SimulationError, CannotSatisfyError):
                raise
            except Exception as exc:  # attach the simulated time to module errors
                raise SimulationError(f"{type(exc).__name__}: {exc}", t) from exc
        return self

    def _offer(self, st: RequestState, rep_id: int, t: float) -> None:
        rep = self.replicas[rep_id]
        st.replica = rep_id
        rep.pending.append(st)
        self._record(t, "offer", st.id, replica=rep_id, hops=st.hops)
        self._wake(rep, t)

    def _on_decline(self, st: RequestState, rep: Replica, t: float) -> None:
        place = self.dispatcher.on_decline(st.origin, rep.id, st.hops)
        self._record(t, "decline", st.id, replica=rep.id, action=place.action)
        if place.action == "route":
            st.hops += 1
            self._push(t + place.delay, "offer", (st.id, place.replica))
        elif place.action == "best_effort":
            target = self.replicas[place.replica]
            demote_to_best_effort(st, target)
            self._wake(target, t)
        else:
            st.tier = DROPPED

    # -- planning ------------------------------------------------------------------

    def _running_view(self, rep: Replica, now: float) -> list[RunningRequest]:
        out = []
        for st in rep.standard.values():
            if st.finished or not st.ready(now):
                continue
            if st.kind == PREFILL:
                dec, stages = st.decode_run(st.stage + 1)
                tpot = min((st.stage_tpot(self.slo, k) for k in stages), default=math.inf)
                out.append(
                    RunningRequest(
                        id=st.id,
                        tpot=tpot,
                        prefill_left=st.spec.stages[st.stage].tokens - st.done,
                        deadline=st.stage_deadline[st.stage],
                        decode_left=dec,
                        value=st.spec.value,
                        arrival=st.spec.arrival,
                        memory_units=st.memory,
                    )
                )
            else:
                dec, stages = st.decode_run(st.stage)
                tpot = min(st.stage_tpot(self.slo, k) for k in stages)
                own = st.stage_tpot(self.slo)
                anchor = st.anchors[st.stage]
                emitted = len(st.emissions[st.stage])
                last = st.emissions[st.stage][-1] if emitted else anchor
                if self._behind(st, anchor, own):
                    tpot *= self.cfg.tighten_factor
                    st.tightened += 1
                out.append(
                    RunningRequest(
                        id=st.id,
                        tpot=tpot,
                        last_emission=last,
                        decode_left=dec - st.done,
                        value=st.spec.value,
                        arrival=st.spec.arrival,
                        memory_units=st.memory,
                    )
                )
        return out

    def _behind(self, st: RequestState, anchor: float, tpot: float) -> bool:
        """Whether the decoder lags its SLO line by at least ``tighten_lag`` tokens.

        With ``tighten_window`` the line restarts at the first emission of the
        current TPOT window (the unit violations are measured in); otherwise
        it runs from the stage's decode anchor.
        """
        em = st.emissions[st.stage]
        k = len(em)
        if self.cfg.tighten_window:
            j = (k // self.slo.tpot_window) * self.slo.tpot_window
            if j == k and k > 0:
                j -= self.slo.tpot_window
            start = anchor if j == 0 else em[j - 1]
        else:
            j, start = 0, anchor
        if k == j:
            return False
        gap = em[-1] - start - (k - j) * tpot
        return gap > 1e-9 and gap / tpot >= self.cfg.tighten_lag - 1e-9

    def _plan_item(self, st: RequestState) -> PlanItem:
        dec, stages = st.decode_run(1)
        tpot = min((st.stage_tpot(self.slo, k) for k in stages), default=math.inf)
        return PlanItem(
            id=st.id,
            deadline=st.stage_deadline[0],
            prefill_tokens=st.spec.stages[0].tokens,
            tpot=tpot,
            memory_units=st.memory,
            value=st.spec.value,
            decode_tokens=dec,
            arrival=st.spec.arrival,
        )

    def _needs_replan(self, rep: Replica, now: float) -> bool:
        if not rep.pending and not rep.standard:
            return False
        return (
            not rep.plan
            or len(rep.pending) > rep.thresh_new
            or rep.finished_since > rep.thresh_finished
            or now - rep.last_plan >= rep.timeout
            or rep.stage_ready
        )

    def _replan(self, rep: Replica, now: float) -> None:
        running = self._running_view(rep, now)
        new = [self._plan_item(st) for st in rep.pending]
        std_mem = sum(st.memory for st in rep.standard.values())
        plan: SchedulePlan = rep.scheduler.plan(running, new, now, rep.memory_total - std_mem)
        rep.plans += 1
        if plan.infeasible:
            rep.infeasible_plans += 1
            self._record(now, "plan_infeasible", None, replica=rep.id)
        by_id = {st.id: st for st in rep.pending}
        admitted_new = [rid for rid in plan.admitted if rid in by_id]
        for rid in admitted_new:
            st = by_id[rid]
            preempted = preempt_best_effort(rep, st.memory)
            for v in preempted:
                self._record(now, "preempt", v, replica=rep.id, resume_prefill=resume_prefill_tokens(self.states[v]))
            rep._allocate(st)
            st.tier = STANDARD
            rep.standard[rid] = st
            self._record(now, "admit", rid, replica=rep.id)
        waiting = set(plan.deferred)
        rep.pending = [st for st in rep.pending if st.id in waiting]
        for rid in plan.declined:
            self._on_decline(by_id[rid], rep, now)
        rep.plan = deque(plan.batches)
        rep.last_plan = now
        rep.finished_since = 0
        rep.stage_ready = False
        if self.cfg.record_events:
            self._record(now, "plan", None, replica=rep.id, **_plan_summary(plan))

    # -- batch execution -----------------------------------------------------------

    def _realize(self, rep: Replica, planned: Batch, now: float) -> Batch:
        """Drop stale entries, clip prefill chunks, then fill spare capacity with best-effort work."""
        entries = []
        for rid, kind, tokens in planned.entries:
            st = rep.standard.get(rid)
            if st is None or st.finished or not st.ready(now) or st.kind != kind:
                continue
            left = st.spec.stages[st.stage].tokens - st.done
            if kind == PREFILL:
                entries.append((rid, kind, min(tokens, left)))
            else:
                entries.append((rid, kind, tokens if planned.spec_step else min(tokens, left)))
        spec_step = max((t for _, k, t in entries if k == DECODE), default=0) if planned.spec_step else 0
        room = planned.capacity - sum(t for _, _, t in entries)
        if planned.capacity == 0 and not entries:
            room = rep.be_capacity
        if room > 0 and rep.best_effort:
            entries += self._best_effort_fill(rep, room, spec_step, now)
        return Batch(entries, spec_step, 0.0, planned.capacity, planned.slot)

    def _best_effort_fill(self, rep: Replica, room: int, spec_step: int, now: float) -> list:
        out = []
        reserve = rep.cfg.be_reserve * rep.memory_total
        sl = spec_step if (spec_step and rep.cfg.be_speculate) else 1
        for st in rep.best_effort:
            if room <= 0:
                break
            if st.finished:
                continue
            if not st.resident:
                if rep.memory_free - st.memory < reserve:
                    break
                rep._allocate(st)
                self._record(now, "be_resident", st.id, replica=rep.id, resume_prefill=resume_prefill_tokens(st))
            if not st.ready(now):
                continue
            if st.recompute > 0 or st.kind == PREFILL:
                take = min(room, resume_prefill_tokens(st))
                out.append((st.id, PREFILL, take))
                room -= take
            elif room >= sl:
                out.append((st.id, DECODE, sl))
                room -= sl
        return out

    def _step(self, rep: Replica, now: float) -> None:
        rep.wake_pending = False
        if rep.busy:
            return
        if self._needs_replan(rep, now):
            self._replan(rep, now)
        while True:
            planned = rep.plan.popleft() if rep.plan else Batch([], 0, 0.0)
            batch = self._realize(rep, planned, now)
            if batch.entries or not rep.plan:
                break
        if not batch.entries:
            if any(st.ready(now) for st in rep.standard.values()):
                # Nothing planned for ready work (only after an infeasible
                # plan); try again once the replan timeout expires.
                rep.last_plan = -math.inf
                rep.wake_pending = True
                self._push(now + rep.timeout, "step", rep.id)
            return
        wall_start = now
        outcome = execute_batch(rep, batch, now, self.states, lambda st, t: self._transition(rep, st, t))
        self.batches_run += 1
        rep.busy = True
        end = wall_start + outcome.wall_time
        self._record(
            now,
            "batch",
            None,
            replica=rep.id,
            wall=round(outcome.wall_time, 12),
            tokens=batch.num_tokens,
            spec_step=batch.spec_step,
            entries=[list(e) for e in batch.entries],
        )
        self._push(end, "done", rep.id)

    def _batch_done(self, rep_id: int, t: float) -> None:
        rep = self.replicas[rep_id]
        rep.busy = False
        self._wake(rep, t)

    def _transition(self, rep: Replica, st: RequestState, t: float) -> None:
        if st.finished:
            st.finished_at = t
            rep._release(st)
            if st.tier == STANDARD:
                rep.standard.pop(st.id, None)
                rep.finished_since += 1
            else:
                rep.best_effort.remove(st)
            self._record(t, "finish", st.id, replica=rep.id, tier=st.tier)
        elif st.kind == PREFILL:
            avail = st.available_at[st.stage]
            if avail > t:
                self._push(avail, "ready", st.id)
            elif st.tier == STANDARD:
                rep.stage_ready = True


def _plan_summary(plan: SchedulePlan) -> dict:
    return {
        "admitted": list(plan.admitted),
        "declined": list(plan.declined),
        "infeasible": plan.infeasible,
        "batches": [[round(b.start, 9), round(b.end, 9), b.num_tokens] for b in plan.batches],
    }


def run(
    trace: Sequence[RequestSpec],
    schedulers,
    model: PerfModel,
    slo: SloConfig,
    config: SimConfig | None = None,
    policy: RoutingPolicy | None = None,
    seed: int = 0,
):
    """Simulate ``trace`` and return its :class:`~sloplan.metrics.MetricsLog`.

    ``schedulers`` is one scheduler per replica (a single scheduler object
    means one replica).
    """
    from .metrics import MetricsLog

    if not isinstance(schedulers, (list, tuple)):
        schedulers = [schedulers]
    sim = Simulation(trace, schedulers, model, slo, config, policy, seed).run()
    return MetricsLog.from_simulation(sim)


def write_event_log(sim: Simulation, path) -> None:
    with open(path, "w") as fh:
        for rec in sim.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
