"""Independent reference implementations used by the tests.

None of these call the DP, the tiered planner or the closed-form solvers;
they enumerate instead.  Shared between unit tests and the acceptance run.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from sloplan.dp_scheduler import PlanItem, RunningRequest
from sloplan.errors import InfeasibleBudgetError
from sloplan.perf_model import PerfModel

EPS = 1e-12

CAPACITY_MODEL = PerfModel(((8e-5, 3e-3, 0.008), (0.0, 4e-3, 0.025)))

SMALL_MODELS = (
    PerfModel(((2e-4, 0.0, 0.004),)),
    PerfModel(((1e-4, 2e-3, 0.006), (0.0, 3e-3, 0.012))),
    PerfModel(((5e-5, 1e-3, 0.010),)),
)


# --------------------------------------------------------------------------
# Slot-level budget of one gap


def _capacity(model: PerfModel, d: float) -> int:
    return model.time2bs_bisect(d, 0)


def slot_budget(model: PerfModel, gap: float, tpots, head=None, max_chunk: int = 2048):
    """Prefill tokens a gap yields when each listed decoder gets one token
    exactly when postponing it by one more batch would break its TPOT.

    Simulated decoder by decoder; ``None`` if some batch cannot hold its
    decode tokens even after leaving the trailing partial slot idle.
    """
    got = _slot_budget(model, gap, tpots, head, max_chunk, True)
    return got if got is not None else _slot_budget(model, gap, tpots, head, max_chunk, False)


def _slot_budget(model, gap, tpots, head, max_chunk, keep_rem):
    if gap <= EPS:
        return 0
    t1 = model.predict(1, 0)
    cadence = min([model.predict(max_chunk, 0)] + list(tpots))
    slots = []
    rest = gap
    if head is not None and head < cadence:
        first = min(head, rest)
        if first + EPS >= t1:
            slots.append(first)
        rest -= first
    full = int(math.floor((rest + EPS) / cadence))
    slots += [cadence] * full
    rem = rest - full * cadence
    if keep_rem and rem > EPS and rem + EPS >= t1:
        slots.append(rem)
    if not slots:
        return 0
    ends = list(itertools.accumulate(slots))
    decode = [0] * len(slots)
    for tpot in tpots:
        last = None
        for i, e in enumerate(ends):
            following = ends[i + 1] if i + 1 < len(ends) else e + cadence
            if last is None or following > last + tpot + EPS:
                decode[i] += 1
                last = e
    total = 0
    for d, n in zip(slots, decode):
        cap = _capacity(model, d)
        if cap < n:
            return None
        total += cap - n
    return total


# --------------------------------------------------------------------------
# Admission by subset enumeration


def _floor_q(t: float, q: float) -> float:
    return max(0, math.floor(t / q + 1e-9)) * q


@dataclass
class OracleResult:
    value: float
    members: frozenset | None  # None when not even the forced work fits


def subset_feasible(members, running, now, model, memory, quantum=1e-3, tail=0.2, max_chunk=2048) -> bool:
    """Replay one admitted set gap by gap, paying prefills earliest-deadline first."""
    if sum(it.memory_units for it in members if not it.forced) > memory:
        return False
    active = [r for r in running if r.decoding and (r.last_emission is None or r.last_emission <= now + EPS)]
    decoders = [r.tpot for r in active]
    limits = [r.last_emission + r.tpot - now for r in active if r.last_emission is not None]
    head = None
    if limits:
        head = _floor_q(max(min(limits), model.predict(max(1, len(active)), 0)), quantum)
    order = sorted(members, key=lambda it: (it.deadline, not it.forced, it.id))
    carry = 0
    prev = now
    first = True
    for it in order:
        g = _floor_q(max(0.0, it.deadline - prev), quantum)
        b = slot_budget(model, g, decoders, head if first else None, max_chunk)
        if b is None:
            return False
        carry += b - it.prefill_tokens
        if carry < 0:
            return False
        if it.decode_tokens > 0 and math.isfinite(it.tpot):
            decoders.append(it.tpot)
        prev = it.deadline
        first = False
    return slot_budget(model, _floor_q(tail, quantum), decoders, head if first else None, max_chunk) is not None


def forced_items(running, now):
    out = []
    for r in running:
        waiting = r.decoding and r.last_emission is not None and r.last_emission > now + EPS
        if r.prefill_left > 0 or waiting:
            out.append(
                PlanItem(
                    r.id,
                    r.deadline if r.prefill_left > 0 else r.last_emission,
                    r.prefill_left,
                    r.tpot,
                    0,
                    0.0,
                    r.decode_left,
                    True,
                )
            )
    return out


def brute_force_admission(running, new, now, model, memory, objective="value", **kw) -> OracleResult:
    forced = forced_items(running, now)
    best = None
    for k in range(len(new) + 1):
        for combo in itertools.combinations(new, k):
            members = forced + list(combo)
            if not subset_feasible(members, running, now, model, memory, **kw):
                continue
            v = sum(it.value for it in combo) if objective == "value" else float(len(combo))
            if best is None or v > best.value:
                best = OracleResult(v, frozenset(it.id for it in combo))
    return best or OracleResult(0.0, None)


def random_admission_instance(rng: np.random.Generator):
    """Small instance: at most 6 new prefills and 2 TPOT tiers."""
    model = SMALL_MODELS[int(rng.integers(len(SMALL_MODELS)))]
    tiers = sorted(rng.choice([0.03, 0.05, 0.08, 0.1], size=int(rng.integers(1, 3)), replace=False).tolist())
    now = 0.0
    running = []
    for k in range(int(rng.integers(0, 5))):
        tpot = float(rng.choice(tiers))
        running.append(
            RunningRequest(
                f"run{k}",
                tpot,
                decode_left=int(rng.integers(1, 50)),
                last_emission=round(float(-rng.uniform(0, tpot)), 3),
            )
        )
    if rng.random() < 0.3:
        running.append(
            RunningRequest(
                "runp",
                float(rng.choice(tiers)),
                prefill_left=int(rng.integers(10, 300)),
                deadline=round(float(rng.uniform(0.05, 0.3)), 3),
                decode_left=int(rng.integers(1, 50)),
            )
        )
    if rng.random() < 0.2:
        t = float(rng.choice(tiers))
        running.append(RunningRequest("runw", t, decode_left=20, last_emission=round(float(rng.uniform(0.01, 0.2)), 3)))
    new = []
    for k in range(int(rng.integers(1, 7))):
        has_decode = rng.random() < 0.9
        new.append(
            PlanItem(
                f"new{k}",
                deadline=round(float(rng.uniform(0.02, 0.6)), 3),
                prefill_tokens=int(rng.integers(10, 1200)),
                tpot=float(rng.choice(tiers)) if has_decode else math.inf,
                memory_units=int(rng.integers(1, 6)),
                value=float(rng.integers(1, 4)),
                decode_tokens=int(rng.integers(1, 100)) if has_decode else 0,
            )
        )
    memory = int(rng.integers(3, 25))
    return model, running, new, now, memory


# --------------------------------------------------------------------------
# Speculation lengths by exhaustive search


def acceptance_sum(sl: int, alpha: float) -> float:
    return sum(alpha**k for k in range(sl))


def exhaustive_spec(tiers, alpha: float, model: PerfModel, sl_max: int = 8):
    """Best ``(throughput, lengths)`` over every length vector, or None."""
    active = [(t, n) for t, n in tiers if n > 0]
    best = None
    for lengths in itertools.product(range(1, sl_max + 1), repeat=len(active)):
        batch_time = min(t * acceptance_sum(sl, alpha) for (t, _), sl in zip(active, lengths))
        step = max(lengths)
        try:
            cap = model.time2bs_bisect(batch_time, step)
        except InfeasibleBudgetError:
            continue
        budget = cap - sum(n * sl for (_, n), sl in zip(active, lengths))
        if budget < 0:
            continue
        thpt = budget / batch_time
        if best is None or thpt > best[0]:
            best = (thpt, lengths)
    return best


# --------------------------------------------------------------------------
# Random small simulations


def random_sim_case(rng: np.random.Generator):
    """A short trace of prefill/decode chains with random SLO tiers and memory."""
    from sloplan.dp_scheduler import SchedulerConfig
    from sloplan.tiers_router import BACKUP_BEST_EFFORT, BACKUP_DECLINE, RoutingPolicy
    from sloplan.workload import DECODE, PREFILL, RequestSpec, SloConfig, StageSpec

    model = SMALL_MODELS[int(rng.integers(len(SMALL_MODELS)))]
    ntiers = int(rng.integers(1, 3))
    tpots = sorted(rng.choice([0.03, 0.05, 0.08, 0.1, 0.2], ntiers, replace=False).tolist())
    slows = sorted(rng.choice([2.0, 3.0, 4.0, 6.0], ntiers, replace=False).tolist())
    slo = SloConfig(tuple(tpots), tuple(slows), int(rng.choice([1, 5, 10])))
    reqs = []
    for k in range(int(rng.integers(3, 16))):
        stages = [StageSpec(PREFILL, int(rng.integers(5, 1500)), int(rng.integers(ntiers)))]
        if rng.random() < 0.25:
            stages.append(StageSpec(DECODE, int(rng.integers(5, 150)), int(rng.integers(ntiers))))
        stages.append(StageSpec(DECODE, int(rng.integers(1, 120)), int(rng.integers(ntiers))))
        reqs.append(RequestSpec(f"q{k:03d}", round(float(rng.uniform(0, 2.0)), 6), tuple(stages)))
    need = sum(r.memory_units for r in reqs)
    memory = int(max(max(r.memory_units for r in reqs), need * rng.uniform(0.2, 1.2)))
    sched = SchedulerConfig(
        timeout=float(rng.choice([0.05, 0.1, 0.2])),
        thresh_new=int(rng.integers(0, 5)),
        thresh_finished=int(rng.integers(0, 5)),
    )
    replicas = int(rng.choice([1, 1, 2]))
    policy = RoutingPolicy(replicas, int(rng.integers(0, 2)), BACKUP_BEST_EFFORT if rng.random() < 0.7 else BACKUP_DECLINE)
    return model, slo, reqs, memory, sched, policy
