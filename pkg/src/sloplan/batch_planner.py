"""Partial-batch formation: how much prefill budget a time gap yields.

Two solvers share one contract: given a gap and the decoders that must keep
their TPOT inside it, tile the gap with batches, give every decoder the
tokens it needs, and report what is left over for prefill.

Autoregressive serving follows dynamic batch-size tuning: the batch cadence
is the tightest TPOT among the decoders present (capped by the latency of a
max-size chunk), and every batch is as large as that cadence allows.  A
decoder is served in the first batch of a gap and afterwards only in the
batches where deferring it one more batch would stretch its inter-token gap
past its TPOT.

Speculative serving picks one speculation length per decode tier so that
prefill throughput is maximal while each tier's expected token rate still
meets its TPOT.
"""

from __future__ import annotations

import functools
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InfeasibleBudgetError, NoFeasiblePlanError
from .perf_model import TIME_EPS, PerfModel

DEFAULT_MAX_CHUNK = 2048
DEFAULT_SL_MAX = 8


@dataclass
class PartialBatch:
    """A planned batch slot with its decode allocations.

    ``duration`` is the slot length the plan reserves; the batch never runs
    longer than that under the model.
    """

    total_budget: int
    decode_allocations: dict[str, int]
    prefill_budget: int
    duration: float
    spec_step: int = 0

    def __post_init__(self):
        assert self.prefill_budget >= 0
        assert sum(self.decode_allocations.values()) + self.prefill_budget == self.total_budget


@dataclass
class Batch:
    """One forward pass: ``(request_id, kind, tokens)`` entries."""

    entries: list[tuple[str, str, int]]
    spec_step: int
    predicted_latency: float
    capacity: int = 0  # token capacity of the planned slot
    slot: float = 0.0  # planned slot duration
    start: float = 0.0
    end: float = 0.0

    @property
    def num_tokens(self) -> int:
        return sum(t for _, _, t in self.entries)

    def to_dict(self) -> dict:
        return {
            "entries": [list(e) for e in self.entries],
            "spec_step": self.spec_step,
            "predicted_latency": self.predicted_latency,
            "capacity": self.capacity,
            "start": self.start,
            "end": self.end,
        }


@dataclass
class PlanResult:
    prefill_budget: int
    batches: list[PartialBatch]
    feasible: bool = True
    mode: str = "ar"

    @property
    def duration(self) -> float:
        return sum(b.duration for b in self.batches)


@functools.lru_cache(maxsize=1 << 16)
def slot_capacity(model: PerfModel, duration: float, spec_step: int = 0) -> int:
    """Memoized ``time2bs``; planners ask for the same slot lengths repeatedly."""
    return model.time2bs(duration, spec_step)


@functools.lru_cache(maxsize=1 << 16)
def _tiling(gap: float, cadence: float, model: PerfModel, head: float | None, remainder: bool = True):
    slots = tuple(tile_slots(gap, cadence, model, head, remainder))
    return slots, tuple(slot_capacity(model, d) for d in slots)


@functools.lru_cache(maxsize=1 << 16)
def _pattern_cached(gap: float, cadence: float, model: PerfModel, head: float | None, tpot: float, remainder: bool = True):
    slots, _ = _tiling(gap, cadence, model, head, remainder)
    return tuple(_service_pattern(slots, cadence, tpot))


def chunk_time(model: PerfModel, max_chunk: int) -> float:
    return model.predict(max(1, max_chunk), 0)


def slot_duration(min_tpot: float, model: PerfModel, max_chunk: int) -> float:
    return min(min_tpot, chunk_time(model, max_chunk))


def tile_slots(
    gap: float, cadence: float, model: PerfModel, head: float | None = None, remainder: bool = True
) -> list[float]:
    """Slot durations covering ``gap``: full cadence slots plus a trailing remainder.

    ``head`` shortens the first slot (used when a running decoder's next
    token is due sooner than one full cadence).  A remainder too short to run
    even a single token is dropped, as is any remainder when ``remainder`` is
    false; later batches then simply start earlier.
    """
    if gap <= TIME_EPS:
        return []
    t_min = model.predict(1, 0)
    slots: list[float] = []
    rest = gap
    if head is not None and head < cadence:
        first = min(head, rest)
        if first + TIME_EPS >= t_min:
            slots.append(first)
        rest -= first
    k = int(math.floor((rest + TIME_EPS) / cadence))
    slots.extend([cadence] * k)
    rem = rest - k * cadence
    if remainder and rem + TIME_EPS >= t_min and rem > TIME_EPS:
        slots.append(rem)
    return slots


def _service_pattern(slots: Sequence[float], cadence: float, tpot: float) -> list[bool]:
    """Which slots serve a decoder of the given TPOT (phase-free rule)."""
    served = []
    last = None
    end = 0.0
    for i, d in enumerate(slots):
        end += d
        if last is None:
            serve = True
        else:
            next_end = end + (slots[i + 1] if i + 1 < len(slots) else cadence)
            serve = next_end > last + tpot + TIME_EPS
        if serve:
            last = end
        served.append(serve)
    return served


def _tier_budget(gap, cadence, active, model, head, remainder):
    slots, caps = _tiling(gap, cadence, model, head, remainder)
    decode = [0] * len(slots)
    for tpot, n in active:
        for i, s in enumerate(_pattern_cached(gap, cadence, model, head, tpot, remainder)):
            if s:
                decode[i] += n
    total = 0
    for cap, dec in zip(caps, decode):
        if cap < dec:
            return None
        total += cap - dec
    return total


def pb_star_ar(
    gap: float,
    counts: Sequence[tuple[float, int]],
    model: PerfModel,
    max_chunk: int = DEFAULT_MAX_CHUNK,
    head: float | None = None,
) -> int | None:
    """Prefill budget of ``gap`` for decoders given as ``(tpot, count)`` pairs.

    Same schedule as :func:`form_batches_ar`, evaluated per tier instead of per
    request.  A trailing remainder slot too small for the decoders it would
    have to serve is left idle.  Returns ``None`` when some full batch cannot
    fit its decode tokens.
    """
    active = [(t, n) for t, n in counts if n > 0]
    cadence = slot_duration(min((t for t, _ in active), default=math.inf), model, max_chunk)
    budget = _tier_budget(gap, cadence, active, model, head, True)
    if budget is None:
        budget = _tier_budget(gap, cadence, active, model, head, False)
    return budget


def _heap_batches(slots, cadence, decoders, model):
    seq = itertools.count()
    # (deadline, seq, id, tpot); -inf forces service in the first batch.
    queue = [(-math.inf, next(seq), rid, tpot) for rid, tpot in decoders]
    heapq.heapify(queue)
    batches = []
    feasible = True
    end = 0.0
    for i, d in enumerate(slots):
        end += d
        next_end = end + (slots[i + 1] if i + 1 < len(slots) else cadence)
        cap = slot_capacity(model, d)
        alloc: dict[str, int] = {}
        served = []
        while queue and queue[0][0] + TIME_EPS < next_end:
            _, _, rid, tpot = heapq.heappop(queue)
            alloc[rid] = 1
            served.append((end + tpot, next(seq), rid, tpot))
        for item in served:
            heapq.heappush(queue, item)
        if len(alloc) > cap:
            feasible = False
            cap = len(alloc)
        batches.append(PartialBatch(cap, alloc, cap - len(alloc), d))
    return batches, feasible


def form_batches_ar(
    gap: float,
    decoders: Sequence[tuple[str, float]],
    model: PerfModel,
    max_chunk: int = DEFAULT_MAX_CHUNK,
    head: float | None = None,
) -> PlanResult:
    """Partial batches for an autoregressive gap.

    ``decoders`` are ``(request_id, tpot)`` pairs.  Decoders wait in a
    priority queue keyed by the latest time their next token may be emitted;
    a batch pops every decoder whose deadline falls before the end of the
    following batch.
    """
    cadence = slot_duration(min((t for _, t in decoders), default=math.inf), model, max_chunk)
    batches, feasible = _heap_batches(tile_slots(gap, cadence, model, head), cadence, decoders, model)
    if not feasible:
        trimmed = tile_slots(gap, cadence, model, head, remainder=False)
        alt, ok = _heap_batches(trimmed, cadence, decoders, model)
        if ok:
            batches, feasible = alt, ok
    budget = sum(b.prefill_budget for b in batches)
    return PlanResult(budget, batches, feasible, "ar")


def _tier_batches(gap, cadence, groups, model, head, remainder):
    slots, caps = _tiling(gap, cadence, model, head, remainder)
    patterns = {t: _pattern_cached(gap, cadence, model, head, t, remainder) for t in groups}
    batches = []
    feasible = True
    for i, (d, cap) in enumerate(zip(slots, caps)):
        alloc = {rid: 1 for t, ids in groups.items() if patterns[t][i] for rid in ids}
        if len(alloc) > cap:
            feasible = False
            cap = len(alloc)
        batches.append(PartialBatch(cap, alloc, cap - len(alloc), d))
    return batches, feasible


def form_batches_tiered(
    gap: float,
    decoders: Sequence[tuple[str, float]],
    model: PerfModel,
    max_chunk: int = DEFAULT_MAX_CHUNK,
    head: float | None = None,
) -> PlanResult:
    """Same batches as :func:`form_batches_ar`, built from the per-tier
    service patterns instead of a per-request queue (much faster for large
    decoder sets)."""
    cadence = slot_duration(min((t for _, t in decoders), default=math.inf), model, max_chunk)
    groups: dict[float, list[str]] = {}
    for rid, t in decoders:
        groups.setdefault(t, []).append(rid)
    batches, feasible = _tier_batches(gap, cadence, groups, model, head, True)
    if not feasible:
        alt, ok = _tier_batches(gap, cadence, groups, model, head, False)
        if ok:
            batches, feasible = alt, ok
    return PlanResult(sum(b.prefill_budget for b in batches), batches, feasible, "ar")


def fixed_cap_budget(
    gap: float,
    num_decoders: int,
    model: PerfModel,
    tightest_tpot: float,
    max_chunk: int = DEFAULT_MAX_CHUNK,
) -> int | None:
    """Budget when every batch is capped by the tightest configured TPOT and
    every decoder takes a token in every batch, regardless of who is running.
    A remainder slot that cannot hold all decoders is left idle."""
    cadence = slot_duration(tightest_tpot, model, max_chunk)
    for remainder in (True, False):
        total = 0
        for d in tile_slots(gap, cadence, model, remainder=remainder):
            cap = slot_capacity(model, d)
            if cap < num_decoders:
                total = None
                break
            total += cap - num_decoders
        if total is not None:
            return total
    return None


# --------------------------------------------------------------------------
# Speculative decoding


def acceptance(sl: int, alpha: float) -> float:
    """Expected tokens produced per decode entry with speculation length ``sl``."""
    if sl < 1:
        raise ValueError("speculation length must be >= 1")
    if alpha <= 0.0:
        return 1.0
    if alpha >= 1.0:
        return float(sl)
    return (1.0 - alpha**sl) / (1.0 - alpha)


@dataclass
class SpecPlan:
    lengths: dict[float, int]  # tpot -> speculation length
    alpha: float
    batch_time: float
    prefill_throughput: float
    prefill_budget: int  # per batch
    spec_step: int


def spec_objective(
    lengths: Sequence[int],
    tiers: Sequence[tuple[float, int]],
    alpha: float,
    model: PerfModel,
) -> tuple[float, float, int, int] | None:
    """(throughput, batch_time, budget, spec_step) for one length vector, or None."""
    active = [(t, n, sl) for (t, n), sl in zip(tiers, lengths) if n > 0]
    if not active:
        return None
    batch_time = min(t * acceptance(sl, alpha) for t, _, sl in active)
    spec_step = max(sl for _, _, sl in active)
    try:
        cap = model.time2bs(batch_time, spec_step)
    except InfeasibleBudgetError:
        return None
    budget = cap - sum(n * sl for _, n, sl in active)
    if budget < 0:
        return None
    return budget / batch_time, batch_time, budget, spec_step


def _min_length_reaching(target: float, tpot: float, alpha: float, sl_max: int) -> int | None:
    """Smallest sl with tpot * Acc(sl) >= target, in closed form."""
    x = target / tpot
    if x <= 1.0 + 1e-12:
        return 1
    if alpha <= 0.0:
        return None
    if alpha >= 1.0:
        sl = math.ceil(x - 1e-12)
    else:
        rhs = 1.0 - x * (1.0 - alpha)
        if rhs <= 0:
            return None
        sl = max(1, math.ceil(math.log(rhs) / math.log(alpha) - 1e-12))
    while sl > 1 and tpot * acceptance(sl - 1, alpha) >= target - 1e-15:
        sl -= 1
    while sl <= sl_max and tpot * acceptance(sl, alpha) < target - 1e-15:
        sl += 1
    return sl if sl <= sl_max else None


def solve_spec_lengths(
    counts: Sequence[tuple[float, int]],
    alpha: float,
    model: PerfModel,
    sl_max: int = DEFAULT_SL_MAX,
) -> SpecPlan:
    """Per-tier speculation lengths maximizing prefill throughput.

    Enumerates the tier whose TPOT binds the batch time together with its
    length; every other tier then takes the smallest length whose expected
    rate still meets its TPOT.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if sl_max < 1:
        raise ValueError("sl_max must be >= 1")
    tiers = [(float(t), int(n)) for t, n in counts]
    active_idx = [i for i, (_, n) in enumerate(tiers) if n > 0]
    if not active_idx:
        raise NoFeasiblePlanError("no decoders to speculate for")
    best = None
    for b in active_idx:
        tpot_b = tiers[b][0]
        for sl_b in range(1, sl_max + 1):
            target = tpot_b * acceptance(sl_b, alpha)
            lengths = [1] * len(tiers)
            ok = True
            for i in active_idx:
                if i == b:
                    lengths[i] = sl_b
                    continue
                sl = _min_length_reaching(target, tiers[i][0], alpha, sl_max)
                if sl is None:
                    ok = False
                    break
                lengths[i] = sl
            if not ok:
                continue
            res = spec_objective(lengths, tiers, alpha, model)
            if res is None:
                continue
            key = (res[0], -sum(lengths), tuple(-x for x in lengths))
            if best is None or key > best[0]:
                best = (key, lengths, res)
    if best is None:
        raise NoFeasiblePlanError("speculation leaves no nonnegative prefill budget")
    _, lengths, (thpt, batch_time, budget, spec_step) = best
    return SpecPlan(
        lengths={tiers[i][0]: lengths[i] for i in active_idx},
        alpha=alpha,
        batch_time=batch_time,
        prefill_throughput=thpt,
        prefill_budget=budget,
        spec_step=spec_step,
    )


def tier_counts(decoders: Iterable[tuple[str, float]]) -> list[tuple[float, int]]:
    counts: dict[float, int] = {}
    for _, t in decoders:
        counts[t] = counts.get(t, 0) + 1
    return sorted(counts.items())


def pb_star_spec(
    gap: float,
    counts: Sequence[tuple[float, int]],
    alpha: float,
    model: PerfModel,
    sl_max: int = DEFAULT_SL_MAX,
) -> tuple[int, SpecPlan] | None:
    """Speculative prefill budget of ``gap`` or ``None`` if speculation is infeasible.

    Speculative batches are not subject to the prefill chunk cap: their size
    is set by the batch time the slowest-accepting tier allows.
    """
    if gap <= TIME_EPS:
        return None
    try:
        plan = solve_spec_lengths(counts, alpha, model, sl_max)
    except NoFeasiblePlanError:
        return None
    k = int(math.floor((gap + TIME_EPS) / plan.batch_time))
    return k * plan.prefill_budget, plan


def form_batches_spec(
    gap: float,
    decoders: Sequence[tuple[str, float]],
    alpha: float,
    model: PerfModel,
    sl_max: int = DEFAULT_SL_MAX,
    max_chunk: int = DEFAULT_MAX_CHUNK,
    head: float | None = None,
) -> PlanResult:
    """Speculative partial batches, falling back to autoregressive when that
    leaves more prefill budget (or speculation is infeasible)."""
    ar = form_batches_tiered(gap, decoders, model, max_chunk, head)
    if not decoders or not 0.0 < alpha < 1.0:
        return ar
    spec = pb_star_spec(gap, tier_counts(decoders), alpha, model, sl_max)
    if spec is None or (ar.feasible and spec[0] <= ar.prefill_budget):
        return ar
    _, plan = spec
    k = int(math.floor((gap + TIME_EPS) / plan.batch_time))
    per_batch = plan.prefill_budget
    batches = []
    for _ in range(k):
        alloc = {rid: plan.lengths[t] for rid, t in decoders}
        total = per_batch + sum(alloc.values())
        batches.append(PartialBatch(total, alloc, per_batch, plan.batch_time, plan.spec_step))
    return PlanResult(k * per_batch, batches, True, "spec")
