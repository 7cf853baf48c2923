"""Multi-SLO admission control and batch planning by dynamic programming.

Pending prefills (new requests plus running requests that still have
prefill work) are sorted by prefill deadline.  A DP state records the last
admitted prefill, the memory already committed and the number of admitted
decoders per TPOT; its labels are Pareto-optimal ``(value, prefill budget)``
pairs, where the budget is what remains at that deadline after every
admitted prefill so far has been paid for.  Moving from the state of prefill
``j`` to prefill ``i`` earns the budget that the gap between the two
deadlines yields under the decoders admitted up to ``j`` and spends
``p_i``.  Running requests are forced: no transition may skip one.

The chosen chain is then replayed gap by gap to materialize batches, with
prefill budget handed out earliest-deadline first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import batch_planner as bp
from .batch_planner import Batch
from .errors import InternalInconsistencyError
from .perf_model import TIME_EPS, PerfModel


@dataclass(frozen=True)
class PlanItem:
    """A prefill that must complete by ``deadline``."""

    id: str
    deadline: float
    prefill_tokens: int
    tpot: float  # planning TPOT of the decode that follows; inf if none
    memory_units: int = 1
    value: float = 1.0
    decode_tokens: int = 0
    forced: bool = False
    arrival: float = 0.0


@dataclass(frozen=True)
class RunningRequest:
    """Snapshot of an admitted request's progress.

    A request still in prefill has ``prefill_left > 0`` and a ``deadline``;
    a decoding request has ``decode_left > 0`` and ``last_emission``, the
    time its previous token was emitted (or its decode anchor).
    """

    id: str
    tpot: float
    prefill_left: int = 0
    deadline: float = math.inf
    last_emission: float | None = None
    decode_left: int = 0
    value: float = 1.0
    arrival: float = 0.0
    memory_units: int = 0

    @property
    def decoding(self) -> bool:
        return self.prefill_left == 0 and self.decode_left > 0 and math.isfinite(self.tpot)


@dataclass
class SchedulerConfig:
    mode: str = "ar"  # "ar" or "spec"
    alpha: float = 0.8
    sl_max: int = bp.DEFAULT_SL_MAX
    max_chunk: int = bp.DEFAULT_MAX_CHUNK
    gap_quantum: float = 1e-3
    timeout: float = 0.1
    thresh_new: int = 4
    thresh_finished: int = 4
    tail: float | None = None  # planned time after the last deadline; default 2 * timeout

    @property
    def tail_horizon(self) -> float:
        return self.tail if self.tail is not None else 2.0 * self.timeout


@dataclass
class SchedulePlan:
    admitted: list[str]
    declined: list[str]
    batches: list[Batch]
    horizon: float
    infeasible: bool = False
    value: float = 0.0
    deferred: list[str] = field(default_factory=list)  # neither admitted nor declined yet

    def to_dict(self) -> dict:
        return {
            "admitted": list(self.admitted),
            "declined": list(self.declined),
            "deferred": list(self.deferred),
            "horizon": self.horizon,
            "infeasible": self.infeasible,
            "value": self.value,
            "batches": [b.to_dict() for b in self.batches],
        }


Counts = tuple[tuple[float, int], ...]


def _counts_key(counts: dict[float, int]) -> Counts:
    return tuple(sorted((t, n) for t, n in counts.items() if n > 0))


class PbTable:
    """Memoized prefill budgets keyed by (quantized gap, decoder counts, head).

    Gaps and head slots are floored to the quantum so the memo stays small;
    flooring only removes budget, never adds it.
    """

    def __init__(self, model: PerfModel, config: SchedulerConfig | None = None):
        self.model = model
        self.config = config or SchedulerConfig()
        self._memo: dict = {}

    def quantize(self, t: float) -> float:
        q = self.config.gap_quantum
        if q <= 0:
            return max(0.0, t)
        return max(0, math.floor(t / q + 1e-9)) * q

    def budget(self, gap: float, counts: Counts, head: float | None = None) -> int | None:
        g = self.quantize(gap)
        h = None if head is None else self.quantize(head)
        key = (g, counts, h)
        try:
            return self._memo[key]
        except KeyError:
            pass
        if len(self._memo) > 200_000:
            self._memo.clear()
        cfg = self.config
        value = bp.pb_star_ar(g, counts, self.model, cfg.max_chunk, h)
        if cfg.mode == "spec" and counts and 0.0 < cfg.alpha < 1.0:
            spec = bp.pb_star_spec(g, counts, cfg.alpha, self.model, cfg.sl_max)
            if spec is not None and (value is None or spec[0] > value):
                value = spec[0]
        self._memo[key] = value
        return value

    def partial_batches(self, gap: float, decoders: Sequence[tuple[str, float]], head: float | None = None):
        g = self.quantize(gap)
        h = None if head is None else self.quantize(head)
        cfg = self.config
        if cfg.mode == "spec":
            return bp.form_batches_spec(g, decoders, cfg.alpha, self.model, cfg.sl_max, cfg.max_chunk, h)
        return bp.form_batches_tiered(g, decoders, self.model, cfg.max_chunk, h)


def pb_star(gap: float, counts, model: PerfModel, config: SchedulerConfig | None = None):
    """Maximal prefill budget of ``gap`` and the partial batches realizing it.

    ``counts`` maps TPOT (seconds) to the number of decoders at that TPOT.
    """
    table = PbTable(model, config)
    counts = dict(counts)
    decoders = [(f"d{t}_{k}", t) for t, n in sorted(counts.items()) for k in range(n)]
    res = table.partial_batches(gap, decoders)
    return res.prefill_budget, res.batches


@dataclass
class DpResult:
    now: float
    items: list[PlanItem]
    chain: list[int]
    running: list[RunningRequest]
    head: float | None
    infeasible: bool
    value: float
    table: PbTable


def _sorted_items(items: Iterable[PlanItem]) -> list[PlanItem]:
    return sorted(items, key=lambda it: (it.deadline, not it.forced, it.id))


def _head_limit(running: Sequence[RunningRequest], decoders, now: float, model: PerfModel) -> float | None:
    """Longest first batch that still meets every running decoder's next token."""
    limits = [
        r.last_emission + r.tpot - now
        for r in running
        if r.decoding and r.last_emission is not None and not _waiting_decoder(r, now)
    ]
    if not limits:
        return None
    head = min(limits)
    floor = model.predict(max(1, len(decoders)), 0)
    return max(head, floor)


def _waiting_decoder(r: RunningRequest, now: float) -> bool:
    # Prefill done ahead of its deadline: decoding starts at the anchor.
    return r.decoding and r.last_emission is not None and r.last_emission > now + TIME_EPS


def _active_decoders(running, now: float):
    return [(r.id, r.tpot) for r in running if r.decoding and not _waiting_decoder(r, now)]


def _prepare(running, new, now, model, config):
    forced = [
        PlanItem(
            id=r.id,
            deadline=r.deadline if r.prefill_left > 0 else r.last_emission,
            prefill_tokens=r.prefill_left,
            tpot=r.tpot,
            memory_units=0,
            value=0.0,
            decode_tokens=r.decode_left,
            forced=True,
            arrival=r.arrival,
        )
        for r in running
        if r.prefill_left > 0 or _waiting_decoder(r, now)
    ]
    items = _sorted_items(list(forced) + [it for it in new if not it.forced])
    decoders = _active_decoders(running, now)
    base: dict[float, int] = {}
    for _, t in decoders:
        base[t] = base.get(t, 0) + 1
    head = _head_limit(running, decoders, now, model)
    return items, decoders, base, head


def _item_prefix(items: list[PlanItem]):
    suffix = [0] * (len(items) + 1)
    for i in range(len(items) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + items[i].prefill_tokens
    last_forced = []
    lf = -1
    for i, it in enumerate(items):
        last_forced.append(lf)
        if it.forced:
            lf = i
    final_from = lf  # last forced index overall (-1 if none)
    return suffix, last_forced, final_from


def _add(counts: Counts, tpot: float) -> Counts:
    if not math.isfinite(tpot):
        return counts
    d = dict(counts)
    d[tpot] = d.get(tpot, 0) + 1
    return _counts_key(d)


def _dominated(label, labels) -> bool:
    v, n, pb, mem = label[:4]
    for o in labels:
        if o[0] >= v and o[1] >= n and o[2] >= pb and o[3] <= mem:
            return True
    return False


def _insert(bucket: list, label) -> None:
    if _dominated(label, bucket):
        return
    v, n, pb, mem = label[:4]
    bucket[:] = [o for o in bucket if not (v >= o[0] and n >= o[1] and pb >= o[2] and mem <= o[3])]
    bucket.append(label)


def solve_dp(
    running: Sequence[RunningRequest],
    new: Sequence[PlanItem],
    now: float,
    model: PerfModel,
    memory_available: int,
    config: SchedulerConfig | None = None,
    table: PbTable | None = None,
) -> DpResult:
    """Value-maximizing admission DP over prefill deadlines."""
    config = config or SchedulerConfig()
    table = table or PbTable(model, config)
    items, decoders, base, head = _prepare(running, new, now, model, config)
    n = len(items)
    suffix, last_forced, final_from = _item_prefix(items)
    tail = config.tail_horizon
    base_key = _counts_key(base)

    # states[i + 1][counts] -> labels (value, n_new, pb, mem, prev_i, prev_counts, prev_label)
    states: list[dict[Counts, list]] = [dict() for _ in range(n + 1)]
    states[0][base_key] = [(0.0, 0, 0, 0, None, None, None)]
    for i, it in enumerate(items):
        lf = last_forced[i]
        dst = states[i + 1]
        for j in range(lf, i):
            src = states[j + 1]
            if not src:
                continue
            t_j = now if j < 0 else items[j].deadline
            gap = max(0.0, it.deadline - t_j)
            h = head if j < 0 else None
            for counts, labels in src.items():
                gained = table.budget(gap, counts, h)
                if gained is None:
                    continue
                new_counts = _add(counts, it.tpot) if it.decode_tokens > 0 else counts
                for k, lab in enumerate(labels):
                    pb = lab[2] + gained - it.prefill_tokens
                    if pb < 0:
                        continue
                    mem = lab[3] + it.memory_units
                    if mem > memory_available:
                        continue
                    pb = min(pb, suffix[i + 1])
                    label = (
                        lab[0] + (0.0 if it.forced else it.value),
                        lab[1] + (0 if it.forced else 1),
                        pb,
                        mem,
                        j,
                        counts,
                        k,
                    )
                    _insert(dst.setdefault(new_counts, []), label)

    best = None
    for i in range(final_from, n):
        for counts, labels in states[i + 1].items():
            tail_head = head if i < 0 else None
            if table.budget(tail, counts, tail_head) is None:
                continue
            for k, lab in enumerate(labels):
                key = (lab[0], lab[1], -lab[3], -i)
                if best is None or key > best[0]:
                    best = (key, i, counts, k)

    if best is None:
        chain = [i for i, it in enumerate(items) if it.forced]
        return DpResult(now, items, chain, list(running), head, True, 0.0, table)

    chain = []
    _, i, counts, k = best
    value = states[i + 1][counts][k][0]
    while i is not None and i >= 0:
        chain.append(i)
        lab = states[i + 1][counts][k]
        i, counts, k = lab[4], lab[5], lab[6]
    chain.reverse()
    return DpResult(now, items, chain, list(running), head, False, value, table)


def solve_dp_throughput(
    running: Sequence[RunningRequest],
    new: Sequence[PlanItem],
    now: float,
    model: PerfModel,
    memory_available: int,
    config: SchedulerConfig | None = None,
    table: PbTable | None = None,
) -> DpResult:
    """Request-count objective: per (prefill, memory, counts, admitted) keep the
    largest remaining prefill budget."""
    config = config or SchedulerConfig()
    table = table or PbTable(model, config)
    items, decoders, base, head = _prepare(running, new, now, model, config)
    n = len(items)
    suffix, last_forced, final_from = _item_prefix(items)
    tail = config.tail_horizon

    # pb[i + 1][(mem, counts, n_new)] = (pb, prev_i, prev_key)
    pbs: list[dict] = [dict() for _ in range(n + 1)]
    pbs[0][(0, _counts_key(base), 0)] = (0, None, None)
    for i, it in enumerate(items):
        dst = pbs[i + 1]
        for j in range(last_forced[i], i):
            t_j = now if j < 0 else items[j].deadline
            gap = max(0.0, it.deadline - t_j)
            h = head if j < 0 else None
            for key, (pb, _, _) in pbs[j + 1].items():
                mem, counts, n_new = key
                gained = table.budget(gap, counts, h)
                if gained is None:
                    continue
                left = pb + gained - it.prefill_tokens
                m2 = mem + it.memory_units
                if left < 0 or m2 > memory_available:
                    continue
                left = min(left, suffix[i + 1])
                c2 = _add(counts, it.tpot) if it.decode_tokens > 0 else counts
                k2 = (m2, c2, n_new + (0 if it.forced else 1))
                if k2 not in dst or dst[k2][0] < left:
                    dst[k2] = (left, j, key)

    best = None
    for i in range(final_from, n):
        for key in pbs[i + 1]:
            mem, counts, n_new = key
            if table.budget(tail, counts, head if i < 0 else None) is None:
                continue
            rank = (n_new, -mem, -i)
            if best is None or rank > best[0]:
                best = (rank, i, key)
    if best is None:
        chain = [i for i, it in enumerate(items) if it.forced]
        return DpResult(now, items, chain, list(running), head, True, 0.0, table)
    _, i, key = best
    value = float(key[2])
    chain = []
    while i is not None and i >= 0:
        chain.append(i)
        _, j, prev = pbs[i + 1][key]
        i, key = j, prev
    chain.reverse()
    return DpResult(now, items, chain, list(running), head, False, value, table)


def reconstruct(result: DpResult, strict: bool = True) -> SchedulePlan:
    """Materialize the batches of a DP chain.

    Decode tokens follow the partial batches of every gap; prefill budget goes
    to admitted prefills in deadline order.  A prefill left unfinished at its
    deadline is a DP bug and raises unless the plan is already flagged
    infeasible.
    """
    table = result.table
    model = table.model
    cfg = table.config
    items = result.items
    chain = result.chain
    strict = strict and not result.infeasible

    decoders = _active_decoders(result.running, result.now)
    decode_left = {rid: 0 for rid, _ in decoders}
    decode_left.update({r.id: r.decode_left for r in result.running if r.decoding})
    prefill_left = {items[i].id: items[i].prefill_tokens for i in chain}
    order = sorted(chain, key=lambda i: (items[i].deadline, not items[i].forced, items[i].id))
    pending = [items[i].id for i in order if items[i].prefill_tokens > 0]

    boundaries = [result.now] + [max(result.now, items[i].deadline) for i in chain]
    horizon = boundaries[-1] + cfg.tail_horizon
    gaps = list(zip(boundaries, boundaries[1:] + [horizon]))

    batches: list[Batch] = []
    clock = result.now
    for g, (g_start, g_end) in enumerate(gaps):
        head = result.head if g == 0 else None
        part = table.partial_batches(g_end - g_start, decoders, head)
        for pbatch in part.batches:
            entries: list[tuple[str, str, int]] = []
            for rid, tokens in pbatch.decode_allocations.items():
                left = decode_left[rid]
                if left > 0:
                    # A speculative entry keeps its full length: the drafter
                    # may overshoot and the extra tokens are simply dropped.
                    entries.append((rid, "decode", tokens if pbatch.spec_step or tokens <= left else left))
                    decode_left[rid] = left - tokens if tokens < left else 0
            # Unused decode allocations become prefill budget.
            budget = pbatch.total_budget - sum(t for _, _, t in entries)
            while budget > 0 and pending:
                rid = pending[0]
                take = min(budget, prefill_left[rid])
                entries.append((rid, "prefill", take))
                prefill_left[rid] -= take
                budget -= take
                if prefill_left[rid] == 0:
                    pending.pop(0)
            if not entries:
                continue
            spec_step = max((t for _, k, t in entries if k == "decode"), default=0) if pbatch.spec_step else 0
            ntok = sum(t for _, _, t in entries)
            lat = model.predict(ntok, spec_step)
            batches.append(
                Batch(entries, spec_step, lat, pbatch.total_budget, pbatch.duration, clock, clock + lat)
            )
            clock += lat
        if g < len(chain):
            it = items[chain[g]]
            if prefill_left[it.id] > 0 and strict:
                raise InternalInconsistencyError(
                    f"prefill of {it.id} has {prefill_left[it.id]} tokens left at its deadline {it.deadline:.6f}"
                )
            if it.decode_tokens > 0 and math.isfinite(it.tpot):
                decoders.append((it.id, it.tpot))
                decode_left[it.id] = it.decode_tokens

    admitted_new = [items[i].id for i in chain if not items[i].forced]
    admitted = [r.id for r in result.running] + admitted_new
    chosen = set(admitted_new)
    declined = [it.id for it in items if not it.forced and it.id not in chosen]
    return SchedulePlan(admitted, declined, batches, horizon, result.infeasible, result.value)


def schedule(
    running: Sequence[RunningRequest],
    new: Sequence[PlanItem],
    now: float,
    model: PerfModel,
    memory_available: int,
    config: SchedulerConfig | None = None,
    table: PbTable | None = None,
) -> SchedulePlan:
    """Admission decisions and batches for the next planning horizon.

    ``memory_available`` is the memory the standard tier may still commit
    (total minus units already held by running standard requests).
    """
    res = solve_dp(running, new, now, model, memory_available, config, table)
    return reconstruct(res)


def schedule_throughput(
    running: Sequence[RunningRequest],
    new: Sequence[PlanItem],
    now: float,
    model: PerfModel,
    memory_available: int,
    config: SchedulerConfig | None = None,
    table: PbTable | None = None,
) -> SchedulePlan:
    res = solve_dp_throughput(running, new, now, model, memory_available, config, table)
    return reconstruct(res)


class SloScheduler:
    """Replica scheduler running the admission DP on every replan."""

    name = "slos"

    def __init__(self, model: PerfModel, config: SchedulerConfig | None = None, objective: str = "value"):
        if objective not in ("value", "count"):
            raise ValueError(f"unknown objective {objective!r}")
        self.model = model
        self.config = config or SchedulerConfig()
        self.objective = objective
        self.table = PbTable(model, self.config)

    def plan(self, running, new, now, memory_available) -> SchedulePlan:
        solve = solve_dp if self.objective == "value" else solve_dp_throughput
        return reconstruct(solve(running, new, now, self.model, memory_available, self.config, self.table))
