"""Reference schedulers without admission control.

Both admit every request that fits in memory and plan one batch per call,
so the executor asks again after every forward pass.

* ``PrefillGreedyScheduler`` runs pending prefills before anything else and
  lets decodes stall meanwhile (the classic continuous-batching policy).
* ``FixedCapScheduler`` caps every batch at the token count the tightest
  configured TPOT allows, gives each decoder one token per batch and fills
  the rest with prefill chunks in arrival order.

``AlwaysDeclineScheduler`` rejects every new request; it anchors the low
end of capacity searches.
"""

from __future__ import annotations

from typing import Sequence

from .batch_planner import DEFAULT_MAX_CHUNK, Batch
from .dp_scheduler import PlanItem, RunningRequest, SchedulePlan, SchedulerConfig
from .perf_model import PerfModel


def _admit_fcfs(new: Sequence[PlanItem], memory_available: int):
    admitted, deferred = [], []
    left = memory_available
    for it in sorted(new, key=lambda x: (x.arrival, x.id)):
        if not deferred and it.memory_units <= left:
            admitted.append(it)
            left -= it.memory_units
        else:
            deferred.append(it)
    return admitted, deferred


def _prefill_queue(running: Sequence[RunningRequest], admitted: Sequence[PlanItem]):
    queue = [(r.arrival, r.id, r.prefill_left) for r in running if r.prefill_left > 0]
    queue += [(it.arrival, it.id, it.prefill_tokens) for it in admitted]
    queue.sort()
    return [(rid, n) for _, rid, n in queue]


def _batch(entries, model: PerfModel, now: float) -> list[Batch]:
    if not entries:
        return []
    ntok = sum(t for _, _, t in entries)
    lat = model.predict(ntok, 0)
    return [Batch(entries, 0, lat, ntok, lat, now, now + lat)]


class _OneBatchScheduler:
    name = "baseline"

    def __init__(self, model: PerfModel, config: SchedulerConfig | None = None):
        self.model = model
        self.config = config or SchedulerConfig()

    def _entries(self, running, admitted) -> list[tuple[str, str, int]]:
        raise NotImplementedError

    def plan(self, running, new, now, memory_available) -> SchedulePlan:
        admitted, deferred = _admit_fcfs(new, memory_available)
        batches = _batch(self._entries(running, admitted), self.model, now)
        horizon = batches[-1].end if batches else now
        return SchedulePlan(
            admitted=[r.id for r in running] + [it.id for it in admitted],
            declined=[],
            batches=batches,
            horizon=horizon,
            deferred=[it.id for it in deferred],
        )


class PrefillGreedyScheduler(_OneBatchScheduler):
    name = "prefill-greedy"

    def __init__(self, model: PerfModel, config: SchedulerConfig | None = None, max_batch_tokens: int | None = None):
        super().__init__(model, config)
        self.max_batch_tokens = max_batch_tokens or 2 * DEFAULT_MAX_CHUNK

    def _entries(self, running, admitted):
        queue = _prefill_queue(running, admitted)
        if queue:
            entries, room = [], self.max_batch_tokens
            for rid, n in queue:
                if room <= 0:
                    break
                take = min(n, room)
                entries.append((rid, "prefill", take))
                room -= take
            return entries
        return [(r.id, "decode", 1) for r in running if r.decoding]


class FixedCapScheduler(_OneBatchScheduler):
    name = "fixed-cap"

    def __init__(self, model: PerfModel, config: SchedulerConfig | None = None, tightest_tpot: float = 0.05):
        super().__init__(model, config)
        self.tightest_tpot = tightest_tpot
        self.cap = model.time2bs(min(tightest_tpot, model.predict(self.config.max_chunk, 0)), 0)

    def _entries(self, running, admitted):
        entries = [(r.id, "decode", 1) for r in running if r.decoding]
        room = self.cap - len(entries)
        for rid, n in _prefill_queue(running, admitted):
            if room <= 0:
                break
            take = min(n, room)
            entries.append((rid, "prefill", take))
            room -= take
        return entries


class AlwaysDeclineScheduler(_OneBatchScheduler):
    name = "always-decline"

    def plan(self, running, new, now, memory_available) -> SchedulePlan:
        entries = [(r.id, "decode", 1) for r in running if r.decoding]
        queue = _prefill_queue(running, [])
        entries += [(rid, "prefill", n) for rid, n in queue]
        batches = _batch(entries, self.model, now)
        return SchedulePlan(
            admitted=[r.id for r in running],
            declined=[it.id for it in new],
            batches=batches,
            horizon=batches[-1].end if batches else now,
        )
