
import numpy as np
import pytest

from sloplan.baselines import AlwaysDeclineScheduler, FixedCapScheduler, PrefillGreedyScheduler
from sloplan.batch_planner import Batch
from sloplan.dp_scheduler import SchedulerConfig, SloScheduler
from sloplan.errors import CannotSatisfyError, UnknownRequestError
from sloplan.metrics import MetricsLog
from sloplan.perf_model import PerfModel
from sloplan.sim_executor import (
    Replica,
    RequestState,
    SimConfig,
    Simulation,
    _sample_accepted,
    execute_batch,
    preempt_best_effort,
    resume_prefill_tokens,
    run,
)
from sloplan.tiers_router import BACKUP_DECLINE, RoutingPolicy
from sloplan.workload import DECODE, PREFILL, RequestSpec, SloConfig, StageSpec, derive_deadlines

MODEL = PerfModel(((1e-4, 0.0, 0.01),))
SLO = SloConfig((0.05, 0.1), (3.0, 5.0))


def chat(rid, arrival=0.0, prompt=64, out=5, dtier=0, memory=0):
    return RequestSpec(rid, arrival, (StageSpec(PREFILL, prompt, 1), StageSpec(DECODE, out, dtier)), memory_units=memory)


def state(req):
    st = RequestState(req, derive_deadlines(req, SLO, MODEL))
    return st


def replica(memory=1000, alpha=0.8, seed=0):
    return Replica(0, SloScheduler(MODEL), MODEL, SLO, SimConfig(memory_total=memory, alpha=alpha), seed)


def test_single_prefill_wall_time():
    sim = Simulation([chat("a", 0.5)], [SloScheduler(MODEL)], MODEL, SLO).run()
    st = sim.states["a"]
    assert st.prefill_done[0] == pytest.approx(0.5 + 64e-4 + 0.01)
    assert len(st.emissions[1]) == 5
    assert st.finished_at is not None


def test_speculative_entry_with_certain_acceptance():
    rep = replica(alpha=1.0)
    st = state(chat("a", out=10))
    st.stage, st.anchors[1] = 1, 0.0
    rep._allocate(st)
    out = execute_batch(rep, Batch([("a", "decode", 4)], 4, 0.0), 0.0, {"a": st})
    assert out.accepted == {"a": 4}
    assert st.done == 4
    assert out.wall_time == pytest.approx(MODEL.predict(4, 4))


def test_accepted_tokens_mean():
    rng = np.random.default_rng(0)
    draws = [_sample_accepted(rng, 4, 0.5) for _ in range(10_000)]
    assert np.mean(draws) == pytest.approx(1.875, rel=0.02)
    assert min(draws) == 1 and max(draws) == 4


def test_accepted_tokens_capped_by_stage():
    rep = replica(alpha=1.0)
    st = state(chat("a", out=2))
    st.stage, st.anchors[1] = 1, 0.0
    rep._allocate(st)
    out = execute_batch(rep, Batch([("a", "decode", 5)], 5, 0.0), 0.0, {"a": st})
    assert out.accepted == {"a": 2}
    assert st.finished


def test_unknown_request_in_batch():
    with pytest.raises(UnknownRequestError):
        execute_batch(replica(), Batch([("ghost", "prefill", 3)], 0, 0.0), 0.0, {})


def test_noise_bounds_wall_time():
    rep = Replica(0, SloScheduler(MODEL), MODEL, SLO, SimConfig(noise=0.02), 3)
    st = state(chat("a", prompt=5000))
    rep._allocate(st)
    base = MODEL.predict(100)
    walls = [execute_batch(rep, Batch([("a", "prefill", 100)], 0, 0.0), 0.0, {"a": st}).wall_time for _ in range(200)]
    assert min(walls) >= base * 0.98 and max(walls) <= base * 1.02
    assert max(walls) > min(walls)


def _resident_be(rep, rid, memory, prompt=400, decoded=0):
    st = state(chat(rid, prompt=prompt, out=50, memory=memory))
    st.tier = "best_effort"
    if decoded:
        st.stage, st.done = 1, decoded
    rep.best_effort.append(st)
    rep._allocate(st)
    return st


def test_preempt_largest_first():
    rep = replica(memory=100)
    a = _resident_be(rep, "a", 20)
    b = _resident_be(rep, "b", 50)
    c = _resident_be(rep, "c", 25)
    assert rep.memory_free == 5
    assert preempt_best_effort(rep, 40) == ["b"]
    assert not b.resident and a.resident and c.resident
    assert b.preemptions == 1
    rep.check_memory()


def test_preempt_until_enough():
    rep = replica(memory=100)
    _resident_be(rep, "a", 30)
    _resident_be(rep, "b", 30)
    _resident_be(rep, "c", 30)
    assert preempt_best_effort(rep, 60) == ["a", "b"]


def test_preempt_cannot_satisfy():
    rep = replica(memory=100)
    _resident_be(rep, "a", 30)
    with pytest.raises(CannotSatisfyError):
        preempt_best_effort(rep, 101)


def test_resume_rebuilds_whole_context():
    rep = replica(memory=100)
    st = _resident_be(rep, "a", 60, prompt=400, decoded=20)
    preempt_best_effort(rep, 80)
    assert st.recompute == 420
    assert resume_prefill_tokens(st) == 420


def test_resume_during_prefill_includes_rest():
    rep = replica(memory=100)
    st = _resident_be(rep, "a", 60, prompt=400)
    st.done = 150
    preempt_best_effort(rep, 80)
    assert resume_prefill_tokens(st) == 150 + 250


def test_empty_trace():
    log = run([], SloScheduler(MODEL), MODEL, SLO)
    assert log.records == []
    assert log.summary()["attainment"] == 1.0


def test_declined_request_served_best_effort():
    log = run([chat("a")], AlwaysDeclineScheduler(MODEL), MODEL, SLO)
    rec = log.records[0]
    assert rec.tier == "best_effort" and rec.demoted
    assert rec.finished_at is not None


def test_declined_request_dropped():
    log = run([chat("a")], AlwaysDeclineScheduler(MODEL), MODEL, SLO, policy=RoutingPolicy(1, 0, BACKUP_DECLINE))
    assert log.records[0].tier == "dropped"
    assert log.records[0].finished_at is None


def test_tool_loop_waits_for_external_delay():
    req = RequestSpec(
        "t",
        0.0,
        (
            StageSpec(PREFILL, 100, 0),
            StageSpec(DECODE, 3, 0),
            StageSpec(PREFILL, 50, 0, external_delay=0.25),
            StageSpec(DECODE, 3, 1),
        ),
    )
    sim = Simulation([req], [SloScheduler(MODEL)], MODEL, SLO).run()
    st = sim.states["t"]
    decode_end = st.emissions[1][-1]
    assert st.available_at[2] == pytest.approx(decode_end + 0.25)
    assert st.prefill_done[2] >= st.available_at[2]
    assert st.prefill_done[2] <= st.stage_deadline[2] + 1e-9
    assert MetricsLog.from_simulation(sim).records[0].attained


def test_decode_to_decode_anchor_is_last_emission():
    req = RequestSpec("r", 0.0, (StageSpec(PREFILL, 100, 0), StageSpec(DECODE, 12, 0), StageSpec(DECODE, 8, 1)))
    sim = Simulation([req], [SloScheduler(MODEL)], MODEL, SLO).run()
    st = sim.states["r"]
    assert st.anchors[2] == st.emissions[1][-1]
    assert st.anchors[1] == pytest.approx(max(st.prefill_done[0], st.stage_deadline[0]))


def make_trace(n=30, seed=0):
    rng = np.random.default_rng(seed)
    return [
        chat(f"q{k:02d}", round(float(rng.uniform(0, 2)), 6), int(rng.integers(50, 2000)), int(rng.integers(1, 40)), int(rng.integers(2)))
        for k in range(n)
    ]


@pytest.mark.parametrize("make", [SloScheduler, PrefillGreedyScheduler, FixedCapScheduler, AlwaysDeclineScheduler])
def test_memory_conserved(make):
    trace = make_trace()
    need = sum(r.memory_units for r in trace)
    sim = Simulation(trace, [make(MODEL)], MODEL, SLO, SimConfig(memory_total=need // 3)).run()
    sim.replicas[0].check_memory()
    assert sim.replicas[0].memory_free == need // 3


def test_deterministic_with_noise():
    trace = make_trace(seed=1)
    cfg = SimConfig(noise=0.05, alpha=0.7)
    sched = SchedulerConfig(mode="spec", alpha=0.7)
    a = run(trace, SloScheduler(MODEL, sched), MODEL, SLO, cfg, seed=4).to_jsonl()
    b = run(trace, SloScheduler(MODEL, sched), MODEL, SLO, cfg, seed=4).to_jsonl()
    c = run(trace, SloScheduler(MODEL, sched), MODEL, SLO, cfg, seed=5).to_jsonl()
    assert a == b and a != c


def test_noiseless_admitted_requests_attain():
    log = run(make_trace(40, seed=2), SloScheduler(MODEL), MODEL, SLO, SimConfig(memory_total=400))
    assert log.standard()
    assert all(r.attained for r in log.standard())


def test_event_log(tmp_path):
    from sloplan.sim_executor import write_event_log

    sim = Simulation(make_trace(5), [SloScheduler(MODEL)], MODEL, SLO, SimConfig(record_events=True)).run()
    path = tmp_path / "events.jsonl"
    write_event_log(sim, path)
    kinds = {__import__("json").loads(line)["event"] for line in path.read_text().splitlines()}
    assert {"offer", "admit", "plan", "batch", "finish"} <= kinds
