import json

import pytest
from hypothesis import given, strategies as st

from sloplan.baselines import AlwaysDeclineScheduler
from sloplan.errors import BoundsNotBracketingError, InvalidParametersError
from sloplan.metrics import (
    MetricsLog,
    RequestRecord,
    StageRecord,
    attainment,
    capacity_search,
    disagg_goodput,
    disagg_ratio,
    overall_attainment,
    scenario_evaluator,
    window_samples,
)
from sloplan.perf_model import PerfModel
from sloplan.workload import DECODE, PREFILL, builtin_scenario


def record(rid, ok=True, tier="standard"):
    pre = StageRecord(PREFILL, 10, 0.0, deadline=1.0, done_at=0.5, met=True)
    dec = StageRecord(DECODE, 10, 0.5, tpot=0.1, anchor=1.0, emitted=10, samples=[0.1 if ok else 0.12], met=ok)
    return RequestRecord(rid, tier, tier != "standard", 0, 0, 0.0, 2.0, 0, [pre, dec])


def test_one_of_four_misses():
    log = MetricsLog([record("a"), record("b"), record("c", ok=False), record("d")])
    assert attainment(log) == 0.75
    assert log.summary()["window_violation_rate"] == 0.25


def test_best_effort_excluded_from_attainment():
    log = MetricsLog([record("a"), record("b", tier="best_effort"), record("c", tier="dropped")])
    assert attainment(log) == 1.0
    assert overall_attainment(log) == pytest.approx(1 / 3)


def test_unfinished_request_not_attained():
    r = record("a")
    r.finished_at = None
    assert not r.attained


@given(st.lists(st.sampled_from([True, False]), max_size=20), st.randoms())
def test_attainment_order_invariant(flags, rnd):
    recs = [record(f"r{k}", ok) for k, ok in enumerate(flags)]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert attainment(MetricsLog(recs)) == attainment(MetricsLog(shuffled))


def test_window_samples():
    em = [0.1 * k for k in range(1, 26)]
    assert window_samples(0.0, em, 10) == pytest.approx([0.1, 0.1, 0.1])
    assert window_samples(1.0, [1.05, 1.3], 10) == pytest.approx([0.15])
    assert window_samples(0.0, [], 10) == []


def test_window_tolerates_early_tokens():
    # A burst inside the window is fine as long as the window average holds.
    em = [0.0 + 0.01 * k for k in range(1, 10)] + [1.0]
    assert window_samples(0.0, em, 10) == pytest.approx([0.1])


def test_disagg_ratio_examples():
    assert disagg_ratio(1000, 250, 0.1, 0.05) == pytest.approx(2.0)
    assert disagg_ratio(1000, 250, 0.1, 0.0) == pytest.approx(4.0)
    assert disagg_ratio(1000, 250, 0.1, 0.1) == 0.0
    with pytest.raises(InvalidParametersError):
        disagg_ratio(1000, 250, 0.1, 0.2)


def test_disagg_goodput_examples():
    assert disagg_goodput(10000, 1000, 250, 0.1, 0.05) == pytest.approx(6.6667, rel=1e-4)
    assert disagg_goodput(10000, 1000, 250, 0.1, 0.0) == pytest.approx(8.0)
    assert disagg_goodput(20000, 1000, 250, 0.1, 0.05) == pytest.approx(2 * disagg_goodput(10000, 1000, 250, 0.1, 0.05))
    with pytest.raises(InvalidParametersError):
        disagg_goodput(10000, 1000, 250, 0.1, 0.1)


def test_capacity_search_step_function():
    res = capacity_search(lambda rate, seed: 1.0 if rate <= 7.3 else 0.5, (0.0, 20.0), tolerance=0.01)
    assert 7.3 * 0.99 <= res.rate <= 7.3
    assert res.capacity_per_gpu == res.rate


def test_capacity_divides_by_gpus():
    res = capacity_search(lambda rate, seed: 1.0 if rate <= 8.0 else 0.0, (0.0, 16.0), num_gpus=4, tolerance=0.001)
    assert res.capacity_per_gpu == pytest.approx(2.0, rel=0.002)


def test_capacity_median_of_seeds():
    # One unlucky seed per rate must not move the answer.
    def evaluate(rate, seed):
        return 0.0 if seed == 1 else (1.0 if rate <= 5.0 else 0.0)

    res = capacity_search(evaluate, (0.0, 10.0), tolerance=0.01)
    assert 4.95 <= res.rate <= 5.0


def test_capacity_bounds_must_bracket():
    with pytest.raises(BoundsNotBracketingError):
        capacity_search(lambda r, s: 1.0, (0.0, 10.0))
    with pytest.raises(BoundsNotBracketingError):
        capacity_search(lambda r, s: 0.0, (1.0, 10.0))
    with pytest.raises(InvalidParametersError):
        capacity_search(lambda r, s: 0.0, (5.0, 1.0))


def test_capacity_deterministic():
    f = lambda rate, seed: 1.0 if rate < 3.3 + 0.1 * seed else 0.0  # noqa: E731
    assert capacity_search(f, (0.0, 10.0)) == capacity_search(f, (0.0, 10.0))


def test_always_decline_capacity_zero():
    model = PerfModel(((1e-4, 0.0, 0.01),))
    sc = builtin_scenario("chatbot")
    evaluate = scenario_evaluator(sc, lambda: [AlwaysDeclineScheduler(model)], model, 60.0)
    assert evaluate(0.0, 0) == 1.0
    assert evaluate(1.0, 0) == 0.0
    res = capacity_search(evaluate, (0.0, 2.0))
    # Only rates so low that the 60 s traces come out empty still pass.
    assert res.rate < 3 / 60.0


def test_declining_evaluator_capacity_zero():
    res = capacity_search(lambda rate, seed: 1.0 if rate == 0 else 0.0, (0.0, 10.0))
    assert res.rate == 0.0


def test_log_exports():
    log = MetricsLog([record("a"), record("b", ok=False)])
    lines = log.to_jsonl().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[-1])["summary"]["attainment"] == 0.5
    csv_rows = log.to_csv().splitlines()
    assert csv_rows[0].startswith("id,tier")
    assert csv_rows[2].endswith(",0")


def test_load_series():
    log = MetricsLog([record("a"), record("b", tier="best_effort")])
    assert log.load_series() == [{"t_s": 0.0, "arrivals": 2, "admitted": 1}]
