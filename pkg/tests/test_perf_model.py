import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sloplan.errors import DegenerateSamplesError, InfeasibleBudgetError, InsufficientSamplesError, ParseError
from sloplan.perf_model import (
    PerfModel,
    ProfileSample,
    fit,
    load_model,
    load_profile,
    r_squared,
    save_model,
    synthetic_profile,
    write_profile,
)

TWO_TERM = PerfModel(((8e-5, 3e-3, 0.008), (0.0, 4e-3, 0.025)))
GRID = [1, 8, 32, 64, 128, 256, 384, 512, 768, 1024, 1536, 2048, 3072, 4096]

terms = st.tuples(
    st.floats(1e-6, 1e-3), st.floats(0.0, 1e-2), st.floats(0.0, 5e-2)
)
models = st.lists(terms, min_size=1, max_size=3).map(lambda ts: PerfModel(tuple(ts)))


def test_predict_is_max_of_terms():
    # 100 tokens, step 2: compute term 0.008+0.006+0.008 = 0.022 < 0.025+0.008 = 0.033
    assert TWO_TERM.predict(100, 2) == pytest.approx(0.033)
    assert TWO_TERM.predict(1000, 0) == pytest.approx(0.088)


def test_predict_rejects_empty_batch():
    with pytest.raises(ValueError):
        TWO_TERM.predict(0)


def test_negative_coefficients_rejected():
    with pytest.raises(ValueError):
        PerfModel(((-1e-4, 0.0, 0.01),))


def test_time2bs_known_value():
    # (0.05 - 0.008) / 8e-5 = 525 tokens
    assert TWO_TERM.time2bs(0.05) == 525


def test_time2bs_below_single_token():
    with pytest.raises(InfeasibleBudgetError):
        TWO_TERM.time2bs(0.01)


@given(models, st.floats(0.0, 1.0), st.integers(0, 8))
def test_time2bs_is_inverse(model, budget, step):
    try:
        n = model.time2bs(budget, step)
    except InfeasibleBudgetError:
        assert model.predict(1, step) > budget
        return
    assert model.predict(n, step) <= budget + 1e-12
    assert n == model.max_tokens or model.predict(n + 1, step) > budget + 1e-12
    assert n == model.time2bs_bisect(budget, step)


@given(models, st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_time2bs_monotone(model, a, b):
    lo, hi = sorted((a, b))
    try:
        n_lo = model.time2bs(lo)
    except InfeasibleBudgetError:
        return
    assert model.time2bs(hi) >= n_lo


def test_fit_recovers_exact_model():
    samples = synthetic_profile(TWO_TERM, GRID, spec_steps=(0, 2, 4))
    fitted = fit(samples, num_terms=2)
    assert r_squared(fitted, samples) > 1 - 1e-9
    for n in (1, 100, 500, 4000):
        for s in (0, 3):
            assert fitted.predict(n, s) == pytest.approx(TWO_TERM.predict(n, s), rel=1e-6)


def test_fit_noisy_profile_r2():
    samples = synthetic_profile(TWO_TERM, GRID, spec_steps=(0, 2, 4), noise=0.02, seed=3)
    assert r_squared(fit(samples), samples) >= 0.99


def test_fit_single_term():
    m = PerfModel(((1e-4, 0.0, 0.005),))
    fitted = fit(synthetic_profile(m, GRID), num_terms=1)
    assert fitted.terms[0] == pytest.approx((1e-4, 0.0, 0.005), rel=1e-6, abs=1e-12)


def test_fit_insufficient_samples():
    with pytest.raises(InsufficientSamplesError):
        fit(synthetic_profile(TWO_TERM, [1, 2, 3]), num_terms=2)


def test_fit_degenerate_samples():
    samples = [ProfileSample(64, s, 0.01 + 0.001 * s) for s in range(8)]
    with pytest.raises(DegenerateSamplesError):
        fit(samples)


def test_profile_round_trip(tmp_path):
    samples = synthetic_profile(TWO_TERM, GRID, noise=0.01, seed=1)
    path = tmp_path / "p.csv"
    write_profile(path, samples)
    assert load_profile(path) == samples


def test_profile_parse_error_has_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("num_tokens,spec_step,latency_seconds\n16,0,0.01\nx,0,0.02\n")
    with pytest.raises(ParseError) as exc:
        load_profile(path)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_profile_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("tokens,latency\n16,0.01\n")
    with pytest.raises(ParseError):
        load_profile(path)


def test_profile_rejects_nonpositive_latency(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("num_tokens,spec_step,latency_seconds\n16,0,0\n")
    with pytest.raises(ParseError) as exc:
        load_profile(path)
    assert exc.value.line == 2


def test_model_json_round_trip(tmp_path):
    path = tmp_path / "m.json"
    save_model(TWO_TERM, path)
    assert load_model(path) == TWO_TERM


def test_predict_many_matches_predict():
    n = np.array([1, 10, 700, 5000])
    got = TWO_TERM.predict_many(n, 3)
    assert got == pytest.approx([TWO_TERM.predict(int(k), 3) for k in n])
    assert math.isclose(got[0], TWO_TERM.predict(1, 3))
