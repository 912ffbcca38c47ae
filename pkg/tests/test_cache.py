"""Schedule planning, cache accounting, and the three prediction strategies
(including Newton-form Taylor exactness on polynomial histories)."""

import logging

import numpy as np
import pytest

from flowcache import cache as fc
from flowcache.autodiff import ParameterSet
from flowcache.cache import (CacheState, NfeReport, StepMode, Strategy,
                             cache_init, cached_sample, fixture_schedule,
                             learned_predict, naive_reuse, plan_schedule,
                             taylor_forecast)
from flowcache.errors import CacheMissError, ContractViolation
from flowcache.flow import TimePair, mean_velocity_sample
from flowcache.nets import (Condition, Predictor, PredictorConfig,
                            VelocityModel, VelocityModelConfig)


def make_model(rng, input_dim=2):
    m = VelocityModel(VelocityModelConfig(
        input_dim=input_dim, hidden_dim=48, depth=4, time_embed_dim=8,
        condition_vocab=2, accepts_r=True))
    p = m.init_params(rng)
    for k in p.entries:
        p.entries[k] = 0.25 * rng.standard_normal(p.entries[k].shape)
    return m, p


def make_predictor(rng, backbone):
    pred = Predictor(PredictorConfig(hidden_dim=12, depth=1, time_embed_dim=4),
                     backbone)
    pp = pred.init_params(rng)
    return pred, pp


# ---------------------------------------------------------------------------
# plan_schedule
# ---------------------------------------------------------------------------

def test_n1_is_all_full():
    sched = plan_schedule(20, N=1)
    assert sched.mode_counts() == (20, 0)


def test_uniform_n4_matches_published_split():
    sched = plan_schedule(20, N=4, warmup_full=4)
    assert sched.mode_counts() == (8, 12)


@pytest.mark.parametrize("N,full,predict", [(4, 8, 12), (3, 11, 9), (2, 13, 7)])
def test_fixture_counts(N, full, predict):
    sched = fixture_schedule(N)
    assert sched.mode_counts() == (full, predict)
    assert sched.steps[0].mode is StepMode.FULL


def test_schedule_contiguity_and_unit_cover():
    sched = plan_schedule(20, N=4, warmup_full=4)
    for a, b in zip(sched.steps[:-1], sched.steps[1:]):
        assert a.pair.r == b.pair.t
    assert abs(sum(s.pair.interval for s in sched.steps) - 1.0) < 1e-12


def test_explicit_validation_errors():
    with pytest.raises(ContractViolation, match="index 0"):
        plan_schedule(4, N=2, explicit=["predict", "full", "full", "full"])
    with pytest.raises(ContractViolation, match="index 2"):
        plan_schedule(4, N=2, explicit=["full", "predict", "predict", "full"])
    with pytest.raises(ContractViolation):
        plan_schedule(4, N=2, explicit=["full"] * 3)
    with pytest.raises(ContractViolation):
        plan_schedule(4, N=2, explicit=["full", "predict", "hold", "full"])
    with pytest.raises(ContractViolation):
        plan_schedule(0, N=1)
    with pytest.raises(ContractViolation):
        plan_schedule(10, N=1, warmup_full=10)


def test_schedule_json_roundtrip_shape():
    sched = fixture_schedule(2)
    obj = sched.to_json_obj()
    assert len(obj) == 20
    assert set(obj[0]) == {"t", "r", "mode"}


# ---------------------------------------------------------------------------
# cache_init / naive_reuse
# ---------------------------------------------------------------------------

def test_cache_init_accounting_and_bit_exact_value(rng):
    model, params = make_model(rng)
    state = CacheState.single()
    report = NfeReport()
    x = rng.standard_normal((4, 2))
    pair = TimePair(0.9, 0.85)
    u, state = cache_init(model, params, x, pair, Condition(0), state, report)
    assert report.full_evals == 1
    direct = model.forward(params.entries, x, pair.t, pair.r, Condition(0))
    assert np.array_equal(u, direct)
    assert np.array_equal(state.value, direct)
    assert state.origin == pair


def test_taylor_history_ring(rng):
    model, params = make_model(rng)
    state = CacheState.taylor(order=1)
    x = rng.standard_normal((2, 2))
    for pair in [TimePair(0.9, 0.8), TimePair(0.7, 0.6), TimePair(0.5, 0.4)]:
        cache_init(model, params, x, pair, Condition(0), state)
    assert len(state.history) == 2  # ring holds the two most recent
    assert state.history[0][0].t == 0.7
    assert state.history[1][0].t == 0.5


def test_naive_reuse_identity(rng):
    state = CacheState.single()
    with pytest.raises(CacheMissError):
        naive_reuse(state)
    v = rng.standard_normal((3, 2))
    state.value = v
    state.origin = TimePair(0.5, 0.4)
    assert naive_reuse(state) is state.value
    assert np.array_equal(naive_reuse(state), naive_reuse(state))


# ---------------------------------------------------------------------------
# taylor_forecast
# ---------------------------------------------------------------------------

def hist_state(entries, order):
    state = CacheState.taylor(order)
    for pair, v in entries:
        state.history.append((pair, np.asarray(v, dtype=np.float64)))
    state.value = state.history[-1][1]
    state.origin = state.history[-1][0]
    return state


def test_constant_history_forecasts_constant():
    c = np.array([2.5, -1.0])
    state = hist_state([(TimePair(0.9, 0.8), c), (TimePair(0.7, 0.6), c),
                        (TimePair(0.5, 0.4), c)], order=2)
    for k in (1, 2, 5):
        for m in (0, 1, 2):
            assert np.allclose(taylor_forecast(state, k, 2, m), c, atol=0)


def test_hand_evaluated_first_order_case():
    # newest F = 4, previous F = 6 (difference 2), N = 2, k = 1 -> 3
    state = hist_state([(TimePair(0.9, 0.8), [6.0]),
                        (TimePair(0.7, 0.6), [4.0])], order=1)
    got = taylor_forecast(state, k=1, N=2, m=1)
    assert np.array_equal(got, np.array([3.0]))


@pytest.mark.parametrize("m", [0, 1, 2])
def test_polynomial_history_exact(m):
    # degree-m polynomial in t on an N-spaced grid is extrapolated exactly
    rng = np.random.default_rng(m)
    coeffs = rng.standard_normal(m + 1)

    def poly(t):
        return np.array([sum(c * t ** i for i, c in enumerate(coeffs))])

    total, N = 20, 2
    grid = [1.0 - j / total for j in range(total + 1)]
    hist_js = [0, 2, 4][: m + 1] if m else [0]
    hist_js = list(range(0, 2 * (m + 1), 2))
    entries = [(TimePair(grid[j], grid[j + 1]), poly(grid[j])) for j in hist_js]
    state = hist_state(entries, order=m)
    newest_j = hist_js[-1]
    for k in (1, 2, 3):
        target_t = grid[newest_j + k]
        got = taylor_forecast(state, k, N, m)
        assert abs(float(got[0]) - float(poly(target_t)[0])) < 1e-9


def test_m0_bitwise_equals_naive():
    state = hist_state([(TimePair(0.9, 0.8), [1.234567891234]),
                        (TimePair(0.7, 0.6), [9.87654321])], order=1)
    f = taylor_forecast(state, k=1, N=2, m=0)
    assert f is naive_reuse(state) or np.array_equal(f, naive_reuse(state))
    assert f.tobytes() == naive_reuse(state).tobytes()


def test_insufficient_history_falls_back():
    state = hist_state([(TimePair(0.9, 0.8), [5.0])], order=2)
    assert np.array_equal(taylor_forecast(state, 1, 2, m=2), np.array([5.0]))


def test_taylor_contract_errors():
    state = hist_state([(TimePair(0.9, 0.8), [5.0])], order=1)
    with pytest.raises(ContractViolation):
        taylor_forecast(state, 0, 2, 1)
    with pytest.raises(ContractViolation):
        taylor_forecast(state, 1, 0, 1)
    with pytest.raises(CacheMissError):
        taylor_forecast(CacheState.taylor(1), 1, 2, 1)


# ---------------------------------------------------------------------------
# learned strategy
# ---------------------------------------------------------------------------

def test_learned_predict_cache_miss(rng):
    model, _ = make_model(rng)
    pred, pp = make_predictor(rng, model)
    with pytest.raises(CacheMissError):
        learned_predict(pred, pp, CacheState.single(), np.zeros((1, 2)),
                        TimePair(0.5, 0.4), Condition(0))


def test_learned_out_of_horizon_logged(rng, caplog):
    model, params = make_model(rng)
    pred, pp = make_predictor(rng, model)
    state = CacheState.single()
    cache_init(model, params, np.zeros((1, 2)), TimePair(0.9, 0.85),
               Condition(0), state)
    with caplog.at_level(logging.WARNING, logger="flowcache.cache"):
        learned_predict(pred, pp, state, np.zeros((1, 2)),
                        TimePair(0.3, 0.25), Condition(0), delta_max=0.2)
    assert any("horizon" in r.message for r in caplog.records)


def test_zero_init_predictor_outputs_zero(rng):
    model, params = make_model(rng)
    pred, pp = make_predictor(rng, model)
    state = CacheState.single()
    cache_init(model, params, np.ones((2, 2)), TimePair(0.9, 0.85),
               Condition(0), state)
    u = learned_predict(pred, pp, state, np.ones((2, 2)),
                        TimePair(0.85, 0.8), Condition(0))
    assert np.array_equal(u, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# cached_sample
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("strategy", list(Strategy))
def test_all_full_schedule_matches_uncached_bitwise(strategy, rng):
    model, params = make_model(rng)
    pred, pp = make_predictor(rng, model)
    sched = plan_schedule(8, N=1)
    x1 = rng.standard_normal((6, 2))
    out, report = cached_sample(model, params, sched, strategy, x1,
                                Condition(1), predictor=pred,
                                predictor_params=pp)
    ref = mean_velocity_sample(model, params.entries,
                               [s.pair for s in sched.steps], x1, Condition(1))
    assert np.array_equal(out, ref)
    assert report.full_evals == 8
    assert report.predictor_evals == 0


@pytest.mark.parametrize("strategy", list(Strategy))
def test_full_evals_match_schedule_count(strategy, rng):
    model, params = make_model(rng)
    pred, pp = make_predictor(rng, model)
    sched = fixture_schedule(2)
    x1 = rng.standard_normal((4, 2))
    _, report = cached_sample(model, params, sched, strategy, x1, Condition(0),
                              predictor=pred, predictor_params=pp)
    full, predict = sched.mode_counts()
    assert report.full_evals == full == 13
    assert report.predictor_evals == predict == 7


def test_learned_requires_predictor(rng):
    model, params = make_model(rng)
    sched = fixture_schedule(2)
    with pytest.raises(ContractViolation):
        cached_sample(model, params, sched, Strategy.LEARNED,
                      np.zeros((1, 2)), Condition(0))


def test_bit_exact_reproducibility(rng):
    model, params = make_model(rng)
    sched = fixture_schedule(3)
    x1 = rng.standard_normal((5, 2))
    a, _ = cached_sample(model, params, sched, Strategy.TAYLOR, x1, Condition(0))
    b, _ = cached_sample(model, params, sched, Strategy.TAYLOR, x1, Condition(0))
    assert np.array_equal(a, b)


def test_single_tensor_memory_invariant(rng):
    model, params = make_model(rng)
    pred, pp = make_predictor(rng, model)
    x1 = rng.standard_normal((4, 2))
    expected = x1.nbytes + 16  # one cached tensor plus origin metadata
    for total in (10, 20, 40):
        sched = plan_schedule(total, N=2)
        for strategy in (Strategy.NAIVE, Strategy.LEARNED):
            _, report = cached_sample(model, params, sched, strategy, x1,
                                      Condition(0), predictor=pred,
                                      predictor_params=pp)
            assert report.cache_bytes_peak == expected
    # the taylor ring is allowed to hold order+1 tensors
    _, rep_taylor = cached_sample(model, params, plan_schedule(20, N=2),
                                  Strategy.TAYLOR, x1, Condition(0),
                                  taylor_order=1)
    assert rep_taylor.cache_bytes_peak == 2 * expected


def test_taylor_adapts_to_fixture_spacing(rng):
    # the N=3 fixture ends with 1-spaced FULL runs; the sampler must not
    # extrapolate with stale spacing (this also exercises the fallback path)
    model, params = make_model(rng)
    sched = fixture_schedule(3)
    x1 = rng.standard_normal((3, 2))
    out, report = cached_sample(model, params, sched, Strategy.TAYLOR, x1,
                                Condition(0), taylor_order=2)
    assert np.all(np.isfinite(out))
    assert report.full_evals == 11
