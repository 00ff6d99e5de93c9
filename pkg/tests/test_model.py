import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from adaptdiff.model import (
    INMEM,
    TASKPOOL,
    CostModel,
    GateInputs,
    MemModel,
    PolicyParams,
    PreflightProfile,
    ResourceCaps,
    calibrate_delta_m,
    convergence_steps,
    estimate_working_set,
    ewma_update,
    fit_models_online,
    is_safe,
    predict_latency,
    predict_memory,
    safe_limits,
    select_backend,
    windowed_percentile,
)

from conftest import MB, make_profile, metrics_at


# ---------------------------------------------------------------- parameters


def test_policy_defaults():
    p = PolicyParams()
    assert (p.kappa, p.eta, p.gamma, p.tau, p.hysteresis_m) == (0.7, 0.9, 0.6, 2.0, 2)
    assert (p.rho_ewma, p.rho_star, p.lambda_b, p.lambda_k, p.eps) == (0.2, 0.85, 0.2, 0.2, 0.05)
    assert (p.residual_window, p.alpha_cov, p.percentile_window) == (20, 0.05, 20)
    assert (p.b_min, p.k_min, p.b_step_min) == (1000, 1, 256)


@pytest.mark.parametrize("bad", [
    {"kappa": 0.0}, {"eta": 1.0}, {"tau": 1.0}, {"hysteresis_m": 0}, {"rho_star": 0.0},
    {"b_min": 0}, {"eps": -0.1}, {"lambda_b": 1.5},
])
def test_policy_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        PolicyParams(**bad)


def test_policy_rho_star_closed_above():
    assert PolicyParams(rho_star=1.0).rho_star == 1.0


def test_policy_from_mapping_rejects_unknown():
    with pytest.raises(ValueError, match="unknown"):
        PolicyParams.from_mapping({"kapa": 0.5})


def test_caps_validation():
    with pytest.raises(ValueError):
        ResourceCaps(0, 4)
    with pytest.raises(ValueError):
        ResourceCaps(1e9, 0)


# ---------------------------------------------------------------- working-set gate


@pytest.mark.parametrize("alpha, beta, w, na, nb, expected", [
    (1.0, 0, 200, 5_000_000, 5_000_000, 2_000_000_000),
    (1.5, 2 ** 20, 200, 0, 0, 1_048_576),
    (1.2, 0, 100, 1_000_000, 1_000_000, 240_000_000),
])
def test_working_set_examples(alpha, beta, w, na, nb, expected):
    ws = estimate_working_set(GateInputs(alpha, beta, na, nb), make_profile(w=w))
    assert ws == pytest.approx(alpha * w * (na + nb) + beta, rel=1e-12)
    assert ws == pytest.approx(expected, rel=1e-9)


def test_select_backend_examples():
    caps = ResourceCaps(4 * 2 ** 30, 8)
    policy = PolicyParams()
    assert 0.7 * caps.mem_cap == pytest.approx(3.006e9, rel=1e-3)
    assert select_backend(2.0e9, caps, policy) == INMEM
    assert select_backend(0, caps, policy) == INMEM
    assert select_backend(3.1e9, caps, policy) == TASKPOOL
    # boundary is inclusive
    assert select_backend(0.7 * caps.mem_cap, caps, policy) == INMEM


def test_gate_small_in_memory_large_task_pool():
    caps = ResourceCaps(64 * 2 ** 30, 32)
    policy = PolicyParams()
    prof = make_profile(w=2000)
    small = estimate_working_set(GateInputs(1.5, 2 ** 30, 1_000_000, 1_000_000), prof)
    large = estimate_working_set(GateInputs(1.5, 2 ** 30, 20_000_000, 20_000_000), prof)
    assert select_backend(small, caps, policy) == INMEM
    assert select_backend(large, caps, policy) == TASKPOOL


@given(rows=st.integers(0, 10 ** 8), extra=st.integers(0, 10 ** 8),
       w=st.floats(1, 1e4), dw=st.floats(0, 1e4), cap=st.floats(1e6, 1e12))
def test_gate_monotone(rows, extra, w, dw, cap):
    caps, policy = ResourceCaps(cap, 4), PolicyParams()
    order = {INMEM: 0, TASKPOOL: 1}
    base = select_backend(estimate_working_set(GateInputs(1.5, 0, rows, rows), make_profile(w=w)), caps, policy)
    more_rows = select_backend(
        estimate_working_set(GateInputs(1.5, 0, rows + extra, rows), make_profile(w=w)), caps, policy)
    wider = select_backend(estimate_working_set(GateInputs(1.5, 0, rows, rows), make_profile(w=w + dw)), caps, policy)
    assert order[more_rows] >= order[base]
    assert order[wider] >= order[base]


# ---------------------------------------------------------------- latency model


def test_predict_latency_read_term_only():
    model = CostModel(delta_per_row=0.0).fit()
    prof = make_profile(w=100, bw=1e8)
    assert predict_latency(model, prof, 100_000, 1) == pytest.approx(0.1, rel=1e-9)


def test_predict_latency_zero_terms():
    model = CostModel(delta_per_row=0.0).fit()
    prof = PreflightProfile(bytes_per_row=1e-300, read_bandwidth=1e300)
    assert predict_latency(model, prof, 1, 1) == pytest.approx(0.0, abs=1e-12)


def test_predict_latency_sum_of_terms():
    model = CostModel(prep_per_row=1e-6, delta_per_row=2e-6, overhead_per_worker=0.01).fit()
    prof = make_profile(w=100, bw=1e8)  # read term: 50,000 * 100 / 1e8 = 0.05 s
    assert predict_latency(model, prof, 50_000, 4) == pytest.approx(0.24, rel=1e-9)


def test_predict_latency_rejects_zero_bandwidth():
    prof = PreflightProfile(bytes_per_row=100, read_bandwidth=0)
    with pytest.raises(ValueError):
        predict_latency(CostModel().fit(), prof, 10, 1)


def test_predict_rejects_bad_config():
    with pytest.raises(ValueError):
        predict_latency(CostModel().fit(), make_profile(), 0, 1)
    with pytest.raises(ValueError):
        predict_memory(MemModel().fit(), make_profile(), 10, 0)


def test_latency_clamped_non_negative():
    model = CostModel(overlap=100.0).fit()
    assert predict_latency(model, make_profile(), 10, 1) == 0.0


# ---------------------------------------------------------------- memory model


def test_predict_memory_example():
    model = MemModel(beta0=64e6, beta1=1.1, beta2=0).fit()
    assert predict_memory(model, make_profile(w=100), 100_000, 4) == pytest.approx(3.0e8, rel=1e-9)


def test_predict_memory_zero():
    model = MemModel(beta0=0, beta1=0, beta2=0).fit()
    assert predict_memory(model, make_profile(), 12345, 1) == 0


@given(b=st.integers(1, 10 ** 7), k=st.integers(1, 64), b0=st.floats(0, 1e9), b1=st.floats(0, 20),
       b2=st.floats(0, 1e3))
def test_predict_memory_linear_in_k(b, k, b0, b1, b2):
    model = MemModel(beta0=b0, beta1=b1, beta2=b2).fit()
    prof = make_profile()
    assert predict_memory(model, prof, b, 2 * k) == pytest.approx(2 * predict_memory(model, prof, b, k), rel=1e-12)


@given(b=st.integers(1, 10 ** 7), k=st.integers(1, 63), b1=st.floats(0.01, 20))
def test_predict_memory_strictly_increasing(b, k, b1):
    model = MemModel(beta0=1e6, beta1=b1).fit()
    prof = make_profile()
    assert predict_memory(model, prof, b + 1, k) > predict_memory(model, prof, b, k)
    assert predict_memory(model, prof, b, k + 1) > predict_memory(model, prof, b, k)


def test_estimators_follow_sklearn_conventions():
    prof = make_profile()
    model = MemModel(prof, beta0=5.0, beta1=2.0)
    params = model.get_params()
    assert params["beta0"] == 5.0 and params["beta1"] == 2.0
    twin = clone(model)
    assert twin.get_params()["beta1"] == 2.0 and not hasattr(twin, "beta0_")
    model.fit()
    pred = model.predict([[10, 1], [10, 2]])
    assert pred.shape == (2,)
    assert pred[1] == pytest.approx(2 * pred[0])
    cost = CostModel(prof).fit([[1000, 1], [1000, 1]], [1.0, 1.0])
    assert cost.n_updates_ == 2


# ---------------------------------------------------------------- delta_M


def _with_residuals(values):
    model = MemModel().fit()
    model.residuals_.extend(values)
    return model


def test_delta_m_all_zero():
    assert calibrate_delta_m(_with_residuals([0.0] * 10), PolicyParams()) == 0


def test_delta_m_nearest_rank_example():
    model = _with_residuals([v * MB for v in (-10, 5, -20, 15, 8)])
    assert calibrate_delta_m(model, PolicyParams(alpha_cov=0.05)) == 20 * MB


def test_delta_m_prior_when_empty_or_short():
    policy = PolicyParams(delta_prior=256 * MB)
    assert calibrate_delta_m(MemModel().fit(), policy) == 256 * MB
    assert calibrate_delta_m(_with_residuals([1.0] * 4), policy) == 256 * MB


def test_delta_m_uses_last_window_only():
    policy = PolicyParams(residual_window=5, min_residuals=1)
    model = _with_residuals([1e9] * 10 + [1.0] * 5)
    assert calibrate_delta_m(model, policy) == 1.0


@given(st.lists(st.floats(-1e9, 1e9), min_size=5, max_size=40), st.data())
def test_delta_m_nonincreasing_when_residuals_shrink(residuals, data):
    shrink = data.draw(st.lists(st.floats(0, 1), min_size=len(residuals), max_size=len(residuals)))
    policy = PolicyParams()
    full = calibrate_delta_m(_with_residuals(residuals), policy)
    smaller = calibrate_delta_m(_with_residuals([r * s for r, s in zip(residuals, shrink)]), policy)
    assert smaller <= full


# ---------------------------------------------------------------- envelope


def test_is_safe_examples():
    caps = ResourceCaps(1e9, 8)
    policy = PolicyParams(eta=0.9)
    prof = make_profile(w=100)
    model = MemModel(beta0=64e6, beta1=1.1, beta2=0).fit()
    assert is_safe(100_000, 4, model, prof, caps, policy, delta_m=0)
    exact = MemModel(beta0=9e8, beta1=0, beta2=0).fit()
    assert is_safe(1, 1, exact, prof, caps, policy, delta_m=0)
    near = MemModel(beta0=8.9e8, beta1=0, beta2=0).fit()
    assert not is_safe(1, 1, near, prof, caps, policy, delta_m=2.0e8)


def test_is_safe_cpu_cap():
    model = MemModel(beta0=0, beta1=0).fit()
    assert not is_safe(10, 9, model, make_profile(), ResourceCaps(1e18, 8), PolicyParams(), delta_m=0)


def test_safe_limits_inversion():
    caps = ResourceCaps(1e9, 64)
    policy = PolicyParams(eta=0.9)
    model = MemModel(beta0=0, beta1=1, beta2=0).fit()
    lim = safe_limits(model, make_profile(w=100), caps, policy, k=4, delta_m=0)
    assert lim.feasible
    assert lim.b_max == 9e8 // (4 * 100) == 2_250_000


def test_safe_limits_cpu_binds_with_unbounded_memory():
    model = MemModel(beta0=0, beta1=1).fit()
    lim = safe_limits(model, make_profile(), ResourceCaps(1e30, 12), PolicyParams(), k=1, delta_m=0)
    assert lim.k_max == 12


def test_safe_limits_infeasible_flag():
    model = MemModel(beta0=1e9, beta1=1).fit()
    policy = PolicyParams()
    lim = safe_limits(model, make_profile(), ResourceCaps(1e9, 4), policy, k=1, delta_m=0)
    assert not lim.feasible
    assert (lim.b_max, lim.k_max) == (policy.b_min, policy.k_min)


@given(b0=st.floats(0, 5e8), b1=st.floats(0, 10), b2=st.floats(0, 100), cap=st.floats(1e8, 1e10),
       delta=st.floats(0, 1e8), k=st.integers(1, 16))
def test_safe_limits_is_the_largest_safe_b(b0, b1, b2, cap, delta, k):
    caps = ResourceCaps(cap, 16)
    policy = PolicyParams()
    model = MemModel(beta0=b0, beta1=b1, beta2=b2).fit()
    prof = make_profile()
    lim = safe_limits(model, prof, caps, policy, k=k, delta_m=delta)
    if not lim.feasible or not is_safe(policy.b_min, k, model, prof, caps, policy, delta):
        return
    assert is_safe(lim.b_max, k, model, prof, caps, policy, delta)
    assert not is_safe(lim.b_max + 1, k, model, prof, caps, policy, delta) or lim.b_max >= 1 << 62
    assert is_safe(policy.b_min, lim.k_max, model, prof, caps, policy, delta)
    if lim.k_max < caps.cpu_cap:
        assert not is_safe(policy.b_min, lim.k_max + 1, model, prof, caps, policy, delta)


@given(b0=st.floats(0, 5e8), b1=st.floats(0, 10), cap=st.floats(1e7, 1e9), delta=st.floats(0, 1e8))
def test_safety_monotone_on_grid(b0, b1, cap, delta):
    caps = ResourceCaps(cap, 8)
    policy = PolicyParams(b_min=1)
    model = MemModel(beta0=b0, beta1=b1).fit()
    prof = make_profile()
    bs = [1, 10, 100, 1_000, 10_000, 100_000]
    ks = range(1, 9)
    safe = {(b, k): is_safe(b, k, model, prof, caps, policy, delta) for b in bs for k in ks}
    for (b, k), ok in safe.items():
        if not ok:
            assert not any(safe[(b2, k2)] for b2 in bs for k2 in ks if b2 >= b and k2 >= k)


# ---------------------------------------------------------------- statistics


def test_ewma_examples():
    assert ewma_update(10, 10, 0.2) == 10
    assert ewma_update(0, 10, 0.2) == pytest.approx(2.0, rel=1e-12)
    assert ewma_update(None, 7.5, 0.2) == 7.5


def test_ewma_convergence_bound():
    n = convergence_steps(0.2)
    assert n == math.ceil(math.log(0.01) / math.log(0.8)) == 21
    x = 0.0
    for _ in range(n):
        x = ewma_update(x, 100.0, 0.2)
    assert abs(x - 100.0) <= 1.0
    assert abs(ewma_update(0.0, 100.0, 0.2) - 100.0) > 1.0


@given(prev=st.floats(-1e9, 1e9), obs=st.floats(-1e9, 1e9), rho=st.floats(0.001, 0.999))
def test_ewma_preserves_range(prev, obs, rho):
    out = ewma_update(prev, obs, rho)
    lo, hi = min(prev, obs), max(prev, obs)
    slack = 1e-9 * max(1.0, abs(lo), abs(hi))
    assert lo - slack <= out <= hi + slack


def test_percentile_examples():
    assert windowed_percentile(list(range(1, 21)), 0.95) == 19
    assert windowed_percentile([4.2], 0.3) == 4.2
    assert windowed_percentile([5, 1, 3], 0.5) == 3
    with pytest.raises(ValueError):
        windowed_percentile([], 0.5)
    with pytest.raises(ValueError):
        windowed_percentile([1], 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=100),
       st.sampled_from(["0.01", "0.05", "0.25", "0.5", "0.75", "0.9", "0.95", "0.99", "1"]))
def test_percentile_matches_sort_and_index(values, q):
    rank = max(1, math.ceil(Fraction(q) * len(values)))
    assert windowed_percentile(values, float(q)) == sorted(values)[rank - 1]


# ---------------------------------------------------------------- online fitting


def test_fit_unchanged_when_observation_matches():
    prof = make_profile()
    cost = CostModel(prof).fit()
    mem = MemModel(prof, beta0=10 * MB, beta1=2).fit()
    m = metrics_at(5000, 2, latency=cost.predict_one(5000, 2), rss_total=mem.predict_one(5000, 2))
    fit_models_online(cost, mem, prof, m, 5000, 2)
    assert cost.overlap_ == 0.0
    assert mem.beta0_ == 10 * MB


def test_latency_bias_converges_in_21_updates():
    prof = make_profile()
    cost = CostModel(prof).fit()
    truth = cost.predict_one(5000, 2)
    mem = MemModel(prof).fit()
    for i in range(21):
        m = metrics_at(5000, 2, latency=truth + 0.5, rss_total=mem.predict_one(5000, 2), batch_id=i)
        fit_models_online(cost, mem, prof, m, 5000, 2, rho=0.2)
    learned = cost.predict_one(5000, 2) - truth
    assert abs(learned - 0.5) <= 0.01 * 0.5


def test_memory_bias_spreads_over_workers():
    prof = make_profile()
    mem = MemModel(prof, beta0=10 * MB, beta1=2).fit()
    cost = CostModel(prof).fit()
    k = 4
    base = mem.predict_one(5000, k)
    for i in range(200):
        m = metrics_at(5000, k, latency=cost.predict_one(5000, k), rss_total=base + 100 * MB, batch_id=i)
        fit_models_online(cost, mem, prof, m, 5000, k)
    assert mem.beta0_ - 10 * MB == pytest.approx(100 * MB / k, rel=1e-6)
    assert mem.predict_one(5000, k) - base == pytest.approx(100 * MB, rel=1e-6)
    # slopes untouched
    assert mem.beta1 == 2 and mem.beta2 == 0


def test_memory_recovers_exact_truth_within_50_batches():
    prof = make_profile()
    true = MemModel(prof, beta0=300 * MB, beta1=3.0, beta2=40.0).fit()
    est = MemModel(prof, beta0=20 * MB, beta1=3.0, beta2=40.0).fit()
    cost = CostModel(prof).fit()
    rng = np.random.default_rng(0)
    for i in range(50):
        b, k = int(rng.integers(1000, 100_000)), int(rng.integers(1, 16))
        m = metrics_at(b, k, latency=1.0, rss_total=true.predict_one(b, k), batch_id=i)
        fit_models_online(cost, est, prof, m, b, k)
    for b, k in [(1000, 1), (50_000, 8), (200_000, 16)]:
        assert est.predict_one(b, k) == pytest.approx(true.predict_one(b, k), rel=0.01)
