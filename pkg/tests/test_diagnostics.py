"""Oracle checks for streaming moments, mixing statistics, and the roundoff
flag. Reference values come from closed forms or two-pass numpy, never from
the code under test."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manychain.diagnostics import (
    DegenerateTraceError,
    DiagnosticsReport,
    StreamingMoments,
    accept_probs_from_ratios,
    chees,
    esjd,
    ess,
    harmonic_mean_acceptance,
    merge_chain_axis,
    report_from_trace,
    roundoff_suspicion,
    split_rhat,
    streaming_rhat,
    variance,
    welford_init,
    welford_merge,
    welford_update,
)


def accumulate(values, shape=()):
    acc = welford_init(shape)
    for v in values:
        acc = welford_update(acc, v)
    return acc


def test_welford_small_case_by_hand():
    acc = accumulate([1.0, 2.0, 3.0])
    assert acc.count == 3
    assert float(acc.mean) == 2.0
    assert float(acc.m2) == 2.0
    assert float(variance(acc)) == 1.0


def test_welford_matches_two_pass():
    rng = np.random.default_rng(5)
    x = rng.normal(3.0, 2.5, size=10_000)
    acc = accumulate(x)
    assert float(acc.mean) == pytest.approx(x.mean(), rel=1e-12)
    assert float(variance(acc)) == pytest.approx(x.var(ddof=1), rel=1e-12)


def test_welford_merge_equals_single_stream():
    rng = np.random.default_rng(6)
    x = rng.normal(size=1000)
    merged = welford_merge(accumulate(x[:400]), accumulate(x[400:]))
    full = accumulate(x)
    assert merged.count == 1000
    assert float(merged.mean) == pytest.approx(float(full.mean), rel=1e-12)
    assert float(merged.m2) == pytest.approx(float(full.m2), rel=1e-12)


def test_welford_merge_identity_and_symmetry():
    a = accumulate([1.0, 4.0])
    empty = welford_init()
    assert welford_merge(a, empty) is a
    assert welford_merge(empty, a) is a
    b = accumulate([2.0, -1.0, 0.5])
    ab, ba = welford_merge(a, b), welford_merge(b, a)
    assert float(ab.mean) == pytest.approx(float(ba.mean), rel=1e-14)
    assert float(ab.m2) == pytest.approx(float(ba.m2), rel=1e-14)


@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=12),
    st.lists(st.floats(-100, 100), min_size=2, max_size=12),
    st.lists(st.floats(-100, 100), min_size=2, max_size=12),
)
@settings(max_examples=100, deadline=None)
def test_welford_merge_associative(xs, ys, zs):
    a, b, c = accumulate(xs), accumulate(ys), accumulate(zs)
    left = welford_merge(welford_merge(a, b), c)
    right = welford_merge(a, welford_merge(b, c))
    assert left.count == right.count
    assert float(left.mean) == pytest.approx(float(right.mean), rel=1e-9, abs=1e-9)
    assert float(left.m2) == pytest.approx(float(right.m2), rel=1e-9, abs=1e-9)


def test_merge_chain_axis_pools_chains():
    rng = np.random.default_rng(7)
    draws = rng.normal(size=(50, 4, 3))  # T, C, P
    acc = welford_init((4, 3))
    for t in range(50):
        acc = welford_update(acc, draws[t])
    pooled = merge_chain_axis(acc)
    flat = draws.reshape(200, 3)
    np.testing.assert_allclose(pooled.mean, flat.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(
        variance(pooled), flat.var(axis=0, ddof=1), rtol=1e-12
    )
    with pytest.raises(ValueError):
        merge_chain_axis(welford_init())


def test_variance_needs_enough_observations():
    with pytest.raises(ValueError):
        variance(accumulate([1.0]))


def test_split_rhat_iid_near_one():
    rng = np.random.default_rng(11)
    trace = rng.normal(size=(2000, 8))
    r = split_rhat(trace)
    assert 0.99 < r < 1.02


def test_split_rhat_flags_separated_chains():
    rng = np.random.default_rng(12)
    trace = rng.normal(size=(1000, 4))
    trace[:, 2:] += 5.0  # two chains parked five sigma away
    assert split_rhat(trace) > 1.5


def test_split_rhat_flags_a_drifting_chain():
    # split halves expose a trend a plain R-hat averages away
    rng = np.random.default_rng(13)
    trace = rng.normal(size=(1000, 2))
    trace[:, 1] += np.linspace(0.0, 6.0, 1000)
    assert split_rhat(trace) > 1.2


def test_split_rhat_errors():
    with pytest.raises(DegenerateTraceError):
        split_rhat(np.ones((100, 4)))
    with pytest.raises(ValueError):
        split_rhat(np.zeros((3, 4)))


def test_streaming_rhat_matches_regime():
    rng = np.random.default_rng(14)
    draws = rng.normal(size=(500, 6, 2))
    acc = welford_init((6, 2))
    for t in range(500):
        acc = welford_update(acc, draws[t])
    r = streaming_rhat(acc)
    assert r.shape == (2,)
    assert np.all((r > 0.99) & (r < 1.02))

    shifted = draws.copy()
    shifted[:, 0, :] += 5.0
    acc2 = welford_init((6, 2))
    for t in range(500):
        acc2 = welford_update(acc2, shifted[t])
    assert np.all(streaming_rhat(acc2) > 1.5)

    with pytest.raises(ValueError):
        streaming_rhat(welford_init((6, 2)))
    with pytest.raises(ValueError):
        streaming_rhat(accumulate([np.zeros(3), np.ones(3)], shape=(3,)))


def test_ess_iid():
    rng = np.random.default_rng(15)
    trace = rng.normal(size=(5000, 8))
    assert 32_000 < ess(trace) < 48_000


def test_ess_ar1_matches_analytic():
    # AR(1) with rho = 0.9: asymptotic efficiency (1 - rho) / (1 + rho)
    rho, n = 0.9, 50_000
    rng = np.random.default_rng(16)
    x = np.empty(n)
    x[0] = rng.normal()
    innov = rng.normal(size=n) * math.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + innov[t]
    want = n * (1.0 - rho) / (1.0 + rho)
    got = ess(x)
    assert abs(got - want) / want < 0.30


def test_ess_antithetic_exceeds_draw_count():
    rho, n = -0.5, 50_000
    rng = np.random.default_rng(17)
    x = np.empty(n)
    x[0] = rng.normal()
    innov = rng.normal(size=n) * math.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + innov[t]
    assert ess(x) > n  # super-efficient, and allowed to be


def test_ess_errors():
    with pytest.raises(ValueError):
        ess(np.zeros(4))
    with pytest.raises(DegenerateTraceError):
        ess(np.ones(100))


def test_esjd_by_hand():
    assert esjd([[0.0]], [[1.0]]) == 1.0
    # chains jump 1 and 9 squared units: mean 5
    assert esjd([[0.0], [0.0]], [[1.0], [3.0]]) == 5.0
    with pytest.raises(ValueError):
        esjd([[0.0]], [[1.0], [2.0]])


def test_chees_by_hand():
    # d(next)^2 = 4, d(prev)^2 = 1, so ((4 - 1)^2) / 4 = 2.25
    assert chees([[0.0]], [[3.0]], [1.0]) == 2.25


def test_chees_translation_invariant():
    rng = np.random.default_rng(18)
    prev = rng.normal(size=(6, 3))
    nxt = rng.normal(size=(6, 3))
    ctr = rng.normal(size=3)
    shift = np.array([10.0, -4.0, 2.5])
    a = chees(prev, nxt, ctr)
    b = chees(prev + shift, nxt + shift, ctr + shift)
    assert a == pytest.approx(b, rel=1e-9)


def test_roundoff_suspicion_counts_grid_points():
    r = np.array([-0.25, -0.3137861, 0.5, -1.0])
    assert roundoff_suspicion(r) == 0.75
    # infinities and huge ratios are excluded from the numerator but
    # still count toward the denominator
    assert roundoff_suspicion([np.inf, 0.25]) == 0.5
    assert roundoff_suspicion([2e6, 0.1]) == 0.0
    with pytest.raises(ValueError):
        roundoff_suspicion([])


def test_roundoff_suspicion_quiet_on_healthy_ratios():
    rng = np.random.default_rng(19)
    assert roundoff_suspicion(rng.normal(size=10_000)) < 0.01


def test_harmonic_mean_acceptance():
    got = harmonic_mean_acceptance([1.0, 0.5])
    assert abs(got - 2.0 / 3.0) <= np.spacing(2.0 / 3.0)
    assert harmonic_mean_acceptance([1.0, 1.0, 1.0]) == 1.0
    with pytest.raises(ValueError):
        harmonic_mean_acceptance([0.5, 0.0])
    with pytest.raises(ValueError):
        harmonic_mean_acceptance([0.5, 1.1])
    with pytest.raises(ValueError):
        harmonic_mean_acceptance([])


def test_accept_probs_from_ratios():
    r = np.array([0.5, 0.0, -3.0, -np.inf])
    p = accept_probs_from_ratios(r)
    assert p[0] == 1.0 and p[1] == 1.0
    assert p[2] == pytest.approx(math.exp(-3.0), rel=1e-15)
    assert p[3] == 1e-10  # floor keeps the harmonic mean finite


def test_report_from_trace_fields():
    rng = np.random.default_rng(20)
    t, c, p = 64, 4, 3
    z = rng.normal(size=(t, c, p))
    ratios = np.full((t, c), -0.1)
    tau = np.exp(rng.normal(size=(t, c)))
    rep = report_from_trace(z, ratios, tau_trace=tau)
    assert len(rep.rhat) == p and len(rep.ess) == p
    assert rep.ess_tau is not None and rep.ess_tau > 0
    assert rep.esjd > 0 and rep.chees >= 0
    # every ratio is -0.1, so each per-step harmonic mean is exp(-0.1)
    assert rep.mean_accept_harmonic == pytest.approx(math.exp(-0.1), rel=1e-12)
    assert rep.roundoff_flag_fraction == 0.0

    d = rep.to_dict()
    assert set(d) == {
        "rhat", "ess", "ess_tau", "esjd", "chees",
        "mean_accept_harmonic", "roundoff_flag_fraction",
    }
    json.dumps(d)  # everything must be plain JSON types


def test_report_harmonic_tolerates_one_deep_rejection():
    """One catastrophic step must not zero the run-level statistic."""
    rng = np.random.default_rng(21)
    t, c = 100, 8
    z = rng.normal(size=(t, c, 2))
    ratios = np.full((t, c), -0.2)
    ratios[57, 3] = -60.0  # single near-certain rejection
    rep = report_from_trace(z, ratios)
    assert rep.mean_accept_harmonic > 0.5


def test_report_from_trace_errors():
    rng = np.random.default_rng(22)
    with pytest.raises(ValueError):
        report_from_trace(rng.normal(size=(10, 4)), np.zeros((10, 4)))
    with pytest.raises(ValueError):
        report_from_trace(rng.normal(size=(4, 2, 2)), np.zeros((4, 2)))


def test_streaming_moments_are_frozen():
    acc = welford_init()
    with pytest.raises(AttributeError):
        acc.count = 5
    assert isinstance(acc, StreamingMoments)
    assert isinstance(
        DiagnosticsReport([1.0], None, None, 0.0, 0.0, 1.0, 0.0).to_dict(), dict
    )
