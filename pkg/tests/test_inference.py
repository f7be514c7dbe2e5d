import copy
import dataclasses

import numpy as np
import pytest

from drdidsc.errors import BootstrapFailure, ConfigError, SingularSystem
from drdidsc.estimator import EstimatorConfig, estimate_att_panel, estimate_att_rc
from drdidsc.inference import (
    MAMMEN_POINTS,
    MAMMEN_PROBS,
    MultiplierSpec,
    bootstrap_att,
    diagnostics,
    draw_multipliers,
    influence_pt,
    influence_sc,
    multiplier_rng,
    percentile_ci,
    pool_shares,
    pooled_variance,
)
from drdidsc.simulation import DgpSpec, generate_dgp, tag_periods
from drdidsc.weights import WeightOptions

from conftest import make_panel


def test_exponential_moments():
    w = draw_multipliers(10**6, "exponential", np.random.default_rng(0))
    assert abs(w.mean() - 1) < 0.01 and abs(w.var() - 1) < 0.02


def test_normal_shift_moments():
    w = draw_multipliers(10**6, "normal_shift", np.random.default_rng(1))
    assert abs(w.mean() - 1) < 0.01 and abs(w.var() - 1) < 0.02


def test_mammen_two_points():
    lo, hi = MAMMEN_POINTS
    p_lo, p_hi = MAMMEN_PROBS
    assert p_lo + p_hi == pytest.approx(1.0)
    assert p_lo * lo + p_hi * hi == pytest.approx(1.0, abs=1e-14)
    assert p_lo * (lo - 1) ** 2 + p_hi * (hi - 1) ** 2 == pytest.approx(1.0, abs=1e-14)
    w = draw_multipliers(200_000, "mammen", np.random.default_rng(2))
    assert set(np.unique(w)) == {lo, hi}
    assert abs(np.mean(w == hi) - p_hi) < 0.005


def test_multiplier_streams_deterministic():
    a = draw_multipliers(50, "exponential", multiplier_rng(7, 3))
    b = draw_multipliers(50, "exponential", multiplier_rng(7, 3))
    c = draw_multipliers(50, "exponential", multiplier_rng(7, 4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_unknown_multiplier():
    with pytest.raises(ConfigError):
        MultiplierSpec("rademacher")


def test_percentile_ci_of_differences():
    draws = np.arange(-50, 51, dtype=float)  # quantiles at +-47.5 for alpha = 0.05
    lo, hi = percentile_ci(10.0, draws, 0.05)
    assert (lo, hi) == pytest.approx((10 - 47.5, 10 + 47.5))
    skew = np.r_[np.zeros(90), np.full(10, 5.0)]
    lo, hi = percentile_ci(0.0, skew, 0.1)
    assert hi == 0.0 and lo < 0  # upper tail of the draws moves the lower endpoint


@pytest.fixture(scope="module")
def small():
    ds = make_panel(n=400, G=4, T=4, seed=11)
    return ds, estimate_att_panel(ds)


def test_unit_multipliers_collapse(small):
    ds, est = small
    res = bootstrap_att(estimate=est, B=5, spec="constant")
    assert np.all(res.draws == 0.0)
    assert res.ci == (est.theta_hat, est.theta_hat)


def test_bootstrap_reproducible_and_nested(small):
    ds, est = small
    a = bootstrap_att(estimate=est, B=60, alpha=0.05, seed=3)
    b = bootstrap_att(estimate=est, B=60, alpha=0.05, seed=3)
    assert np.array_equal(a.draws, b.draws)
    narrow = percentile_ci(est.theta_hat, a.draws, 0.5)
    assert a.ci[0] <= narrow[0] <= narrow[1] <= a.ci[1]
    s = a.summary()
    assert s["B"] == 60 and s["failures"] == 0 and s["draws_summary"]["q05"] <= s["draws_summary"]["q95"]


def test_bootstrap_runs_from_dataset(small):
    ds, est = small
    res = bootstrap_att(ds, EstimatorConfig(), B=3, seed=1)
    assert res.theta_hat == est.theta_hat and np.all(np.isfinite(res.draws))


def test_bootstrap_bad_arguments(small):
    _, est = small
    with pytest.raises(ConfigError):
        bootstrap_att(estimate=est, B=10, alpha=1.5)
    with pytest.raises(ConfigError):
        bootstrap_att(estimate=est, B=0)


class _Flaky:
    """Pipeline stand-in that fails on chosen calls."""

    def __init__(self, fail_calls, n=10):
        self.calls = 0
        self.fail = set(fail_calls)
        self.n_source = n

    def run(self, W):
        self.calls += 1
        if self.calls in self.fail:
            raise SingularSystem("synthetic failure")
        return (float(np.mean(W)),)


def _fake_estimate(pipe):
    return type("E", (), {"pipeline": pipe, "theta_hat": 1.0})()


def test_failed_replication_retried_then_counted():
    pipe = _Flaky({2, 5, 6})  # rep 1 fails once, rep 3 fails twice
    res = bootstrap_att(estimate=_fake_estimate(pipe), B=4, seed=0, max_failure_rate=0.5)
    assert res.retries == 2 and res.failures == 1
    assert np.isnan(res.draws[3]) and np.isfinite(res.draws[[0, 1, 2]]).all()


def test_too_many_failures_abort():
    pipe = _Flaky(range(1, 100))
    with pytest.raises(BootstrapFailure):
        bootstrap_att(estimate=_fake_estimate(pipe), B=20, seed=0)


@pytest.fixture(scope="module")
def dgp3_est():
    spec = DgpSpec(kind="dgp3", n=3000)
    ds, _, _ = generate_dgp(spec, np.random.default_rng(5), spec.resolve_calibration())
    return ds, estimate_att_panel(ds)


def test_psi_pt_mean_zero(dgp3_est):
    _, est = dgp3_est
    psi, v, _ = influence_pt(est)
    assert abs(psi.mean()) < 1e-10
    assert v == pytest.approx(np.mean(psi**2))


def test_v_pt_direct_vs_decomposed(dgp3_est):
    _, est = dgp3_est
    _, v, v_dec = influence_pt(est)
    assert abs(v_dec / v - 1) < 0.1


def test_trend_alignment_kills_adjustments(dgp3_est):
    _, est = dgp3_est
    nuis = copy.copy(est.nuisances)
    m = nuis.m_gt.copy()
    m[:, :, -1] = m[:, :, -2] + nuis.m_delta[:, None]  # every m_{g,Δ} equals m_Δ
    nuis.m_gt = m
    psi1, psi2, psi_sc, v_sc = influence_sc(dataclasses.replace(est, nuisances=nuis))
    assert np.max(np.abs(psi1)) < 1e-12 and np.max(np.abs(psi2)) < 1e-12


def test_zero_residuals_kill_bahadur_terms(dgp3_est):
    ds, est = dgp3_est
    y = ds.y.copy()
    rows = np.arange(ds.n)
    y[:, :-1] = est.nuisances.m_gt[rows, ds.group - 1, :-1]
    pipe = copy.copy(est.pipeline)
    pipe.data = ds.with_outcomes(y)
    _, psi2, _, _ = influence_sc(dataclasses.replace(est, pipeline=pipe))
    assert np.max(np.abs(psi2)) < 1e-12


def test_single_control_pool_equals_decomposed_pt():
    ds = make_panel(n=600, G=2, T=3, seed=4)
    est = estimate_att_panel(ds)
    _, _, v_dec = influence_pt(est)
    assert pooled_variance(est) == pytest.approx(v_dec, rel=1e-12)


def test_pool_shares_sum_to_one():
    r = np.column_stack([np.ones(50), np.random.default_rng(0).uniform(0.01, 80, (50, 4))])
    assert np.allclose(pool_shares(r).sum(axis=1), 1.0, atol=1e-14)


def test_diagnostics_report(dgp3_est):
    ds, est = dgp3_est
    d = diagnostics(est).to_dict(ds.n)
    for k in ("v_pt", "v_sc", "v_pool", "se_pt", "se_sc", "se_pool"):
        assert d[k] is not None and d[k] > 0


def test_diagnostics_pt_only_and_rc():
    ds = make_panel(n=300, G=3, T=3, seed=6)
    est = estimate_att_panel(ds, EstimatorConfig(weights=WeightOptions(pt_only=True)))
    d = diagnostics(est)
    assert d.v_sc is None and d.notes
    spec = DgpSpec(kind="dgp3", n=1500)
    panel, _, _ = generate_dgp(spec, np.random.default_rng(0), spec.resolve_calibration())
    rc = tag_periods(panel, np.random.default_rng(1))
    d = diagnostics(estimate_att_rc(rc))
    assert d.v_pt > 0 and d.v_sc is None
