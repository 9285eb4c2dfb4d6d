import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimic_mpc.dynamics import VehicleParams, VehicleState
from mimic_mpc.errors import DataError
from mimic_mpc.metrics import (
    MetricsReport,
    ReferenceStats,
    RolloutTrace,
    build_reference_stats,
    cl_likelihood,
    jerk_from_lateral_accel,
    lateral_jerk_stats,
    offroad_count,
    ol_error,
    render_report_table,
    srr,
)


def make_trace(d=None, beta=None, psi_dot=None, u=None, n=100, dt=0.1,
               truncated=False, planned=None):
    n = len(d) if d is not None else n
    x = np.zeros((n, 5))
    x[:, 2] = np.arange(n) * 13.889 * dt
    if d is not None:
        x[:, 3] = d
    if beta is not None:
        x[:, 0] = beta
    if psi_dot is not None:
        x[:, 1] = psi_dot
    u = np.zeros(n) if u is None else np.asarray(u)
    return RolloutTrace(t=np.arange(n) * dt, x=x, u=u, dt=dt,
                        control_mode="delta", planned_steps=planned or n - 1,
                        truncated=truncated)


class TestReferenceStats:
    def test_identical_laps_hit_variance_floor(self):
        sig = np.linspace(0, 99.9, 500)
        d = 0.3 * np.sin(sig / 10.0)
        stats = build_reference_stats([(sig, d), (sig, d)], 100.0)
        assert np.allclose(stats.var, 1e-4)
        # means follow the lap profile (no smoothing applied to the mean)
        mu, _ = stats.lookup(50.0)
        assert mu == pytest.approx(0.3 * np.sin(50.0 / 10.0), abs=0.01)

    def test_two_constant_laps_population_variance(self):
        sig = np.arange(0.5, 100.0, 1.0)
        plus = np.full_like(sig, 0.1)
        minus = np.full_like(sig, -0.1)
        stats = build_reference_stats([(sig, plus), (sig, minus)], 100.0,
                                      smooth_bins=1)
        assert np.allclose(stats.mean, 0.0)
        assert np.allclose(stats.var, 0.01)

    def test_empty_bins_interpolated_and_flagged(self):
        sig = np.array([0.5, 1.5, 4.5, 5.5])
        d = np.array([0.0, 0.1, 0.4, 0.5])
        stats = build_reference_stats([(sig, d), (sig, d)], 6.0, smooth_bins=1)
        assert set(stats.interpolated_bins) == {2, 3}
        assert stats.mean[2] == pytest.approx(0.2)
        assert stats.mean[3] == pytest.approx(0.3)

    def test_requires_two_laps(self):
        with pytest.raises(DataError):
            build_reference_stats([(np.arange(5.0), np.zeros(5))], 10.0)

    def test_json_roundtrip(self):
        sig = np.arange(0.5, 50.0, 0.7)
        stats = build_reference_stats(
            [(sig, np.sin(sig)), (sig, np.cos(sig))], 50.0)
        again = ReferenceStats.from_json_dict(stats.to_json_dict())
        assert np.allclose(again.mean, stats.mean)
        assert np.allclose(again.var, stats.var)


class TestClLikelihood:
    def test_peak_density_is_one(self):
        # variance 1/(2 pi) makes the Gaussian peak density exactly 1
        n = 50
        stats = ReferenceStats(centers=(np.arange(n) + 0.5),
                               mean=np.full(n, 0.2),
                               var=np.full(n, 1.0 / (2.0 * np.pi)),
                               bin_width=1.0, track_length=float(n))
        sig = np.linspace(0, n - 1.0, 200)
        val = cl_likelihood(sig, np.full(200, 0.2), stats)
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_one_sigma_offset(self):
        n = 50
        var = 0.04
        stats = ReferenceStats(centers=(np.arange(n) + 0.5),
                               mean=np.zeros(n), var=np.full(n, var),
                               bin_width=1.0, track_length=float(n))
        sig = np.linspace(0, n - 1.0, 100)
        peak = 1.0 / np.sqrt(2 * np.pi * var)
        val = cl_likelihood(sig, np.full(100, np.sqrt(var)), stats)
        assert val == pytest.approx(np.exp(-0.5) * peak, rel=1e-12)

    def test_centered_rollout_maximizes_over_offsets(self):
        sig = np.arange(0.5, 100.0, 1.0)
        profile = 0.2 * np.sin(sig / 8.0)
        stats = build_reference_stats([(sig, profile), (sig, profile + 0.01),
                                       (sig, profile - 0.01)], 100.0)
        mu, _ = stats.lookup(sig)
        scores = {off: cl_likelihood(sig, mu + off, stats)
                  for off in np.linspace(-0.5, 0.5, 21)}
        best = max(scores, key=scores.get)
        assert best == pytest.approx(0.0, abs=1e-9)


class TestOlError:
    class _ConstantPolicy:
        def __init__(self, value):
            self.value = value

        def act(self, state, warm=None):
            from mimic_mpc.dynamics import ControlInput
            return ControlInput(self.value, "delta"), {}

    def test_perfect_policy_scores_zero(self):
        pairs = [(VehicleState(d=0.1), 0.25)] * 5
        mean, std = ol_error(self._ConstantPolicy(0.25), pairs)
        assert mean == 0.0 and std == 0.0

    def test_constant_bias(self):
        pairs = [(VehicleState(), 0.1), (VehicleState(), 0.3)]
        mean, std = ol_error(self._ConstantPolicy(0.2), pairs)
        assert mean == pytest.approx(0.1)
        assert std == pytest.approx(0.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ol_error(self._ConstantPolicy(0.0), [])


class TestOffroad:
    def test_centered_rollout_is_clean(self):
        trace = make_trace(d=np.zeros(50))
        assert offroad_count(trace, 3.5) == 0

    def test_each_violating_step_counts(self):
        d = np.zeros(50)
        d[10:20] = 1.76
        trace = make_trace(d=d)
        assert offroad_count(trace, 3.5) == 10

    def test_truncated_remainder_counts(self):
        trace = make_trace(d=np.zeros(30), truncated=True, planned=100)
        assert offroad_count(trace, 3.5) == 100 - 29

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_monotone_under_pointwise_enlargement(self, scale):
        rng = np.random.default_rng(1)
        d = rng.uniform(-2.5, 2.5, 80)
        base = offroad_count(make_trace(d=d), 3.5)
        grown = offroad_count(make_trace(d=d * (1.0 + scale)), 3.5)
        assert grown >= base


class TestJerk:
    def test_straight_steady_rollout_zero(self, params):
        trace = make_trace(d=np.zeros(100))
        mean, std = lateral_jerk_stats(trace, params)
        assert mean == 0.0 and std == 0.0

    def test_sinusoid_peak_matches_analytic(self):
        # a_y = sin(2 pi 0.5 t): |j_y| peaks at 2 pi 0.5 = pi
        t = np.arange(0, 20.0, 0.1)
        a_y = np.sin(2 * np.pi * 0.5 * t)
        j = jerk_from_lateral_accel(a_y, 0.1)
        assert np.max(np.abs(j)) == pytest.approx(np.pi, rel=0.02)

    def test_needs_three_samples(self):
        with pytest.raises(DataError):
            jerk_from_lateral_accel(np.array([0.0, 1.0]), 0.1)


class TestSrr:
    def test_constant_steering_zero(self, params):
        assert srr(np.full(600, 0.2), 0.1, params) == 0.0

    def test_sinusoid_reversal_rate(self, params):
        # hand-wheel amplitude 0.2 rad (11.5 deg) at 0.2 Hz over 60 s:
        # two reversals per period, twelve periods
        t = np.arange(0, 60.0, 0.1)
        road = (0.2 / params.steering_ratio) * np.sin(2 * np.pi * 0.2 * t)
        rate = srr(road, 0.1, params)
        assert rate == pytest.approx(24.0, abs=1.0)

    def test_small_amplitude_below_threshold(self, params):
        t = np.arange(0, 60.0, 0.1)
        road = (np.deg2rad(2.0) / params.steering_ratio) * np.sin(2 * np.pi * 0.2 * t)
        assert srr(road, 0.1, params) == 0.0

    def test_invariant_under_offset_and_sign(self, params):
        rng = np.random.default_rng(3)
        road = 0.02 * np.cumsum(rng.standard_normal(600)) * 0.1
        base = srr(road, 0.1, params)
        assert srr(road + 0.05, 0.1, params) == base
        assert srr(-road, 0.1, params) == base

    def test_short_trace_rejected(self, params):
        with pytest.raises(DataError):
            srr(np.zeros(10), 0.1, params)


class TestReport:
    def make_report(self):
        return MetricsReport(
            config={"policy": "mpc", "algorithm": "bc", "control": "delta",
                    "d_la": 30.0},
            ol_error_mean=0.12, ol_error_std=0.03, cl_likelihood=0.93,
            offroad_count=0, jerk_mean=0.13, jerk_std=0.19,
            d_mean=-0.58, d_std=0.04, srr=52.9)

    def test_json_roundtrip(self, tmp_path):
        report = self.make_report()
        report.save_json(tmp_path / "metrics.json")
        import json
        again = MetricsReport.from_json_dict(
            json.loads((tmp_path / "metrics.json").read_text()))
        assert again == report

    def test_json_is_deterministic(self, tmp_path):
        report = self.make_report()
        report.save_json(tmp_path / "a.json")
        report.save_json(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_table_contains_columns(self):
        table = render_report_table([self.make_report()])
        assert "Off-Road" in table and "SRR" in table
        assert "mpc bc delta 30.0" in table
