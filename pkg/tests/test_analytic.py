import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RESNET200, VGG16
from netsim.analytic import (AnalyticInputs, MechanismFlags, block_matches_agg,
                             iteration_time, mechanism_threshold,
                             ring_overhead, second_ring_overhead,
                             speedup_curve, stagger_hurts, step_times)
from netsim.errors import ValidationError
from netsim.trace import ModelProfile, ParamSpec


def inputs(w=1, p=1, model=RESNET200):
    return AnalyticInputs(m=model["m"], w=w, p=p, b=model["b"],
                          c_f=model["c_f"], c_b=model["c_b"])


class TestStepTimes:
    def test_resnet_single_worker(self):
        d, a = step_times(inputs(w=1))
        assert d == pytest.approx(0.16962)  # wire 0.064 hides under compute
        assert a == pytest.approx(0.3838)

    def test_resnet_six_workers_network_bound_aggregation(self):
        d, a = step_times(inputs(w=6))
        assert a == pytest.approx(6 * 1.6e9 / 25e9)
        assert a > 0.3838

    def test_compute_dominant_ignores_flags(self):
        huge = AnalyticInputs(m=1.0, w=64, p=1, b=1e9, c_f=5.0, c_b=7.0)
        for mc in (False, True):
            for agg in (False, True):
                d, a = step_times(huge, MechanismFlags(mc, agg))
                assert (d, a) == (5.0, 7.0)

    def test_sharded_servers(self):
        d, a = step_times(inputs(w=8, p=4))
        assert a == pytest.approx(max(0.3838, 8 * 1.6e9 / (4 * 25e9)))


class TestIterationTime:
    def test_resnet_baseline(self):
        assert iteration_time(inputs(w=1)) == pytest.approx(0.55342)

    def test_both_flags_compute_bound(self):
        x = AnalyticInputs(m=1.0, w=32, p=1, b=1e9, c_f=0.4, c_b=0.6)
        assert iteration_time(
            x, MechanismFlags(True, True)) == pytest.approx(1.0)

    def test_vgg_distribution_network_bound(self):
        d, _ = step_times(inputs(w=1, model=VGG16))
        assert d == pytest.approx(6.58e9 / 25e9)
        assert d == pytest.approx(0.2632)


class TestThresholds:
    def test_resnet_multicast(self):
        assert mechanism_threshold(inputs(), "multicast") == 3

    def test_resnet_in_net_agg(self):
        assert mechanism_threshold(inputs(), "in_net_agg") == 6

    def test_vgg_multicast(self):
        assert mechanism_threshold(inputs(model=VGG16), "multicast") == 1

    def test_vgg_in_net_agg(self):
        assert mechanism_threshold(inputs(model=VGG16), "in_net_agg") == 2

    def test_unknown_mechanism(self):
        with pytest.raises(ValidationError):
            mechanism_threshold(inputs(), "teleport")

    @given(st.floats(min_value=1e6, max_value=1e11),
           st.floats(min_value=1e-3, max_value=2.0),
           st.floats(min_value=1e-3, max_value=2.0))
    @settings(max_examples=60)
    def test_multicast_threshold_not_above_agg_when_cf_smaller(self, m, c_f, extra):
        x = AnalyticInputs(m=m, w=1, p=1, b=25e9, c_f=c_f, c_b=c_f + extra)
        assert (mechanism_threshold(x, "multicast")
                <= mechanism_threshold(x, "in_net_agg"))

    @given(st.floats(min_value=1e6, max_value=1e11),
           st.floats(min_value=1e-3, max_value=5.0))
    @settings(max_examples=60)
    def test_threshold_marks_network_crossover(self, m, c_f):
        x = AnalyticInputs(m=m, w=1, p=1, b=25e9, c_f=c_f, c_b=c_f)
        t = mechanism_threshold(x, "multicast")
        shard_wire = m / (1 * x.b)
        assert t * shard_wire > c_f
        if t > 1:
            assert (t - 1) * shard_wire <= c_f


class TestSpeedupCurve:
    def test_flat_below_threshold(self):
        pts = speedup_curve(inputs(), MechanismFlags(multicast=True),
                            range(1, 3))
        assert all(s == 1.0 for _w, s in pts)

    def test_resnet_multicast_at_three(self):
        (_w, s), = speedup_curve(inputs(), MechanismFlags(multicast=True), [3])
        expected = (3 * 0.064 + 0.3838) / (0.16962 + 0.3838)
        assert s == pytest.approx(expected)
        assert s == pytest.approx(1.0404, abs=5e-5)

    def test_monotone_nondecreasing(self):
        pts = speedup_curve(inputs(), MechanismFlags(True, True), range(1, 40))
        speeds = [s for _w, s in pts]
        assert all(b >= a for a, b in zip(speeds, speeds[1:]))
        assert all(s >= 1.0 for s in speeds)

    def test_empty_range_rejected(self):
        with pytest.raises(ValidationError):
            speedup_curve(inputs(), MechanismFlags(True, False), [])


class TestRingOverhead:
    def test_vgg_32_workers(self):
        assert ring_overhead(5.44e9, 32, 10e9) == pytest.approx(33.728)

    def test_two_workers(self):
        assert ring_overhead(7.0, 2, 1.0) == pytest.approx(14.0)

    def test_vanishing_parameter(self):
        assert ring_overhead(0.0, 8, 1e9) == 0.0

    def test_single_worker_rejected(self):
        with pytest.raises(ValidationError):
            ring_overhead(1.0, 1, 1.0)


class TestSecondRing:
    def test_vgg_values(self):
        plain = second_ring_overhead(6.58e9, 32, 25e9)
        mc = second_ring_overhead(6.58e9, 32, 25e9, multicast=True)
        assert plain == pytest.approx(0.254975)
        assert mc == pytest.approx(0.2632)
        assert plain <= mc

    def test_limit_ratio_to_one(self):
        plain = second_ring_overhead(1e9, 10_000, 1e9)
        mc = second_ring_overhead(1e9, 10_000, 1e9, multicast=True)
        assert plain / mc == pytest.approx(1.0, abs=1e-3)

    def test_two_workers(self):
        assert second_ring_overhead(4.0, 2, 1.0) == pytest.approx(2.0)
        assert second_ring_overhead(4.0, 2, 1.0, multicast=True) == 4.0

    @given(st.integers(min_value=2, max_value=4096))
    def test_plain_never_exceeds_multicast(self, w):
        assert (second_ring_overhead(1e9, w, 1e9)
                <= second_ring_overhead(1e9, w, 1e9, multicast=True))


class TestBlockMatchesAgg:
    def test_true_case(self):
        prof = ModelProfile(params=(
            ParamSpec("a", size=0.4e9, bp_compute=0.3),
            ParamSpec("b", size=0.1e9, bp_compute=0.1),
        ))
        # b1=0.1, m/b=0.5, c_b=0.4 -> 0.6 > 0.4
        assert block_matches_agg(prof, 1e9) is True

    def test_false_case(self):
        prof = ModelProfile(params=(
            ParamSpec("a", size=0.05e9, bp_compute=0.3),
            ParamSpec("b", size=0.05e9, bp_compute=0.0),
        ))
        # b1=0, m/b=0.1, c_b=0.3
        assert block_matches_agg(prof, 1e9) is False

    def test_vgg_like(self, vgg_profile):
        assert block_matches_agg(vgg_profile, 25e9) is True


class TestStaggerHurts:
    def test_zero_delay_never_hurts(self):
        assert stagger_hurts(0.0, 5.0, 1.0) is False

    def test_big_delay_hurts(self):
        assert stagger_hurts(1.0, 0.8, 0.2) is True

    def test_boundary_is_strict(self):
        assert stagger_hurts(0.5, 0.75, 0.25) is False


class TestModelProperties:
    def test_flags_on_independent_of_w(self):
        both = MechanismFlags(True, True)
        times = {iteration_time(inputs(w=w), both) for w in (1, 2, 8, 64)}
        assert len(times) == 1

    def test_baseline_nondecreasing_in_w(self):
        ts = [iteration_time(inputs(w=w)) for w in range(1, 30)]
        assert all(b >= a for a, b in zip(ts, ts[1:]))

    def test_baseline_nonincreasing_in_b(self):
        ts = [iteration_time(AnalyticInputs(m=1.6e9, w=8, p=1, b=b,
                                            c_f=0.16962, c_b=0.3838))
              for b in (1e9, 5e9, 25e9, 100e9)]
        assert all(b <= a for a, b in zip(ts, ts[1:]))

    def test_time_saved_exactly_linear_past_knee(self):
        flags = MechanismFlags(multicast=True)
        saved = [iteration_time(inputs(w=w)) - iteration_time(inputs(w=w), flags)
                 for w in range(40, 46)]
        deltas = [b - a for a, b in zip(saved, saved[1:])]
        for d in deltas:
            assert d == pytest.approx(1.6e9 / 25e9, rel=1e-9)

    def test_validation(self):
        with pytest.raises(ValidationError):
            AnalyticInputs(m=0, w=1, p=1, b=1, c_f=1, c_b=1)
        with pytest.raises(ValidationError):
            AnalyticInputs(m=1, w=0, p=1, b=1, c_f=1, c_b=1)
