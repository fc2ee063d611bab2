import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikecp.conformal import (
    CalibrationTable,
    SpikeCPConfig,
    UnsupportedMergeExponent,
    calibrate_dc_threshold,
    cm_pool,
    dc_snn_decide,
    p_value,
    pm_pool,
    predictive_set,
    select_dc_threshold,
    spikecp_decide,
    stopping_time,
)
from spikecp.snn import ScoreTrace, confidence, losses_from_confidence

CFG = SpikeCPConfig(p_targ=0.9, checkpoints=(20, 40, 60, 80), set_size_threshold=3)


def trace_from_counts(counts, checkpoints=(20, 40, 60, 80)):
    counts = np.asarray(counts, dtype=np.int64)
    conf = confidence(counts)
    return ScoreTrace(
        checkpoints=tuple(checkpoints),
        counts=counts,
        confidences=conf,
        losses=losses_from_confidence(conf),
    )


def random_setup(seed, k=3, n_cal=20, n_classes=4, checkpoints=(20, 40, 60, 80)):
    """Random but structurally valid traces + calibration table."""
    rng = np.random.default_rng(seed)
    traces = [
        trace_from_counts(
            np.cumsum(rng.integers(0, 3, size=(len(checkpoints), n_classes)), axis=0),
            checkpoints,
        )
        for _ in range(k)
    ]
    cal = CalibrationTable(
        checkpoints=tuple(checkpoints),
        losses=rng.uniform(0.0, 5.0, size=(k, len(checkpoints), n_cal)),
        num_classes=n_classes,
    )
    return traces, cal


class TestPValue:
    def test_minimal_loss_gives_max_p(self):
        assert p_value(0.1, np.array([0.2, 0.5, 0.9])) == 1.0

    def test_maximal_loss_gives_min_p(self):
        assert p_value(1.0, np.array([0.2, 0.5, 0.9])) == 0.25

    def test_tie_is_inclusive(self):
        assert p_value(0.5, np.array([0.2, 0.5, 0.9])) == 0.75

    def test_empty_calibration_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            p_value(0.5, np.array([]))

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        cal = rng.uniform(size=11)
        tests = rng.uniform(size=(4, 3))
        vec = p_value(tests, cal)
        for idx in np.ndindex(tests.shape):
            assert vec[idx] == p_value(float(tests[idx]), cal)

    @given(st.integers(1, 40), st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_output_on_rank_grid(self, n_cal, seed):
        rng = np.random.default_rng(seed)
        cal = rng.uniform(size=n_cal)
        p = p_value(float(rng.uniform()), cal)
        grid = np.arange(1, n_cal + 2) / (n_cal + 1)
        assert np.isclose(grid, p).any()


class TestPredictiveSet:
    def test_alpha_below_everything(self):
        assert predictive_set(np.array([0.9, 0.3, 0.05, 0.5]), 0.025) == (0, 1, 2, 3)

    def test_threshold_filters(self):
        assert predictive_set(np.array([0.9, 0.3, 0.05, 0.5]), 0.4) == (0, 3)

    def test_strict_inequality(self):
        assert predictive_set(np.array([0.4, 0.5]), 0.4) == (1,)

    def test_bonferroni_operating_point(self):
        assert CFG.alpha == pytest.approx((1 - 0.9) / 4)

    @given(st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_antitone_in_alpha(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(size=6)
        alphas = sorted(rng.uniform(0.01, 0.99, size=3))
        sets = [set(predictive_set(p, a)) for a in alphas]
        assert sets[0] >= sets[1] >= sets[2]


class TestStoppingTime:
    def test_first_crossing(self):
        assert stopping_time([10, 5, 3, 2], CFG) == 60

    def test_fallback_to_last(self):
        assert stopping_time([10, 9, 8, 7], CFG) == 80

    def test_immediate(self):
        assert stopping_time([1, 5, 5, 5], CFG) == 20

    def test_size_count_mismatch(self):
        with pytest.raises(ValueError):
            stopping_time([1, 2], CFG)


class TestCmPool:
    def test_arithmetic_mean_is_model_averaging(self):
        f = np.array([[0.6], [0.8]])
        assert cm_pool(f, 1.0)[0] == pytest.approx(0.7, abs=1e-12)

    def test_max_limit(self):
        assert cm_pool(np.array([[0.6], [0.8]]), math.inf)[0] == 0.8

    def test_min_limit(self):
        assert cm_pool(np.array([[0.6], [0.8]]), -math.inf)[0] == 0.6

    def test_quadratic_mean(self):
        got = cm_pool(np.array([[0.6], [0.8]]), 2.0)[0]
        assert got == pytest.approx(0.70711, abs=1e-5)

    def test_geometric_mean(self):
        got = cm_pool(np.array([[0.5], [0.02]]), 0.0)[0]
        assert got == pytest.approx(math.sqrt(0.5 * 0.02), rel=1e-12)

    def test_zero_entry_limits(self):
        f = np.array([[0.0], [0.8]])
        assert cm_pool(f, 0.0)[0] == 0.0
        assert cm_pool(f, -2.0)[0] == 0.0
        assert cm_pool(f, -math.inf)[0] == 0.0

    def test_matches_mean_within_1e12_on_random_input(self):
        rng = np.random.default_rng(7)
        f = rng.uniform(size=(6, 10))
        np.testing.assert_allclose(cm_pool(f, 1.0), f.mean(axis=0), rtol=0, atol=1e-12)


class TestPmPool:
    def test_min_mode_scales_by_k(self):
        assert pm_pool(np.array([0.2, 0.4]), -math.inf) == pytest.approx(0.4)

    def test_max_mode(self):
        assert pm_pool(np.array([0.2, 0.4]), math.inf) == 0.4

    def test_large_exponent_tracks_max(self):
        got = pm_pool(np.array([0.2, 0.4]), 45.0)
        assert got == pytest.approx(0.4, abs=1e-4)
        assert got >= 0.4

    def test_min_mode_clamped_to_one(self):
        assert pm_pool(np.array([0.9, 0.95, 0.99]), -math.inf) == 1.0

    def test_unsupported_exponents(self):
        for r in (0.0, -1.0, -45.0):
            with pytest.raises(UnsupportedMergeExponent):
                pm_pool(np.array([0.2, 0.4]), r)

    def test_single_member_identity_exact(self):
        p = np.array([0.3137254901960784])
        for r in (45.0, 2.0, math.inf, -math.inf):
            assert pm_pool(p, r) == p[0]

    @given(st.integers(0, 10**6), st.floats(1.0, 100.0))
    @settings(max_examples=60, deadline=None)
    def test_finite_exponent_dominates_max(self, seed, r):
        rng = np.random.default_rng(seed)
        p = rng.uniform(1e-4, 1.0, size=rng.integers(1, 8))
        assert pm_pool(p, r) >= p.max()


class TestSpikeCPDecide:
    def test_single_model_modes_identical(self):
        for seed in range(5):
            traces, cal = random_setup(seed, k=1)
            for r_cm, r_pm in ((1.0, 45.0), (2.0, math.inf), (math.inf, -math.inf)):
                a = spikecp_decide(traces, cal, CFG.with_(merge="cm", pool_exponent=r_cm))
                b = spikecp_decide(traces, cal, CFG.with_(merge="pm", pool_exponent=r_pm))
                assert a.stop_time == b.stop_time
                assert a.prediction_set == b.prediction_set
                np.testing.assert_array_equal(a.diagnostics, b.diagnostics)

    def test_single_trace_equals_singleton_list(self):
        traces, cal = random_setup(11, k=1)
        a = spikecp_decide(traces, cal, CFG)
        b = spikecp_decide(traces[0], cal, CFG)
        assert a.stop_time == b.stop_time
        assert a.prediction_set == b.prediction_set
        np.testing.assert_array_equal(a.diagnostics, b.diagnostics)

    def test_checkpoint_mismatch_rejected(self):
        traces, cal = random_setup(1, k=2)
        bad_cfg = CFG.with_(checkpoints=(10, 40, 60, 80))
        with pytest.raises(ValueError, match="checkpoints"):
            spikecp_decide(traces, cal, bad_cfg)

    def test_model_count_mismatch_rejected(self):
        traces, cal = random_setup(1, k=2)
        with pytest.raises(ValueError, match="models"):
            spikecp_decide(traces[:1], cal, CFG)

    def test_empty_set_is_allowed_and_stops(self):
        # calibration losses all tiny, test losses all huge: every class
        # rejected at the first checkpoint (n_cal large enough that the
        # minimum p-variable 1/(n+1) clears the threshold)
        traces, cal = random_setup(2, k=1, n_cal=50)
        tiny = CalibrationTable(
            checkpoints=cal.checkpoints,
            losses=np.full_like(cal.losses, 1e-6),
            num_classes=cal.num_classes,
        )
        decision = spikecp_decide(traces, tiny, CFG)
        assert decision.prediction_set == ()
        assert decision.stop_time == 20

    def test_diagnostics_cover_visited_checkpoints(self):
        traces, cal = random_setup(3, k=2)
        decision = spikecp_decide(traces, cal, CFG.with_(merge="pm", pool_exponent=45.0))
        assert decision.diagnostics.shape == (decision.stop_index + 1, cal.num_classes)

    def test_coverage_on_exchangeable_scores(self):
        # scores drawn i.i.d.: the true label's p-variable must keep it in
        # the set with frequency >= p_targ
        rng = np.random.default_rng(42)
        hits = 0
        trials = 400
        n_cal = 50
        cfg = CFG.with_(merge="pm", pool_exponent=45.0, set_size_threshold=4)
        for _ in range(trials):
            losses = rng.exponential(size=(2, 4, n_cal))
            cal = CalibrationTable(checkpoints=CFG.checkpoints, losses=losses, num_classes=4)
            label_losses = rng.exponential(size=(2, 4))
            traces = []
            for k in range(2):
                full = rng.exponential(size=(4, 4)) + 3.0  # other classes: larger losses
                full[:, 0] = label_losses[k]
                conf = np.exp(-full)
                traces.append(
                    ScoreTrace(CFG.checkpoints, np.zeros((4, 4), dtype=np.int64), conf, full)
                )
            decision = spikecp_decide(traces, cal, cfg)
            hits += 0 in decision.prediction_set
        assert hits / trials >= cfg.p_targ - 3 * math.sqrt(0.9 * 0.1 / trials)


class TestDcDecide:
    def test_first_crossing(self):
        conf = np.array([[0.6, 0.4], [0.85, 0.15], [0.95, 0.05]])
        d = dc_snn_decide(conf, [20, 40, 60], 0.9, horizon=80, top_k=1)
        assert d.stop_time == 60
        assert d.point_label == 0

    def test_low_threshold_stops_immediately(self):
        conf = np.array([[0.6, 0.4], [0.9, 0.1]])
        assert dc_snn_decide(conf, [20, 40], 0.5, horizon=80).stop_time == 20

    def test_no_crossing_falls_back_to_horizon(self):
        conf = np.array([[0.6, 0.4], [0.7, 0.3], [0.55, 0.45]])
        d = dc_snn_decide(conf, [20, 40, 60], 0.9, horizon=80)
        assert d.stop_time == 80
        assert d.stop_index == 2

    def test_argmax_tie_takes_lowest_index(self):
        conf = np.array([[0.5, 0.5]])
        d = dc_snn_decide(conf, [10], 0.4, horizon=10, top_k=1)
        assert d.point_label == 0
        assert d.top_set == (0,)

    def test_top_set_size(self):
        conf = np.array([[0.4, 0.3, 0.2, 0.1]])
        d = dc_snn_decide(conf, [10], 0.39, horizon=10, top_k=3)
        assert d.top_set == (0, 1, 2)


class TestDcCalibration:
    def test_selection_examples(self):
        grid = np.array([0.3, 0.6, 0.9])
        assert select_dc_threshold(grid, [0.7, 0.92, 0.95], 0.9) == 0.6
        assert select_dc_threshold(grid, [0.95, 0.96, 0.97], 0.9) == 0.3
        # infeasible: smallest maximizer wins the tie
        assert select_dc_threshold(grid, [0.80, 0.85, 0.85], 0.9) == 0.6

    def test_perfect_predictor_returns_grid_minimum(self):
        conf = np.zeros((10, 3, 4))
        labels = np.arange(10) % 4
        conf[np.arange(10), :, labels] = 1.0
        grid = np.arange(0.0, 1.0, 0.01)
        assert calibrate_dc_threshold(conf, labels, 0.9, grid, [20, 40, 60], 80) == 0.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        grid = np.round(np.arange(0.0, 1.0, 0.01), 2)
        for _ in range(20):
            n, n_times, c = 25, 3, 4
            conf = rng.dirichlet(np.ones(c) * rng.uniform(0.3, 3.0), size=(n, n_times))
            labels = rng.integers(0, c, size=n)
            p_targ = rng.uniform(0.3, 0.95)
            got = calibrate_dc_threshold(conf, labels, p_targ, grid, [1, 2, 3], 5)

            # independent oracle: per-example loop, literal rule scan
            accs = []
            for pth in grid:
                correct = 0
                for i in range(n):
                    stop = n_times - 1
                    for ti in range(n_times):
                        if conf[i, ti].max() >= pth:
                            stop = ti
                            break
                    correct += int(np.argmax(conf[i, stop]) == labels[i])
                accs.append(correct / n)
            accs = np.array(accs)
            want = grid[np.argmax(accs >= p_targ)] if (accs >= p_targ).any() else grid[np.argmax(accs)]
            assert got == float(want)
