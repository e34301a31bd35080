"""Tests for the periodic frame difference, cohort summaries and the cut-off check."""

import numpy as np
import pytest

from cardiophase.descriptor import compute_descriptor, select_focus
from cardiophase.evalqc import (
    PhaseEval,
    QcVerdict,
    afd,
    align_descriptor,
    average_aligned,
    detect_cutoff,
    evaluate_phases,
    pfd,
    summarize_cohort,
)
from cardiophase.imgvol import preprocess
from cardiophase.phantom import PhantomConfig, generate_phantom
from cardiophase.phases import PhaseSet
from cardiophase.register import register_sequence


class TestPFD:
    """Tests for the periodic frame difference."""

    def test_examples(self):
        assert pfd(0, 29, 30) == 1
        assert pfd(5, 8, 30) == 3
        assert pfd(0, 15, 30) == 15
        assert afd(0, 29) == 29

    def test_matches_exhaustive_oracle(self):
        """pFD equals the shortest walk around the cycle for every pair, T = 2..40."""
        for T in range(2, 41):
            for p in range(T):
                for q in range(T):
                    forward = (q - p) % T
                    assert pfd(p, q, T) == min(forward, T - forward)

    def test_metric_properties(self, rng):
        for _ in range(200):
            T = int(rng.integers(2, 60))
            a, b, c = rng.integers(0, T, size=3)
            assert pfd(a, b, T) == pfd(b, a, T)
            assert pfd(a, c, T) <= pfd(a, b, T) + pfd(b, c, T)
            assert 0 <= pfd(a, b, T) <= T // 2

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            pfd(30, 0, 30)
        with pytest.raises(ValueError):
            pfd(-1, 0, 30)


class TestEvaluatePhases:
    """Tests for per-sequence evaluation and cohort summaries."""

    def test_per_phase_values(self):
        gt = PhaseSet(ed=0, ms=5, es=10, pf=14, md=22, T=30)
        pred = PhaseSet(ed=29, ms=5, es=12, pf=14, md=21, T=30)
        result = evaluate_phases(pred, gt)
        assert result.per_phase_pfd == {"ed": 1, "ms": 0, "es": 2, "pf": 0, "md": 1}
        assert result.mean == pytest.approx(0.8)
        assert result.sd == pytest.approx(np.std([1, 0, 2, 0, 1]))
        assert result.per_phase_afd == {"ed": 29, "ms": 0, "es": 2, "pf": 0, "md": 1}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_phases(PhaseSet(0, 1, 2, 3, 4, T=10), PhaseSet(0, 1, 2, 3, 4, T=12))

    def test_cohort_summary(self):
        gt = PhaseSet(ed=0, ms=5, es=10, pf=14, md=22, T=30)
        evals = [evaluate_phases(gt.shift(k), gt) for k in (0, 1, 3)]
        summary = summarize_cohort(evals)
        assert summary["ed"]["n"] == 3
        assert summary["ed"]["mean"] == pytest.approx(4 / 3)
        assert summary["ed"]["median"] == 1.0
        assert summary["ed"]["max"] == 3.0
        assert summary["ed"]["sd"] == pytest.approx(np.std([0, 1, 3], ddof=1))
        assert summary["ed"]["afd_mean"] == pytest.approx(4 / 3)

    def test_plain_difference_ignores_the_wrap(self):
        """Moving ED from frame 0 back to 29 costs one frame periodically, 29 frames plainly."""
        gt = PhaseSet(ed=0, ms=5, es=10, pf=14, md=22, T=30)
        summary = summarize_cohort([evaluate_phases(gt.shift(-1), gt), evaluate_phases(gt, gt)])
        assert summary["ed"]["mean"] == pytest.approx(0.5)
        assert summary["ed"]["afd_mean"] == pytest.approx(14.5)
        assert summary["ms"]["afd_mean"] == pytest.approx(0.5)

    def test_summary_without_plain_differences(self):
        summary = summarize_cohort([PhaseEval({"ed": 1, "ms": 0, "es": 0, "pf": 0, "md": 0}, 30)])
        assert summary["ed"]["mean"] == 1.0
        assert summary["ed"]["afd_mean"] is None

    def test_single_sequence_summary_has_zero_sd(self):
        gt = PhaseSet(ed=0, ms=5, es=10, pf=14, md=22, T=30)
        assert summarize_cohort([evaluate_phases(gt, gt)])["ms"]["sd"] == 0.0


class TestDetectCutoff:
    """Tests for the cut-off quality check."""

    def test_outlier_is_flagged(self):
        v = np.array([1.0, 1.1, 0.9, 1.0, 1.05, 0.95, 6.0])
        verdict = detect_cutoff(v)
        assert verdict.cutoff_flag
        assert verdict.last_to_first_mag == 6.0
        assert verdict.robust_score == pytest.approx((6.0 - 1.0) / (0.05 + 1e-9))

    def test_typical_last_frame(self):
        v = np.array([1.0, 1.1, 0.9, 1.0, 1.05, 0.95, 1.02])
        assert not detect_cutoff(v).cutoff_flag

    def test_constant_curve(self):
        """With zero MAD only the epsilon keeps the score finite; equal values give score 0."""
        verdict = detect_cutoff(np.ones(10))
        assert verdict.robust_score == 0.0
        assert not verdict.cutoff_flag

    def test_score_is_scale_invariant(self, rng):
        v = rng.random(20) + 0.5
        a = detect_cutoff(v).robust_score
        b = detect_cutoff(4.0 * v).robust_score
        assert a == pytest.approx(b, rel=1e-6)

    def test_too_short(self):
        with pytest.raises(ValueError):
            detect_cutoff([1.0, 2.0, 3.0])

    def test_verdict_round_trip(self):
        verdict = QcVerdict(True, 3.5, 8.25, 5.0)
        assert QcVerdict.from_dict(verdict.to_dict()) == verdict


class TestAlignDescriptor:
    """Tests for key-frame aligned resampling."""

    def test_anchors_land_on_segment_starts(self):
        T = 30
        curve = np.arange(T, dtype=np.float64)
        ps = PhaseSet(ed=0, ms=5, es=10, pf=14, md=22, T=T)
        aligned = align_descriptor(curve, ps, points_per_segment=4)
        assert aligned.shape == (20,)
        np.testing.assert_allclose(aligned[[0, 4, 8, 12, 16]], [0.0, 5.0, 10.0, 14.0, 22.0])

    def test_wraps_around_the_cycle(self):
        T = 10
        curve = np.arange(T, dtype=np.float64)
        ps = PhaseSet(ed=8, ms=1, es=3, pf=5, md=7, T=T)
        aligned = align_descriptor(curve, ps, points_per_segment=2)
        # 9.5 lies between the last frame (9) and frame 0 of the next cycle
        np.testing.assert_allclose(aligned[:2], [8.0, 4.5])
        np.testing.assert_allclose(aligned[2], 1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            align_descriptor(np.zeros(12), PhaseSet(0, 1, 2, 3, 4, T=10))

    def test_average_of_shifted_copies(self):
        """A curve and its cyclic shift, each with shifted key frames, align onto the same samples."""
        T = 30
        curve = np.sin(2 * np.pi * np.arange(T) / T)
        ps = PhaseSet(ed=0, ms=5, es=10, pf=14, md=22, T=T)
        mean, sd = average_aligned([curve, np.roll(curve, 7)], [ps, ps.shift(7)], points_per_segment=5)
        np.testing.assert_allclose(mean, align_descriptor(curve, ps, 5))
        np.testing.assert_allclose(sd, 0.0, atol=1e-12)

    def test_average_of_different_lengths(self):
        a = np.linspace(0.0, 1.0, 20)
        b = np.linspace(0.0, 1.0, 40)
        mean, sd = average_aligned(
            [a, b], [PhaseSet(0, 4, 8, 12, 16, T=20), PhaseSet(0, 8, 16, 24, 32, T=40)], points_per_segment=4
        )
        assert mean.shape == sd.shape == (20,)
        expected = (np.array([0, 4, 8, 12, 16]) / 19 + np.array([0, 8, 16, 24, 32]) / 39) / 2
        np.testing.assert_allclose(mean[[0, 4, 8, 12, 16]], expected)

    def test_average_needs_matching_inputs(self):
        with pytest.raises(ValueError):
            average_aligned([np.zeros(10)], [])
        with pytest.raises(ValueError):
            average_aligned([], [])


@pytest.mark.slow
class TestCutoffOnRegisteredFields:
    """The cut-off check on registered phantom sequences."""

    @pytest.mark.parametrize("seed", range(10))
    def test_only_truncated_sequence_is_flagged(self, seed):
        """A full cycle passes and the same cycle cut at 80 % is flagged."""
        verdicts = {}
        for fraction in (1.0, 0.8):
            cfg = PhantomConfig(
                shape=(30, 8, 24, 24), inner_radius=6.0, wall_thickness=2.0, seed=seed, truncate_fraction=fraction
            )
            vol, _ = generate_phantom(cfg)
            pvol, _ = preprocess(vol)
            desc = compute_descriptor(register_sequence(pvol), select_focus("vol", pvol))
            verdicts[fraction] = detect_cutoff(desc.vnorm_raw)
        assert not verdicts[1.0].cutoff_flag, verdicts[1.0]
        assert verdicts[0.8].cutoff_flag, verdicts[0.8]
