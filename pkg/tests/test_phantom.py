"""Tests for the analytic phantom and its ground truth."""

import numpy as np
import pytest

from cardiophase.descriptor import angle_field, focus_mse, focus_vol
from cardiophase.evalqc import detect_cutoff, evaluate_phases
from cardiophase.phantom import (
    PhantomConfig,
    analytic_field,
    contraction_profile,
    descriptor_from_truth,
    generate_phantom,
    radius,
    save_phantom,
    truth_phases,
)
from cardiophase.phases import extract_phases
from cardiophase.report import read_phases


def small_cycle(**kwargs):
    """A 30-frame phantom on an 8 x 24 x 24 grid."""
    return PhantomConfig(shape=(30, 8, 24, 24), inner_radius=6.0, wall_thickness=2.0, **kwargs)


class TestPhantomConfig:
    """Tests for phantom settings."""

    def test_default_center(self):
        assert PhantomConfig().center == (7.5, 31.5, 31.5)

    @pytest.mark.parametrize("amplitude", [0.0, 0.5, 0.7])
    def test_amplitude_limits(self, amplitude):
        with pytest.raises(ValueError):
            PhantomConfig(amplitude=amplitude)

    def test_shell_must_fit(self):
        with pytest.raises(ValueError):
            PhantomConfig(shape=(30, 16, 32, 32))

    def test_truncated_length(self):
        assert PhantomConfig(truncate_fraction=0.8).n_frames == 24


class TestProfile:
    """Tests for the contraction profile and the ground-truth key frames."""

    def test_profile_is_periodic_and_bounded(self):
        phi = np.linspace(0.0, 1.0, 501)
        s = contraction_profile(phi)
        assert s[0] == pytest.approx(0.0)
        assert s[-1] == pytest.approx(0.0, abs=1e-12)
        assert s.min() >= -1e-12
        assert s.max() == pytest.approx(1.0)

    def test_radius_never_exceeds_rest(self):
        cfg = PhantomConfig()
        r = radius(cfg, np.arange(cfg.T))
        assert r.max() <= cfg.inner_radius + 1e-12
        assert r.min() == pytest.approx(cfg.inner_radius * (1 - cfg.amplitude), rel=1e-3)

    def test_default_truth(self):
        assert truth_phases(PhantomConfig()).as_dict() == {"ed": 0, "ms": 5, "es": 10, "pf": 14, "md": 22}

    def test_offset_shifts_truth(self):
        base = truth_phases(PhantomConfig())
        for k in (1, 7, 29):
            assert truth_phases(PhantomConfig(phase_offset=k)).as_dict() == base.shift(k).as_dict()


class TestAnalyticFields:
    """Tests for the ground-truth displacement fields."""

    def test_fields_are_radial(self, small_phantom_config):
        cfg = small_phantom_config
        field = analytic_field(cfg, 2)
        offsets = np.stack(np.meshgrid(*(np.arange(n, dtype=float) for n in cfg.shape[1:]), indexing="ij"), axis=-1)
        offsets = offsets - np.asarray(cfg.center)
        np.testing.assert_allclose(np.cross(field.disp, offsets), 0.0, atol=1e-12)

    def test_angle_is_plus_minus_one_or_zero(self, small_phantom_config):
        cfg = small_phantom_config
        alpha = angle_field(analytic_field(cfg, 1), focus_vol(cfg.shape))
        assert set(np.unique(np.round(alpha, 9))) <= {-1.0, 0.0, 1.0}
        assert (alpha < 0).any()

    def test_systole_contracts_and_filling_expands(self, small_phantom_config):
        cfg = small_phantom_config
        truth = truth_phases(cfg)
        focus = focus_vol(cfg.shape)
        assert angle_field(analytic_field(cfg, truth.ms), focus).min() == pytest.approx(-1.0)
        assert angle_field(analytic_field(cfg, truth.pf), focus).max() == pytest.approx(1.0)

    def test_closed_cycle_sums_to_zero(self, small_phantom):
        _, truth = small_phantom
        total = np.sum([f.disp for f in truth.fields], axis=0)
        np.testing.assert_allclose(total, 0.0, atol=1e-10)

    def test_frame_out_of_range(self, small_phantom_config):
        with pytest.raises(ValueError):
            analytic_field(small_phantom_config, small_phantom_config.T)


class TestGeneratePhantom:
    """Tests for phantom generation."""

    def test_shapes(self, small_phantom, small_phantom_config):
        vol, truth = small_phantom
        assert vol.shape == small_phantom_config.shape
        assert vol.data.dtype == np.float32
        assert len(truth.fields) == vol.T
        assert vol.spacing == (2.5, 2.5, 2.5)

    def test_deterministic_for_a_seed(self, small_phantom_config):
        a, _ = generate_phantom(small_phantom_config)
        b, _ = generate_phantom(small_phantom_config)
        np.testing.assert_array_equal(a.data, b.data)
        c, _ = generate_phantom(PhantomConfig(shape=(12, 8, 24, 24), inner_radius=6.0, wall_thickness=2.0, seed=1))
        assert not np.array_equal(a.data, c.data)

    def test_truncation(self):
        vol, truth = generate_phantom(small_cycle(truncate_fraction=0.8))
        assert vol.T == 24
        assert truth.phases.T == 30
        assert len(truth.fields) == 24

    def test_vanishing_amplitude_is_static(self):
        """As the amplitude goes to zero the fields vanish and every frame equals the first."""
        vol, truth = generate_phantom(small_cycle(amplitude=1e-9))
        assert max(np.abs(f.disp).max() for f in truth.fields) < 1e-6
        np.testing.assert_allclose(vol.data, np.broadcast_to(vol.data[0], vol.shape), atol=1e-5)

    def test_mse_focus_near_center(self, small_phantom, small_phantom_config):
        vol, _ = small_phantom
        focus = focus_mse(vol)
        np.testing.assert_allclose(focus.coord, small_phantom_config.center, atol=0.5)

    def test_save_phantom(self, tmp_path, small_phantom, small_phantom_config):
        vol, truth = small_phantom
        volume_path, truth_path = save_phantom(tmp_path, vol, truth, small_phantom_config)
        assert volume_path.exists()
        assert (tmp_path / "fields" / "fields.json").exists()
        assert read_phases(truth_path) == truth.phases


class TestRuleSetOnTruth:
    """The key-frame rules applied to the registration-free descriptor of the phantom."""

    @pytest.mark.parametrize("amplitude", [0.15, 0.25, 0.35])
    @pytest.mark.parametrize("offset", [0, 3, 7, 11, 17, 23, 29])
    def test_rules_recover_truth(self, amplitude, offset):
        """Default grid: every key frame within one frame of the truth."""
        _, truth = generate_phantom(PhantomConfig(phase_offset=offset, amplitude=amplitude))
        predicted = extract_phases(descriptor_from_truth(truth))
        result = evaluate_phases(predicted, truth.phases)
        assert max(result.per_phase_pfd.values()) <= 1, result.per_phase_pfd

    def test_rules_recover_truth_on_small_grids(self, rng):
        """Random offsets and amplitudes on an 8 x 24 x 24 grid."""
        for _ in range(20):
            cfg = small_cycle(phase_offset=int(rng.integers(0, 30)), amplitude=float(rng.uniform(0.15, 0.3)))
            _, truth = generate_phantom(cfg)
            predicted = extract_phases(descriptor_from_truth(truth))
            result = evaluate_phases(predicted, truth.phases)
            assert max(result.per_phase_pfd.values()) <= 1, (cfg.phase_offset, result.per_phase_pfd)

    def test_cutoff_only_for_truncated_sequence(self):
        _, full = generate_phantom(small_cycle())
        _, cut = generate_phantom(small_cycle(truncate_fraction=0.8))
        assert not detect_cutoff(descriptor_from_truth(full).vnorm_raw).cutoff_flag
        assert detect_cutoff(descriptor_from_truth(cut).vnorm_raw).cutoff_flag
