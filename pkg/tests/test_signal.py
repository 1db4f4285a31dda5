import numpy as np
import pytest

from pqauth import signal
from pqauth.errors import (
    DegenerateRangeError,
    FormatError,
    InsufficientDataError,
    ParameterError,
)

FS = signal.DEFAULT_SAMPLE_RATE_HZ


def sine_amplitude(x: np.ndarray, fs: float, freq_hz: float) -> float:
    """Least-squares amplitude of the freq_hz component (robust to edge spikes)."""
    t = np.arange(x.size) / fs
    design = np.column_stack([np.sin(2 * np.pi * freq_hz * t), np.cos(2 * np.pi * freq_hz * t)])
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    return float(np.hypot(*coef))


def quiet_profile(**kwargs) -> signal.SubjectProfile:
    base = dict(
        heart_rate_bpm_mean=75.0,
        heart_rate_bpm_std=0.0,
        resp_depth=0.0,
        baseline_wander_amp=0.0,
        noise_sigma=0.0,
    )
    base.update(kwargs)
    return signal.SubjectProfile(**base)


class TestSynthPpg:
    def test_all_stochastic_terms_disabled_gives_strict_periodicity(self):
        # 75 bpm -> 0.8 s period -> exactly 200 samples at 250 Hz
        rec = signal.synth_ppg(quiet_profile(), 30.0, seed=5)
        period = int(round(60.0 / 75.0 * FS))
        x = rec.samples
        assert np.allclose(x[:-period], x[period:], atol=1e-9)

    def test_periodicity_crosscorrelation_with_hr_std_zero(self):
        rec = signal.synth_ppg(quiet_profile(), 30.0, seed=5)
        period = int(round(60.0 / 75.0 * FS))
        x = rec.samples - rec.samples.mean()
        a, b = x[:-period], x[period:]
        rho = np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b))
        assert rho >= 0.999

    def test_deterministic_for_profile_and_seed(self):
        prof = signal.default_registry(3)[2]
        a = signal.synth_ppg(prof, 20.0, seed=99)
        b = signal.synth_ppg(prof, 20.0, seed=99)
        assert np.array_equal(a.samples, b.samples)

    def test_seed_changes_output(self):
        prof = signal.default_registry(1)[0]
        a = signal.synth_ppg(prof, 20.0, seed=1)
        b = signal.synth_ppg(prof, 20.0, seed=2)
        assert not np.array_equal(a.samples, b.samples)

    def test_twelve_seconds_is_3000_samples(self):
        rec = signal.synth_ppg(signal.default_registry(1)[0], 12.0, seed=0)
        assert len(rec) == 3000

    def test_distinct_profiles_distinct_morphologies(self):
        p1, p2 = signal.default_registry(2)
        a = signal.synth_ppg(p1, 12.0, seed=4)
        b = signal.synth_ppg(p2, 12.0, seed=4)
        assert not np.allclose(a.samples, b.samples, atol=1e-3)

    def test_short_duration_rejected(self):
        with pytest.raises(ParameterError):
            signal.synth_ppg(quiet_profile(), 3.0, seed=0)

    def test_invalid_profile_rejected(self):
        with pytest.raises(ParameterError):
            signal.SubjectProfile(heart_rate_bpm_mean=20.0)
        with pytest.raises(ParameterError):
            signal.SubjectProfile(gauss1_width_s=0.0)
        with pytest.raises(ParameterError):
            signal.SubjectProfile(noise_sigma=-0.1)


def record_of(x, rate=FS, sid="t"):
    return signal.PpgRecord(subject_id=sid, sample_rate_hz=rate, samples=x)


class TestBandpass:
    SPEC = signal.FilterSpec(0.5, 8.0)

    def measured_ratio(self, freq_hz, duration_s=30.0, spec=None):
        spec = spec or self.SPEC
        t = np.arange(int(duration_s * FS)) / FS
        rec = record_of(np.sin(2 * np.pi * freq_hz * t))
        out = signal.bandpass(rec, spec).samples
        tail = out[out.size // 2 :]
        return sine_amplitude(tail, FS, freq_hz)

    def test_dc_rejected(self):
        rec = record_of(np.ones(int(30 * FS)))
        out = signal.bandpass(rec, self.SPEC).samples
        assert np.max(np.abs(out[out.size // 2 :])) < 1e-3

    def test_dc_analytic_gain_is_zero(self):
        assert signal.bandpass_gain(self.SPEC, FS, 0.0) == 0.0

    def test_passband_4hz(self):
        ratio = self.measured_ratio(4.0)
        analytic = signal.bandpass_gain(self.SPEC, FS, 4.0)
        assert ratio >= 0.95
        assert abs(ratio - analytic) <= 0.02

    def test_stopband_005hz(self):
        ratio = self.measured_ratio(0.05, duration_s=60.0)
        analytic = signal.bandpass_gain(self.SPEC, FS, 0.05)
        assert ratio <= 0.1
        assert abs(ratio - analytic) <= 0.02

    def test_lower_band_passes_03hz(self):
        ratio = self.measured_ratio(0.3, duration_s=60.0, spec=signal.FilterSpec(0.1, 8.0))
        assert ratio >= 0.9

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=5000)
        y = rng.normal(size=5000)
        a, b = 1.7, -0.6
        lhs = signal.bandpass(record_of(a * x + b * y), self.SPEC).samples
        rhs = a * signal.bandpass(record_of(x), self.SPEC).samples \
            + b * signal.bandpass(record_of(y), self.SPEC).samples
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(lhs))

    def test_output_finite_and_same_length(self):
        rng = np.random.default_rng(4)
        for n in (1050, 5000):
            rec = record_of(rng.normal(size=n) * 100)
            out = signal.bandpass(rec, self.SPEC)
            assert len(out) == n
            assert np.all(np.isfinite(out.samples))

    def test_cutoff_at_nyquist_rejected(self):
        with pytest.raises(ParameterError):
            signal.bandpass(record_of(np.ones(2000)), signal.FilterSpec(0.5, 125.0))

    def test_inverted_corners_rejected(self):
        with pytest.raises(ParameterError):
            signal.FilterSpec(8.0, 0.5).validate(FS)


class TestNormalize01:
    def test_affine_map(self):
        out = signal.normalize01(record_of(np.array([2.0, 4.0, 6.0])))
        assert np.array_equal(out.samples, [0.0, 0.5, 1.0])

    def test_affine_map_negative(self):
        out = signal.normalize01(record_of(np.array([-1.0, 0.0, 3.0])))
        assert np.array_equal(out.samples, [0.0, 0.25, 1.0])

    def test_identity_when_already_unit_range(self):
        x = np.array([0.0, 0.3, 0.7, 1.0])
        out = signal.normalize01(record_of(x))
        assert np.array_equal(out.samples, x)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=500) * 7 + 3
        once = signal.normalize01(record_of(x)).samples
        twice = signal.normalize01(record_of(once)).samples
        assert np.max(np.abs(once - twice)) <= 1e-12

    def test_constant_signal_rejected(self):
        with pytest.raises(DegenerateRangeError):
            signal.normalize01(record_of(np.full(10, 2.5)))


class TestPreprocess:
    def test_raw_is_identity(self):
        rec = record_of(np.random.default_rng(1).normal(size=1200))
        out = signal.preprocess(rec, signal.PreprocessMode.Raw)
        assert np.array_equal(out.samples, rec.samples)

    def test_norm_mode_hits_unit_range(self):
        rec = signal.synth_ppg(signal.default_registry(1)[0], 20.0, seed=3)
        out = signal.preprocess(rec, signal.PreprocessMode.Band05_8Norm)
        assert out.samples.min() == 0.0
        assert out.samples.max() == 1.0

    def test_band01_8_passes_03hz(self):
        t = np.arange(int(60 * FS)) / FS
        rec = record_of(np.sin(2 * np.pi * 0.3 * t))
        out = signal.preprocess(rec, signal.PreprocessMode.Band01_8).samples
        assert sine_amplitude(out[out.size // 2 :], FS, 0.3) >= 0.9

    def test_mode_parsing(self):
        assert signal.PreprocessMode.from_string("raw") is signal.PreprocessMode.Raw
        assert signal.PreprocessMode.from_string("band-0.5-8-norm") is signal.PreprocessMode.Band05_8Norm
        assert signal.PreprocessMode.from_string("Band05_8") is signal.PreprocessMode.Band05_8
        with pytest.raises(ParameterError):
            signal.PreprocessMode.from_string("bandpass")


class TestSegment:
    def test_consecutive_3000(self):
        rec = record_of(np.arange(3000.0))
        segs = signal.segment(rec, signal.Consecutive())
        assert [s.start_index for s in segs] == [0, 1000, 2000]
        assert all(s.samples.size == 1000 for s in segs)

    def test_consecutive_exact_1000(self):
        segs = signal.segment(record_of(np.arange(1000.0)), signal.Consecutive())
        assert len(segs) == 1

    def test_consecutive_windows_tile_prefix(self):
        x = np.random.default_rng(0).normal(size=4321)
        segs = signal.segment(record_of(x), signal.Consecutive())
        assert len(segs) == 4
        recon = np.concatenate([s.samples for s in segs])
        assert np.array_equal(recon, x[:4000])

    def test_random_starts_reproducible(self):
        x = np.random.default_rng(1).normal(size=int(60 * FS))
        a = signal.segment(record_of(x), signal.RandomStarts(150, seed=8))
        b = signal.segment(record_of(x), signal.RandomStarts(150, seed=8))
        assert len(a) == 150
        assert [s.start_index for s in a] == [s.start_index for s in b]
        assert all(0 <= s.start_index <= x.size - 1000 for s in a)

    def test_too_short_rejected(self):
        with pytest.raises(InsufficientDataError):
            signal.segment(record_of(np.ones(999)), signal.Consecutive())


class TestIo:
    def test_csv_round_trip(self, tmp_path):
        rec = signal.synth_ppg(signal.default_registry(1)[0], 6.0, seed=2)
        rec = signal.PpgRecord("user a", rec.sample_rate_hz, rec.samples)
        path = tmp_path / "r.csv"
        signal.write_ppg_csv(rec, path)
        back = signal.read_ppg_csv(path)
        assert back.subject_id == "user a"
        assert back.sample_rate_hz == rec.sample_rate_hz
        assert np.array_equal(back.samples, rec.samples)

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope,x\nsample_rate_hz,250\n1.0\n")
        with pytest.raises(FormatError):
            signal.read_ppg_csv(path)

    def test_bin_round_trip(self, tmp_path):
        rec = signal.synth_ppg(signal.default_registry(1)[0], 6.0, seed=2)
        path = tmp_path / "r.ppg"
        signal.write_ppg_bin(rec, path)
        back = signal.read_ppg_bin(path, subject_id="x")
        assert back.subject_id == "x"
        assert back.samples.size == rec.samples.size
        assert np.allclose(back.samples, rec.samples, atol=1e-5)

    def test_bin_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppg"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(FormatError):
            signal.read_ppg_bin(path)

    def test_bin_truncated(self, tmp_path):
        rec = record_of(np.ones(100))
        path = tmp_path / "t.ppg"
        signal.write_ppg_bin(rec, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            signal.read_ppg_bin(path)


class TestPpgRecordInvariants:
    def test_rejects_nan(self):
        with pytest.raises(ParameterError):
            record_of(np.array([1.0, np.nan]))

    def test_rejects_empty(self):
        with pytest.raises(ParameterError):
            record_of(np.array([]))

    def test_rejects_bad_rate(self):
        with pytest.raises(ParameterError):
            signal.PpgRecord("x", 0.0, np.ones(10))
