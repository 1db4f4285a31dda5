import numpy as np
import pytest

from pqauth import chaos01, signal
from pqauth.errors import FormatError, InsufficientDataError, ParameterError, ShapeError


def lagrange_p(n: np.ndarray, c: float) -> np.ndarray:
    """Closed form of sum_{k=1..n} cos(kc)."""
    return np.sin(n * c / 2.0) * np.cos((n + 1) * c / 2.0) / np.sin(c / 2.0)


def lagrange_q(n: np.ndarray, c: float) -> np.ndarray:
    """Closed form of sum_{k=1..n} sin(kc)."""
    return np.sin(n * c / 2.0) * np.sin((n + 1) * c / 2.0) / np.sin(c / 2.0)


class TestTranslationVars:
    def test_zero_forcing(self):
        traj = chaos01.translation_vars(np.zeros(50), chaos01.PqParams(c=1.1))
        assert np.array_equal(traj.p, np.zeros(50))
        assert np.array_equal(traj.q, np.zeros(50))

    def test_unit_signal_c_pi(self):
        traj = chaos01.translation_vars(np.ones(10), chaos01.PqParams(c=np.pi))
        n = np.arange(1, 11)
        expected_p = np.where(n % 2 == 1, -1.0, 0.0)
        assert np.allclose(traj.q, 0.0, atol=1e-12)
        assert np.allclose(traj.p, expected_p, atol=1e-12)

    def test_unit_signal_closed_form_at_n10(self):
        c = 1.0
        traj = chaos01.translation_vars(np.ones(10), chaos01.PqParams(c=c))
        expected = np.sin(10 * c / 2) * np.cos(11 * c / 2) / np.sin(c / 2)
        assert abs(traj.p[-1] - expected) < 1e-12

    def test_unit_signal_closed_form_n1000_random_c(self):
        rng = np.random.default_rng(42)
        n = np.arange(1, 1001)
        for c in rng.uniform(*chaos01.C_INTERVAL, size=20):
            traj = chaos01.translation_vars(np.ones(1000), chaos01.PqParams(c=float(c)))
            assert np.max(np.abs(traj.p - lagrange_p(n, c))) < 1e-9
            assert np.max(np.abs(traj.q - lagrange_q(n, c))) < 1e-9

    def test_stepwise_matches_vectorized_alpha_zero(self):
        rng = np.random.default_rng(7)
        s = rng.normal(size=10_000)
        params = chaos01.PqParams(c=1.7)
        a = chaos01.translation_vars(s, params)
        b = chaos01.translation_vars_stepwise(s, params)
        assert np.max(np.abs(a.p - b.p)) < 1e-9
        assert np.max(np.abs(a.q - b.q)) < 1e-9
        assert np.max(np.abs(a.phi - b.phi)) < 1e-9

    def test_stepwise_matches_vectorized_alpha_nonzero(self):
        rng = np.random.default_rng(8)
        s = rng.normal(size=2000)
        params = chaos01.PqParams(c=1.2, alpha=0.3)
        a = chaos01.translation_vars(s, params)
        b = chaos01.translation_vars_stepwise(s, params)
        assert np.max(np.abs(a.p - b.p)) < 1e-9
        assert np.max(np.abs(a.q - b.q)) < 1e-9

    def test_linear_in_signal(self):
        rng = np.random.default_rng(9)
        s = rng.normal(size=500)
        params = chaos01.PqParams(c=2.0)
        base = chaos01.translation_vars(s, params)
        scaled = chaos01.translation_vars(4.0 * s, params)
        # power-of-two scale commutes with every float operation exactly
        assert np.array_equal(scaled.p, 4.0 * base.p)
        assert np.array_equal(scaled.q, 4.0 * base.q)
        general = chaos01.translation_vars(1.7 * s, params)
        assert np.allclose(general.p, 1.7 * base.p, rtol=1e-12, atol=1e-12)

    def test_lengths_match_input(self):
        traj = chaos01.translation_vars(np.ones(321), chaos01.PqParams())
        assert len(traj) == 321 and traj.phi.size == 321

    def test_white_noise_growth_is_sublinear(self):
        worst = 0.0
        for seed in range(20):
            s = np.random.default_rng(seed).standard_normal(10_000)
            traj = chaos01.translation_vars(s, chaos01.PqParams(c=1.7))
            worst = max(worst, np.max(np.abs(traj.p)) / s.size)
        assert worst < 0.5

    def test_too_short_rejected(self):
        with pytest.raises(InsufficientDataError):
            chaos01.translation_vars(np.array([1.0]), chaos01.PqParams())

    def test_c_out_of_range_rejected(self):
        with pytest.raises(ParameterError):
            chaos01.PqParams(c=7.0)


class TestDefaultC:
    def test_declared_default(self):
        assert chaos01.default_c(0) == 1.7
        assert chaos01.default_c(2) == 1.7

    def test_deterministic(self):
        assert chaos01.default_c(1) == chaos01.default_c(1)

    def test_configured_sweep(self):
        sweep = chaos01.c_sweep(3)
        assert len(set(sweep.tolist())) == 3
        lo, hi = chaos01.C_INTERVAL
        assert np.all((sweep > lo) & (sweep < hi))
        assert chaos01.default_c(1, sweep) == sweep[1]

    def test_negative_channel_rejected(self):
        with pytest.raises(ParameterError):
            chaos01.default_c(-1)


def traj_from(p, q):
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    return chaos01.PqTrajectory(p=p, q=q, phi=np.zeros_like(p), params=chaos01.PqParams())


def oracle_raster_line(traj: chaos01.PqTrajectory, size: int) -> np.ndarray:
    """Dense-sampling rasterization oracle (exact for axis/diagonal lines)."""
    rows, cols = chaos01.trajectory_pixels(traj, size)
    image = np.zeros((size, size), dtype=np.uint8)
    for i in range(rows.size - 1):
        steps = max(abs(int(rows[i + 1]) - int(rows[i])), abs(int(cols[i + 1]) - int(cols[i]))) + 1
        rr = np.rint(np.linspace(rows[i], rows[i + 1], steps)).astype(int)
        cc = np.rint(np.linspace(cols[i], cols[i + 1], steps)).astype(int)
        image[rr, cc] = 1
    if rows.size == 1:
        image[rows[0], cols[0]] = 1
    return image


class TestRasterize:
    def test_constant_trajectory_single_center_pixel(self):
        img = chaos01.rasterize(traj_from([2.5] * 7, [2.5] * 7), size=299)
        assert img.sum() == 1
        assert img[149, 149] == 1

    def test_diagonal_staircase(self):
        n = np.arange(1.0, 200.0)
        img = chaos01.rasterize(traj_from(n, n), size=99)
        rows, cols = np.nonzero(img)
        order = np.argsort(cols)
        assert np.all(np.diff(rows[order]) <= 0)  # q grows upward
        # endpoints sit in opposite corner quadrants
        assert cols.min() < 99 // 4 and cols.max() > 3 * 99 // 4
        assert rows.max() > 3 * 99 // 4 and rows.min() < 99 // 4

    def test_matches_dense_oracle_on_lines(self):
        cases = [
            (np.arange(1.0, 120.0), np.arange(1.0, 120.0)),  # diagonal
            (np.arange(1.0, 120.0), np.zeros(119)),  # horizontal
            (np.zeros(119), np.arange(1.0, 120.0)),  # vertical
        ]
        for p, q in cases:
            traj = traj_from(p, q)
            assert np.array_equal(chaos01.rasterize(traj, 64), oracle_raster_line(traj, 64))

    def test_binary_and_nonempty(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=1000)
        traj = chaos01.translation_vars(s, chaos01.PqParams(c=1.7))
        img = chaos01.rasterize(traj, 128)
        assert set(np.unique(img)).issubset({0, 1})
        assert img.sum() >= 1

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=800)
        traj = chaos01.translation_vars(s, chaos01.PqParams(c=1.3))
        shifted = chaos01.PqTrajectory(
            p=traj.p + 1234.5, q=traj.q - 77.25, phi=traj.phi, params=traj.params
        )
        assert np.array_equal(chaos01.rasterize(traj, 128), chaos01.rasterize(shifted, 128))

    def test_margin_keeps_border_clear(self):
        rng = np.random.default_rng(4)
        s = rng.normal(size=1000)
        img = chaos01.rasterize(chaos01.translation_vars(s, chaos01.PqParams()), 128)
        assert img[0, :].sum() == 0 and img[-1, :].sum() == 0
        assert img[:, 0].sum() == 0 and img[:, -1].sum() == 0


def make_segments(x: np.ndarray, sid="s"):
    rec = signal.PpgRecord(sid, 250.0, x)
    return signal.segment(rec, signal.Consecutive())


class TestFeaturize:
    def test_shape_from_3000_sample_record(self):
        x = np.random.default_rng(0).normal(size=3000)
        img = chaos01.featurize(make_segments(x), chaos01.PqParams())
        assert img.pixels.shape == (299, 299, 3)

    def test_zero_segments_center_pixel_channels(self):
        img = chaos01.featurize(make_segments(np.zeros(3000)), chaos01.PqParams())
        for ch in range(3):
            plane = img.pixels[:, :, ch]
            assert plane.sum() == 1
            assert plane[149, 149] == 1

    def test_identical_segments_identical_channels(self):
        x = np.random.default_rng(1).normal(size=1000)
        segs = make_segments(np.tile(x, 3))
        img = chaos01.featurize(segs, chaos01.PqParams())
        assert np.array_equal(img.pixels[:, :, 0], img.pixels[:, :, 1])
        assert np.array_equal(img.pixels[:, :, 1], img.pixels[:, :, 2])

    def test_deterministic(self):
        x = np.random.default_rng(2).normal(size=3000)
        a = chaos01.featurize(make_segments(x), chaos01.PqParams(), size=128)
        b = chaos01.featurize(make_segments(x), chaos01.PqParams(), size=128)
        assert np.array_equal(a.pixels, b.pixels)

    def test_provenance_recorded(self):
        x = np.random.default_rng(3).normal(size=3000)
        img = chaos01.featurize(make_segments(x, sid="alice"), chaos01.PqParams(c=1.9))
        assert img.subject_id == "alice"
        assert img.segment_starts == (0, 1000, 2000)
        assert img.c == (1.9, 1.9, 1.9)

    def test_wrong_segment_count_rejected(self):
        x = np.random.default_rng(4).normal(size=3000)
        with pytest.raises(ShapeError):
            chaos01.featurize(make_segments(x)[:2], chaos01.PqParams())

    def test_mixed_subjects_rejected(self):
        x = np.random.default_rng(5).normal(size=3000)
        segs = make_segments(x)
        alien = signal.Segment("other", 0, segs[0].samples)
        with pytest.raises(ParameterError):
            chaos01.featurize([segs[0], segs[1], alien], chaos01.PqParams())


def logistic_series(r: float, n: int, x0=0.1, burn=500) -> np.ndarray:
    x = x0
    for _ in range(burn):
        x = r * x * (1 - x)
    out = np.empty(n)
    for i in range(n):
        x = r * x * (1 - x)
        out[i] = x
    return out


class TestComputeK:
    def test_zero_signal_k_zero(self):
        result = chaos01.compute_k(np.zeros(2000), [1.0, 1.7])
        assert result.k_median == 0.0
        assert np.array_equal(result.k_values, [0.0, 0.0])

    def test_periodic_vs_chaotic_small(self):
        cs = np.random.default_rng(11).uniform(*chaos01.C_INTERVAL, size=20)
        regular = chaos01.compute_k(logistic_series(3.5, 2000), cs)
        chaotic = chaos01.compute_k(logistic_series(4.0, 2000), cs)
        assert regular.k_median < 0.2
        assert chaotic.k_median > 0.8

    def test_too_short_rejected(self):
        with pytest.raises(InsufficientDataError):
            chaos01.compute_k(np.ones(999), [1.0])

    def test_empty_c_rejected(self):
        with pytest.raises(ParameterError):
            chaos01.compute_k(np.ones(2000), [])

    def test_one_k_per_c(self):
        result = chaos01.compute_k(logistic_series(3.9, 1500), [0.9, 1.3, 1.7])
        assert result.k_values.shape == (3,)
        assert result.k_median == np.median(result.k_values)


class TestImageIo:
    def make_image(self, size=32):
        x = np.random.default_rng(6).normal(size=3000)
        return chaos01.featurize(make_segments(x), chaos01.PqParams(), size=size)

    def test_pqi_round_trip(self, tmp_path):
        img = self.make_image()
        path = tmp_path / "img.pqi"
        chaos01.write_pqi(img, path)
        back = chaos01.read_pqi_pixels(path)
        assert np.array_equal(back, img.pixels)

    def test_pqi_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pqi"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError):
            chaos01.read_pqi_pixels(path)

    def test_pqi_truncated(self, tmp_path):
        img = self.make_image()
        path = tmp_path / "img.pqi"
        chaos01.write_pqi(img, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError) as err:
            chaos01.read_pqi_pixels(path)
        assert err.value.offset is not None

    def test_pgm_export(self, tmp_path):
        img = self.make_image()
        paths = chaos01.write_pgm_channels(img, tmp_path / "img")
        assert len(paths) == 3
        raw = paths[0].read_bytes()
        assert raw.startswith(b"P5\n32 32\n255\n")
        body = raw.split(b"\n", 3)[3]
        assert set(body) <= {0, 255}
