import numpy as np
import pytest

from ehdr.hdr import HdrImage, exposure_compensate, linearize, luminance
from ehdr.simulator import (
    BracketSpec,
    CalibrationError,
    NoiseModel,
    SceneMotion,
    SimulatorConfig,
    calibrate_threshold,
    count_events,
    make_dynamic_scene,
    reference_exposure_scale,
    simulate_events,
    synthesize_bracket,
)

C = 0.2
EPS = 1e-3


def intensities(log_levels):
    """Single-pixel luminance frames whose log(I + eps) follow ``log_levels``."""
    return [np.full((1, 1), np.exp(v) - EPS) for v in log_levels]


def run(log_levels, times=None, c=C):
    times = np.arange(len(log_levels)) * 1000 if times is None else times
    return simulate_events(intensities(log_levels), times, SimulatorConfig(c, EPS))


class TestCrossingRule:
    def test_constant_sequence_is_silent(self):
        frames = [np.full((4, 4, 3), 0.3)] * 3
        assert len(simulate_events(frames, [0, 1000, 2000])) == 0

    def test_exact_threshold_fires_once_at_frame_time(self, backend):
        s = run([0.0, C])
        assert [tuple(e) for e in s] == [(1000, 0, 0, 1)]

    def test_two_and_a_half_thresholds(self, backend):
        # crossings at C and 2C of a 2.5C linear rise: t = 400 and 800
        s = run([0.0, 2.5 * C])
        assert [(e.t, e.p) for e in s] == [(400, 1), (800, 1)]

    def test_residual_carries_over(self, backend):
        # the leftover 0.5C plus another 0.5C completes a third crossing
        s = run([0.0, 2.5 * C, 3.0 * C])
        assert [(e.t, e.p) for e in s] == [(400, 1), (800, 1), (2000, 1)]

    def test_negative_crossings(self, backend):
        s = run([0.0, -2.0 * C])
        assert [(e.t, e.p) for e in s] == [(500, -1), (1000, -1)]

    def test_reversal_uses_last_event_reference(self, backend):
        # up C (event, ref = C), back to 0 (event, ref = 0)
        s = run([0.0, C, 0.0])
        assert [(e.t, e.p) for e in s] == [(1000, 1), (2000, -1)]

    def test_per_pixel_times_strictly_increase(self, rng, backend):
        frames = [rng.uniform(0.01, 1.0, (6, 7, 3)) for _ in range(6)]
        s = simulate_events(frames, np.arange(6) * 1000, SimulatorConfig(0.1))
        ev = s.events
        assert np.all(np.diff(ev["t"].astype(np.int64)) >= 0)
        for pix in set(zip(ev["x"], ev["y"])):
            t = ev["t"][(ev["x"] == pix[0]) & (ev["y"] == pix[1])].astype(np.int64)
            assert np.all(np.diff(t) > 0)

    def test_count_monotone_in_threshold(self, rng):
        frames = [rng.uniform(0.01, 1.0, (8, 8, 3)) for _ in range(5)]
        ts = np.arange(5) * 1000
        counts = [count_events(frames, ts, SimulatorConfig(c)) for c in (0.05, 0.1, 0.2, 0.4, 0.8)]
        assert counts == sorted(counts, reverse=True) and counts[0] > counts[-1]

    @pytest.mark.parametrize("frames, ts", [
        ([np.ones((2, 2))], [0]),
        ([np.ones((2, 2))] * 2, [0, 0]),
        ([np.ones((2, 2)), np.full((2, 2), np.inf)], [0, 1]),
    ])
    def test_input_errors(self, frames, ts):
        with pytest.raises(ValueError):
            simulate_events(frames, ts)

    @pytest.mark.parametrize("kw", [{"contrast_threshold": 0}, {"log_eps": -1}, {"frame_skip": -1}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SimulatorConfig(**kw)


class TestCalibration:
    @pytest.fixture
    def ramp(self):
        # 16 pixels with log slopes spread over 1.5 .. 6 per frame interval
        slopes = np.linspace(1.5, 6.0, 16)
        frames = [np.exp(slopes * k).reshape(4, 4) - EPS for k in range(5)]
        return frames, np.arange(5) * 1000

    def test_lower_bound_returned_at_its_own_rate(self, ramp):
        frames, ts = ramp
        rate_lo = count_events(frames, ts, SimulatorConfig(0.1, EPS)) / 4
        assert calibrate_threshold(frames, ts, rate_lo, 0.1, 5.0, EPS) == pytest.approx(0.1)

    def test_half_rate_reproduced(self, ramp):
        frames, ts = ramp
        target = count_events(frames, ts, SimulatorConfig(0.3, EPS)) / 4 / 2
        hist = []
        c = calibrate_threshold(frames, ts, target, 0.05, 5.0, EPS, history=hist)
        got = count_events(frames, ts, SimulatorConfig(c, EPS)) / 4
        assert abs(got - target) <= 0.05 * target
        assert len(hist) <= 34

    def test_zero_target_unreachable(self):
        scene = make_dynamic_scene(0, (32, 32))
        with pytest.raises(CalibrationError):
            calibrate_threshold(scene.frames, scene.timestamps, 0.0, 0.05, 2.0)

    def test_target_above_range(self, ramp):
        frames, ts = ramp
        with pytest.raises(CalibrationError):
            calibrate_threshold(frames, ts, 1e9, 0.05, 5.0, EPS)


class TestBracketSynthesis:
    def test_saturated_reference_stays_one(self):
        ldr = synthesize_bracket(np.ones((2, 2, 3)), 0, BracketSpec(exposure_scale=1.0), NoiseModel.noiseless())
        np.testing.assert_array_equal(ldr.pixels, 1.0)

    def test_half_linear_quantizes_to_186(self):
        ldr = synthesize_bracket(np.full((1, 1, 3), 0.5), 0, BracketSpec(exposure_scale=1.0), NoiseModel.noiseless())
        assert ldr.pixels[0, 0, 0] == pytest.approx(186 / 255, abs=1e-7)
        assert abs(0.5 ** (1 / 2.2) - 186 / 255) < 1 / 510

    def test_fstop_plus_two_quadruples(self):
        spec = BracketSpec(fstops=(-3, 0, 2), exposure_scale=1.0)
        hdr = np.full((1, 1, 3), 0.01)
        a = linearize(synthesize_bracket(hdr, 0, spec, NoiseModel.noiseless(16)))
        b = linearize(synthesize_bracket(hdr, 2, spec, NoiseModel.noiseless(16)))
        assert b[0, 0, 0] / a[0, 0, 0] == pytest.approx(4.0, rel=1e-3)

    def test_median_anchor(self, rng):
        hdr = rng.uniform(0.1, 50.0, (16, 16, 3))
        k = reference_exposure_scale(hdr)
        assert np.median(luminance(hdr)) * k == pytest.approx(0.18)

    def test_round_trip_recovers_radiance(self, rng):
        spec = BracketSpec(exposure_scale=1.0)
        hdr = rng.uniform(0.02, 0.1, (8, 8, 3))
        for f in spec.fstops:
            ldr = synthesize_bracket(hdr, f, spec, NoiseModel.noiseless())
            rec = exposure_compensate(ldr) / 2.0 ** min(spec.fstops)
            lin = hdr * 2.0 ** f
            # one gamma-space quantization step, propagated through v ** 2.2
            bound = 2.2 * np.clip(lin ** (1 / 2.2) + 1 / 255, 0, 1) ** 1.2 / 255 / 2.0 ** f
            assert np.all(np.abs(rec - hdr) <= bound + 1e-7)

    def test_noise_is_seeded(self):
        hdr = np.full((8, 8, 3), 0.3)
        spec = BracketSpec(exposure_scale=1.0)
        a = synthesize_bracket(hdr, 0, spec, NoiseModel(), rng_seed=3).pixels
        b = synthesize_bracket(hdr, 0, spec, NoiseModel(), rng_seed=3).pixels
        c = synthesize_bracket(hdr, 0, spec, NoiseModel(), rng_seed=4).pixels
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_exposure_times_relative_to_shortest(self):
        spec = BracketSpec()
        assert [spec.exposure_time(f) for f in spec.fstops] == [1.0, 8.0, 64.0]

    def test_one_reference_required(self):
        with pytest.raises(ValueError):
            BracketSpec(fstops=(-2, 2))

    def test_negative_radiance_rejected(self):
        with pytest.raises(ValueError):
            synthesize_bracket(-np.ones((1, 1, 3)), 0, BracketSpec(exposure_scale=1.0), NoiseModel())

    def test_normalize_units(self):
        spec = BracketSpec(exposure_scale=2.0)
        out = spec.normalize(HdrImage(np.full((1, 1, 3), 4.0)))
        assert out.pixels[0, 0, 0] == pytest.approx(4.0 * 2.0 / 8)


class TestDynamicScene:
    def test_static_frames_identical(self):
        s = make_dynamic_scene(3, motion=SceneMotion.static())
        for f in s.frames:
            np.testing.assert_array_equal(f, s.frames[0])
        np.testing.assert_array_equal(s.gt.pixels, s.frames[s.reference_index])

    def test_camera_translation_shifts_two_pixels(self):
        s = make_dynamic_scene(5, motion=SceneMotion((2.0, 0.0), (0.0, 0.0), (0.0, 0.0)))
        np.testing.assert_allclose(s.frames[1][:, 2:], s.frames[0][:, :-2], rtol=1e-5)

    def test_object_translation_moves_disc_centroid(self):
        s = make_dynamic_scene(6, motion=SceneMotion((0.0, 0.0), (2.0, 0.0), (0.0, 0.0)))
        # the disc interior of frame 1 is frame 0's interior moved 2 px right
        cx, cy = s.params["disc_center"]
        cx += 2.0 * (1 - s.reference_index)  # centre at frame 1
        v, u = np.mgrid[0:64, 0:64] + 0.5
        inside = np.hypot(u - cx, v - cy) < s.params["radius"] - 6
        assert inside.sum() > 20
        moved = np.roll(s.frames[0], 2, axis=1)
        np.testing.assert_allclose(s.frames[1][inside], moved[inside], rtol=1e-3)

    @pytest.mark.parametrize("seed", range(6))
    def test_dynamic_range_four_decades(self, seed):
        s = make_dynamic_scene(seed)
        assert s.frames.max() / s.frames.min() >= 1e4

    def test_bracket_layout(self):
        s = make_dynamic_scene(0, frame_skip=2)
        assert s.bracket_indices == (0, 3, 6)
        np.testing.assert_array_equal(s.bracket_times, [0, 3000, 6000])

    def test_render_matches_frames(self):
        s = make_dynamic_scene(2)
        np.testing.assert_array_equal(s.render(s.timestamps[4]), s.frames[4])

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            make_dynamic_scene(0, (16, 16))

    def test_seeded(self):
        a, b = make_dynamic_scene(9), make_dynamic_scene(9)
        np.testing.assert_array_equal(a.frames, b.frames)
