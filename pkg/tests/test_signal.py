"""Preprocessing: noise model, denoising, band filtering, detection."""

import numpy as np
import pytest

from floorvib.errors import CalibrationError, ConfigError
from floorvib.signal import (ARRIVAL_BAND, DETECTION_BAND, BandSpec,
                             SensorChannel, VibrationRecord, bandpass_samples,
                             denoise, denoise_record, detect_footsteps,
                             detection_peaks, estimate_noise,
                             estimate_noise_model)
from floorvib.simfloor import (ConstantField, FloorModel, GaitTemplate,
                               SimScenario, synthesize, DEFAULT_FLOOR_BOUNDS,
                               DEFAULT_SENSORS)

FS = 500.0


def _channel(samples, sid=0, pos=(0.0, 0.0)):
    return SensorChannel(sensor_id=sid, position=pos, samples=samples,
                         sample_rate_hz=FS)


def _noise_record(seconds=10.0, sigma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * FS)
    chans = [_channel(rng.normal(0, sigma, n), sid, (float(sid), 0.0))
             for sid in range(3)]
    return VibrationRecord(channels=chans)


class TestEstimateNoise:
    def test_white_noise_std_within_5pct(self):
        rng = np.random.default_rng(1)
        ch = _channel(rng.normal(0.0, 1.0, int(10 * FS)))
        stats = estimate_noise(ch, (0.0, 10.0))
        assert abs(stats.std - 1.0) <= 0.05
        assert abs(stats.mean) <= 0.02

    def test_constant_signal_rejected_as_degenerate(self):
        ch = _channel(np.zeros(int(2 * FS)))
        with pytest.raises(CalibrationError):
            estimate_noise(ch, (0.0, 2.0))

    def test_window_shorter_than_half_second(self):
        rng = np.random.default_rng(2)
        ch = _channel(rng.normal(0, 1, int(2 * FS)))
        with pytest.raises(CalibrationError):
            estimate_noise(ch, (0.0, 0.4))

    def test_window_clipped_by_record_end(self):
        rng = np.random.default_rng(3)
        ch = _channel(rng.normal(0, 1, int(0.6 * FS)))
        with pytest.raises(CalibrationError):
            estimate_noise(ch, (0.3, 2.0))  # only 0.3 s usable


class TestDenoise:
    def test_pure_noise_rms_never_increases(self):
        rng = np.random.default_rng(4)
        ch = _channel(rng.normal(0, 1, int(4 * FS)))
        stats = estimate_noise(ch, (0.0, 4.0))
        out = denoise(ch, stats)
        assert np.sqrt(np.mean(out.samples ** 2)) <= \
            np.sqrt(np.mean(ch.samples ** 2))

    def test_high_snr_burst_peak_preserved(self):
        # 20 dB amplitude SNR: burst peak 10x the noise std.
        rng = np.random.default_rng(5)
        n = int(4 * FS)
        t = np.arange(n) / FS
        tau = t - 2.0
        env = np.where(tau < 0, 0.0,
                       np.where(tau <= 0.06, tau / 0.06,
                                np.exp(-(tau - 0.06) / 0.1)))
        burst = 10.0 * env * np.sin(2 * np.pi * 175.0 * tau)
        noisy = burst + rng.normal(0, 1.0, n)
        ch = _channel(noisy)
        stats = estimate_noise(ch, (0.0, 1.5))
        out = denoise(ch, stats)
        k = np.abs(burst).argmax()
        window = slice(k - 5, k + 6)
        peak_in = np.max(np.abs(burst[window]))
        peak_out = np.max(np.abs(out.samples[window]))
        assert abs(peak_out - peak_in) / peak_in <= 0.10


class TestBandpass:
    def test_inband_tone_within_1db(self):
        t = np.arange(int(10 * FS)) / FS
        x = np.sin(2 * np.pi * 175.0 * t)
        y = bandpass_samples(x, ARRIVAL_BAND, FS)
        mid = slice(len(t) // 4, 3 * len(t) // 4)
        amp_db = 20 * np.log10(np.max(np.abs(y[mid])))
        assert abs(amp_db) <= 1.0

    def test_stopband_tone_below_1pct(self):
        t = np.arange(int(10 * FS)) / FS
        x = np.sin(2 * np.pi * 30.0 * t)
        y = bandpass_samples(x, ARRIVAL_BAND, FS)
        mid = slice(len(t) // 4, 3 * len(t) // 4)
        assert np.max(np.abs(y[mid])) <= 0.01

    def test_impulse_peak_not_shifted(self):
        x = np.zeros(2000)
        x[937] = 1.0
        y = bandpass_samples(x, ARRIVAL_BAND, FS)
        assert abs(int(np.argmax(np.abs(y))) - 937) <= 1

    def test_band_outside_nyquist_rejected(self):
        with pytest.raises(ConfigError):
            bandpass_samples(np.zeros(100), BandSpec(150.0, 300.0), FS)
        with pytest.raises(ConfigError):
            BandSpec(200.0, 150.0)

    def test_detection_band_touches_nyquist(self):
        # 10-250 Hz at fs=500 degenerates to a high-pass and stays valid.
        rng = np.random.default_rng(6)
        y = bandpass_samples(rng.normal(0, 1, 2048), DETECTION_BAND, FS)
        assert np.all(np.isfinite(y))

    def test_idempotent_interior_band_energy(self):
        # Applying the filter twice changes energy in the interior 60% of
        # the band by less than 1% (the edges are transition regions).
        rng = np.random.default_rng(7)
        x = rng.normal(0, 1, 50000)
        y1 = bandpass_samples(x, ARRIVAL_BAND, FS)
        y2 = bandpass_samples(y1, ARRIVAL_BAND, FS)
        freqs = np.fft.rfftfreq(len(x), 1 / FS)
        sel = (freqs >= 160.0) & (freqs <= 190.0)

        def energy(sig):
            return float(np.sum(np.abs(np.fft.rfft(sig))[sel] ** 2))

        assert abs(energy(y2) - energy(y1)) / energy(y1) < 0.01


class TestDetection:
    def test_pure_noise_record_empty(self):
        record = _noise_record()
        noise = estimate_noise_model(record, (0.0, 10.0))
        assert detect_footsteps(record, noise) == []

    def test_simulated_record_exact_count_and_timing(self):
        # Short-stepped walk along the lower sensor line, so the travel
        # delay to the loudest sensor stays well inside +/-20 ms.
        floor = FloorModel(bounds=DEFAULT_FLOOR_BOUNDS,
                           field=ConstantField(100.0),
                           sensors=dict(DEFAULT_SENSORS))
        sc = SimScenario(floor=floor,
                         gait=GaitTemplate(start=(0.5, 0.35), step_length=0.5,
                                           steps=8),
                         snr_db=25.0, seed=9, trial_id="det")
        record, events, _ = synthesize(sc)
        noise = estimate_noise_model(record, (0.0, 0.75))
        segments = detect_footsteps(denoise_record(record, noise), noise)
        assert len(segments) == len(events) == 8
        for ev, seg in zip(events, segments):
            force_peak = ev.strike_time + sc.onset_ramp_s
            assert abs(seg.center_time - force_peak) <= 0.020

    def test_threshold_is_strict(self):
        score = np.zeros(100)
        score[40:60] = 3.0  # exactly at the threshold: not an event
        assert detection_peaks(score, 3.0, 10) == []
        score[50] = 3.0001
        assert detection_peaks(score, 3.0, 10) == [50]

    def test_translation_equivariance(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        noise = estimate_noise_model(record, (0.0, 0.75))
        segs = detect_footsteps(record, noise)

        shift = 137  # samples
        shifted = VibrationRecord(channels=[
            SensorChannel(sensor_id=c.sensor_id, position=c.position,
                          samples=np.concatenate([np.zeros(shift), c.samples]),
                          sample_rate_hz=c.sample_rate_hz)
            for c in record.channels], t0=record.t0)
        segs2 = detect_footsteps(shifted, noise)
        assert len(segs) == len(segs2)
        dt = shift / record.sample_rate_hz
        for a, b in zip(segs, segs2):
            assert abs((b.center_time - a.center_time) - dt) \
                <= 1.5 / record.sample_rate_hz

    def test_scale_equivariance(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[1]
        noise = estimate_noise_model(record, (0.0, 0.75))
        segs = detect_footsteps(record, noise)

        c = 37.5
        scaled = VibrationRecord(channels=[
            SensorChannel(sensor_id=ch.sensor_id, position=ch.position,
                          samples=c * ch.samples,
                          sample_rate_hz=ch.sample_rate_hz)
            for ch in record.channels], t0=record.t0)
        noise_s = estimate_noise_model(scaled, (0.0, 0.75))
        segs2 = detect_footsteps(scaled, noise_s)
        assert [s.center_time for s in segs] == [s.center_time for s in segs2]
        assert [s.detection_channel for s in segs] == \
            [s.detection_channel for s in segs2]

    def test_segment_window_exactly_point_eight_seconds(self, constant_suite):
        scenarios, data = constant_suite
        record, _, _ = data[0]
        noise = estimate_noise_model(record, (0.0, 0.75))
        for seg in detect_footsteps(record, noise):
            n = len(next(iter(seg.raw.values())))
            assert n == round(0.8 * record.sample_rate_hz)
            assert seg.end_time - seg.start_time == pytest.approx(0.8)
            assert seg.start_time <= seg.peak_times[seg.detection_channel] \
                <= seg.end_time

    def test_edge_segment_zero_padded_and_flagged(self):
        # A footstep right at the record start forces a truncated window.
        rng = np.random.default_rng(11)
        n = int(2.0 * FS)
        t = np.arange(n) / FS
        burst = np.where((t > 0.05) & (t < 0.25),
                         np.sin(2 * np.pi * 175 * t), 0.0)
        chans = [_channel(burst * (1 + 0.1 * sid) + rng.normal(0, 0.01, n),
                          sid, (float(sid), 0.0)) for sid in range(3)]
        record = VibrationRecord(channels=chans)
        noise = estimate_noise_model(record, (1.0, 2.0))
        segs = detect_footsteps(record, noise)
        assert segs and segs[0].truncated
