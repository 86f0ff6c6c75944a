"""Calibration stage: arrival candidates, shortlisting, ratio and velocity
models, end-to-end calibration and profile serialization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from floorvib import fusion
from floorvib.errors import (CalibrationError, InputError, NoArrivalCandidate,
                             OrderInconsistent)
from floorvib.fusion import (ArrivalEstimate, CalibrationProfile,
                             FootstepEvent, VelocityProfile, VelocitySample,
                             arrival_band_peak, arrival_candidates, calibrate,
                             fit_ratio_model, fit_velocity_profile,
                             shortlist_by_distance_order, velocity_samples)
from floorvib.geometry import Rect
from floorvib.signal import (SensorChannel, VibrationRecord,
                             estimate_noise_model)
from floorvib.simfloor import (GaitTemplate, SimScenario, synthesize,
                               DEFAULT_SENSORS)

import helpers


class TestArrivalCandidates:
    def test_earliest_candidate_matches_truth(self):
        # SNR 20 dB: the earliest candidate lands within +/-2 samples
        # (4 ms at 500 Hz) of the true wave arrival.
        sc = SimScenario(floor=helpers.constant_floor(),
                         gait=GaitTemplate(steps=8), snr_db=20.0, seed=3,
                         trial_id="cand")
        record, events, truth = synthesize(sc)
        noise, layout, chosen, segs, evs = helpers.run_fusion_pipeline(
            record, events)
        truth_by = {(t.step_index, t.sensor_id): t for t in truth}
        ev_index = {e.strike_time: i for i, e in enumerate(events)}
        assert len(chosen) >= 6
        for c, seg, ev in zip(chosen, segs, evs):
            k = ev_index[ev.strike_time]
            for sid in c:
                cands = arrival_candidates(seg, ev, sid, noise[sid],
                                           sensor_position=layout[sid])
                err = cands[0].arrival_time - truth_by[(k, sid)].arrival_time
                assert abs(err) <= 2.0 / record.sample_rate_hz
                times = [e.arrival_time for e in cands]
                assert times == sorted(times)

    def test_no_candidate_above_bound(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        noise, layout, chosen, segs, evs = helpers.run_fusion_pipeline(
            record, events)
        # An absurdly high noise bound leaves nothing to pick.
        from floorvib.signal import NoiseStats
        loud = NoiseStats(mean=0.0, std=1e6, window_s=1.0)
        with pytest.raises(NoArrivalCandidate):
            arrival_candidates(segs[0], evs[0], 0, loud)

    def test_strike_after_peak_is_corrupt_label(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        noise, layout, chosen, segs, evs = helpers.run_fusion_pipeline(
            record, events)
        seg = segs[0]
        bad = FootstepEvent(trial_id="x", strike_time=seg.end_time - 0.01,
                            location=evs[0].location)
        with pytest.raises(InputError):
            arrival_candidates(seg, bad, 0, noise[0])

    def test_strike_outside_segment(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        noise, _, _, segs, evs = helpers.run_fusion_pipeline(record, events)
        bad = FootstepEvent(trial_id="x", strike_time=segs[0].end_time + 1.0,
                            location=evs[0].location)
        with pytest.raises(InputError):
            arrival_candidates(segs[0], bad, 0, noise[0])


def _est(sid, t, amp=1.0):
    return ArrivalEstimate(sensor_id=sid, arrival_time=t,
                           arrival_amplitude=amp)


class TestShortlist:
    LAYOUT = {0: (0.0, 0.0), 1: (2.0, 0.0), 2: (1.0, 2.0)}

    def test_distance_tie_allows_either_order(self):
        # Strike equidistant from sensors 0 and 1; candidate orders swapped
        # between them are both admissible, earliest sum wins.
        strike_loc = (1.0, 0.0)
        cands = {
            0: [_est(0, 1.010), _est(0, 1.020)],
            1: [_est(1, 1.008)],
            2: [_est(2, 1.015)],
        }
        chosen = shortlist_by_distance_order(cands, strike_loc, self.LAYOUT)
        assert chosen[0].arrival_time == 1.010
        assert chosen[1].arrival_time == 1.008

    def test_order_constraint_prunes_inverted_combination(self):
        # Sensor 0 is closer than sensor 1, so a combination where sensor 0
        # arrives later must lose to an order-consistent one.
        strike_loc = (0.0, 0.0)
        cands = {
            0: [_est(0, 1.012), _est(0, 1.002)],
            1: [_est(1, 1.010)],
            2: [_est(2, 1.011)],
        }
        chosen = shortlist_by_distance_order(cands, strike_loc, self.LAYOUT)
        assert chosen[0].arrival_time == 1.002

    def test_insufficient_sensors(self):
        with pytest.raises(OrderInconsistent):
            shortlist_by_distance_order({0: [_est(0, 1.0)], 1: [], 2: []},
                                        (0.0, 0.0), self.LAYOUT)

    def test_no_consistent_combination(self):
        strike_loc = (0.0, 0.0)  # order by distance: 0, 1, 2
        cands = {
            0: [_est(0, 1.020)],
            1: [_est(1, 1.010)],
            2: [_est(2, 1.000)],
        }
        with pytest.raises(OrderInconsistent):
            shortlist_by_distance_order(cands, strike_loc, self.LAYOUT)

    def test_simulated_trial_matches_truth(self, constant_suite):
        # At the standard 15 dB suite level the chosen combination matches
        # the true arrivals (+/-2 samples on every sensor) for >=95% of
        # footsteps.
        scenarios, data = constant_suite
        good = total = 0
        for record, events, truth in data[:3]:
            noise, layout, chosen, segs, evs = helpers.run_fusion_pipeline(
                record, events)
            truth_by = {(t.step_index, t.sensor_id): t for t in truth}
            ev_index = {e.strike_time: i for i, e in enumerate(events)}
            for c, ev in zip(chosen, evs):
                k = ev_index[ev.strike_time]
                tol = 2.0 / record.sample_rate_hz
                good += all(
                    abs(c[sid].arrival_time - truth_by[(k, sid)].arrival_time)
                    <= tol for sid in c)
                total += 1
        assert total >= 20
        assert good / total >= 0.95


class TestRatioModel:
    def test_arrivals_at_peak_give_unit_ratio(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        noise, layout, chosen, segs, evs = helpers.run_fusion_pipeline(
            record, events)
        rigged = []
        for seg in segs:
            m = {}
            for sid in layout:
                t, amp = arrival_band_peak(seg, sid)
                m[sid] = ArrivalEstimate(sensor_id=sid, arrival_time=t,
                                         arrival_amplitude=amp)
            rigged.append(m)
        model = fit_ratio_model(rigged, segs)
        for stats in model.values():
            assert stats.mean == pytest.approx(1.0, abs=1e-9)

    def test_too_few_pairs(self, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        _, _, chosen, segs, _ = helpers.run_fusion_pipeline(record, events)
        with pytest.raises(CalibrationError):
            fit_ratio_model(chosen[:4], segs[:4])

    def test_onset_fraction_recovered(self):
        # Gentle onset at 15% of the peak: the fitted per-sensor ratio mean
        # stays within 0.15 +/- 0.03 for every sensor.
        record, events, _ = synthesize(helpers.gentle_scenario())
        _, _, chosen, segs, _ = helpers.run_fusion_pipeline(record, events)
        model = fit_ratio_model(chosen, segs)
        assert set(model) == set(DEFAULT_SENSORS)
        for stats in model.values():
            assert 0.12 <= stats.mean <= 0.18
            assert stats.count >= 5

    def test_ratio_distance_invariance(self):
        # Footstep-to-sensor distances from ~0.5 m to >5 m; the pooled
        # per-sensor ratio spread stays under 20% (near-noiseless).
        sc = helpers.gentle_scenario(
            gait=GaitTemplate(step_length=0.62, step_width=0.2,
                              start=(0.45, 0.45), steps=9, cadence_hz=1.0),
            snr_db=50.0, seed=7)
        record, events, _ = synthesize(sc)
        _, layout, chosen, segs, evs = helpers.run_fusion_pipeline(
            record, events)
        dists, by_sensor = [], {}
        for c, seg, ev in zip(chosen, segs, evs):
            for sid, est in c.items():
                _, peak = arrival_band_peak(seg, sid)
                by_sensor.setdefault(sid, []).append(
                    est.arrival_amplitude / peak)
                dists.append(np.hypot(layout[sid][0] - ev.location[0],
                                      layout[sid][1] - ev.location[1]))
        assert min(dists) <= 0.7 and max(dists) >= 5.0
        for vals in by_sensor.values():
            arr = np.asarray(vals)
            assert arr.std() / arr.mean() < 0.20


class TestVelocitySamples:
    def test_arithmetic(self):
        layout = {0: (2.0, 0.0), 1: (0.0, 1.0), 2: (0.0, -1.0)}
        ev = FootstepEvent(trial_id="t", strike_time=1.0, location=(0.0, 0.0))
        chosen = {0: _est(0, 1.02)}
        out = velocity_samples([chosen], [ev], layout)
        assert len(out) == 1
        assert out[0].v == pytest.approx(100.0)
        assert (out[0].x, out[0].y) == (0.0, 0.0)

    def test_non_positive_travel_time_discarded(self):
        layout = {0: (2.0, 0.0)}
        ev = FootstepEvent(trial_id="t", strike_time=1.0, location=(0.0, 0.0))
        assert velocity_samples([{0: _est(0, 1.0)}], [ev], layout) == []

    def test_outside_clamp_discarded(self):
        layout = {0: (2.0, 0.0)}
        ev = FootstepEvent(trial_id="t", strike_time=1.0, location=(0.0, 0.0))
        # 2 m in 1 ms -> 2000 m/s, unphysical
        assert velocity_samples([{0: _est(0, 1.001)}], [ev], layout) == []

    def test_constant_field_sample_mean(self):
        # True field 120 m/s at the standard suite noise level: the sample
        # mean lands within +/-5%.
        sc = SimScenario(floor=helpers.constant_floor(120.0),
                         gait=GaitTemplate(steps=8), snr_db=15.0, seed=11,
                         trial_id="vel")
        record, events, _ = synthesize(sc)
        _, layout, chosen, _, evs = helpers.run_fusion_pipeline(record, events)
        vs = velocity_samples(chosen, evs, layout)
        mean = np.mean([s.v for s in vs])
        assert abs(mean - 120.0) / 120.0 <= 0.05


def _samples_from_field(field, bounds, n, noise_frac, seed):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(bounds.x0, bounds.x1, n)
    ys = rng.uniform(bounds.y0, bounds.y1, n)
    v = field.evaluate(xs, ys) * (1 + noise_frac * rng.standard_normal(n))
    return [VelocitySample(x=float(x), y=float(y), v=float(val), sensor_id=0,
                           trial_id="s", strike_time=float(i))
            for i, (x, y, val) in enumerate(zip(xs, ys, v))]


class TestVelocityProfileFit:
    BOUNDS = Rect(0.0, 7.0, 0.0, 2.0)

    def test_constant_recovery_exact(self):
        field = VelocityProfile.constant(100.0, self.BOUNDS)
        samples = _samples_from_field(field, self.BOUNDS, 40, 0.0, 1)
        profile, info = fit_velocity_profile(samples, self.BOUNDS)
        gx, gy = np.meshgrid(np.linspace(0, 7, 15), np.linspace(0, 2, 7))
        assert np.allclose(profile.evaluate(gx, gy), 100.0, atol=1e-6)
        assert not info["ridge_used"]

    def test_known_field_recovery_with_noise(self):
        from floorvib.simfloor import POLY_SUITE_COEFFS
        field = VelocityProfile(coefficients=POLY_SUITE_COEFFS.copy(),
                                bounds=self.BOUNDS)
        samples = _samples_from_field(field, self.BOUNDS, 200, 0.05, 42)
        profile, _ = fit_velocity_profile(samples, self.BOUNDS)
        gx, gy = np.meshgrid(np.linspace(0, 7, 40), np.linspace(0, 2, 40))
        rmse = np.sqrt(np.mean((profile.evaluate(gx, gy)
                                - field.evaluate(gx, gy)) ** 2))
        assert rmse <= 0.10 * float(np.mean(field.evaluate(gx, gy)))

    def test_too_few_samples(self):
        field = VelocityProfile.constant(100.0, self.BOUNDS)
        samples = _samples_from_field(field, self.BOUNDS, 14, 0.0, 2)
        with pytest.raises(CalibrationError):
            fit_velocity_profile(samples, self.BOUNDS)

    def test_too_few_locations(self):
        one = VelocitySample(x=1.0, y=1.0, v=100.0, sensor_id=0,
                             trial_id="s", strike_time=0.0)
        with pytest.raises(CalibrationError):
            fit_velocity_profile([one] * 20, self.BOUNDS)

    def test_collinear_samples_fall_back_to_ridge(self):
        rng = np.random.default_rng(3)
        xs = np.linspace(0.5, 6.5, 30)
        samples = []
        for i, x in enumerate(xs):
            for y in (0.9, 1.1):  # two lines: y-monomials degenerate
                samples.append(VelocitySample(
                    x=float(x), y=y, v=float(100 + rng.normal(0, 2)),
                    sensor_id=0, trial_id="s", strike_time=float(i)))
        with pytest.warns(UserWarning):
            profile, info = fit_velocity_profile(samples, self.BOUNDS)
        assert info["ridge_used"]
        assert 30.0 <= float(profile.evaluate(3.5, 1.0)) <= 300.0

    def test_clamped_evaluation(self):
        coeffs = np.zeros(fusion.N_COEFFS)
        coeffs[0] = 100.0
        coeffs[1] = 500.0  # wild slope: clamp must bound the output
        profile = VelocityProfile(coefficients=coeffs, bounds=self.BOUNDS)
        v = profile.evaluate(np.linspace(0, 7, 30), np.full(30, 1.0))
        assert v.min() >= 30.0 and v.max() <= 300.0


class TestCalibrate:
    def test_constant_suite_profile(self, constant_profile):
        md = constant_profile.metadata
        assert md["trial_count"] == 3
        assert md["ci_width_max_mps"] < 100.0
        assert md["needs_more_trials"] is False
        assert set(constant_profile.ratios) == set(DEFAULT_SENSORS)
        # profile velocity close to the true constant field along the walk
        v = constant_profile.velocity.evaluate(
            np.linspace(1.0, 5.9, 12), np.full(12, 1.0))
        assert np.all(np.abs(v - 100.0) <= 15.0)

    def test_single_short_trial_insufficient(self):
        sc = SimScenario(floor=helpers.constant_floor(),
                         gait=GaitTemplate(steps=2), snr_db=15.0, seed=1,
                         trial_id="short")
        record, events, _ = synthesize(sc)
        with pytest.raises(CalibrationError):
            calibrate([(record, events)])

    def test_mismatched_layouts(self, constant_suite):
        scenarios, data = constant_suite
        (rec0, ev0, _), (rec1, ev1, _) = data[0], data[1]
        moved = VibrationRecord(channels=[
            SensorChannel(sensor_id=c.sensor_id,
                          position=(c.position[0] + 0.5, c.position[1]),
                          samples=c.samples.copy(),
                          sample_rate_hz=c.sample_rate_hz)
            for c in rec1.channels], t0=rec1.t0)
        with pytest.raises(InputError):
            calibrate([(rec0, ev0), (moved, ev1)])

    def test_events_must_overlap_record(self, constant_suite):
        scenarios, data = constant_suite
        rec, evs, _ = data[0]
        late = [FootstepEvent(trial_id="x", strike_time=1e4 + i,
                              location=e.location)
                for i, e in enumerate(evs)]
        with pytest.raises(InputError):
            calibrate([(rec, late)])

    def test_no_trials(self):
        with pytest.raises(CalibrationError):
            calibrate([])


class TestProfileSerialization:
    def test_roundtrip_byte_identical(self, constant_profile, tmp_path):
        p1 = tmp_path / "profile.json"
        p2 = tmp_path / "profile2.json"
        constant_profile.save(p1)
        loaded = CalibrationProfile.load(p1)
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_values(self, constant_profile, tmp_path):
        p = tmp_path / "profile.json"
        constant_profile.save(p)
        loaded = CalibrationProfile.load(p)
        assert loaded.sensors == constant_profile.sensors
        assert np.allclose(loaded.velocity.coefficients,
                           constant_profile.velocity.coefficients)
        assert loaded.ratios == constant_profile.ratios
        assert loaded.noise == constant_profile.noise
        assert loaded.arrival_bias == constant_profile.arrival_bias

    def test_bad_format_version(self, constant_profile, tmp_path):
        import json
        p = tmp_path / "profile.json"
        constant_profile.save(p)
        doc = json.loads(p.read_text())
        doc["format_version"] = 99
        p.write_text(json.dumps(doc))
        with pytest.raises(InputError):
            CalibrationProfile.load(p)


class TestAmplitudeScaleEquivariance:
    @settings(max_examples=5, deadline=None)
    @given(st.floats(min_value=0.01, max_value=100.0))
    def test_arrivals_and_velocities_unchanged(self, c, constant_suite):
        scenarios, data = constant_suite
        record, events, _ = data[0]
        scaled = VibrationRecord(channels=[
            SensorChannel(sensor_id=ch.sensor_id, position=ch.position,
                          samples=c * ch.samples,
                          sample_rate_hz=ch.sample_rate_hz)
            for ch in record.channels], t0=record.t0)
        _, layout, chosen_a, _, evs_a = helpers.run_fusion_pipeline(
            record, events)
        _, _, chosen_b, _, evs_b = helpers.run_fusion_pipeline(scaled, events)
        assert len(chosen_a) == len(chosen_b)
        for ca, cb in zip(chosen_a, chosen_b):
            assert set(ca) == set(cb)
            for sid in ca:
                assert ca[sid].arrival_time == pytest.approx(
                    cb[sid].arrival_time, abs=1e-9)
        va = [s.v for s in velocity_samples(chosen_a, evs_a, layout)]
        vb = [s.v for s in velocity_samples(chosen_b, evs_b, layout)]
        assert np.allclose(va, vb, atol=1e-9)
