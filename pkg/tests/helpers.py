"""Shared builders for the test suite."""

from __future__ import annotations

import warnings

import numpy as np

from floorvib import fusion, locate
from floorvib.gait import FootstepSeq, match_by_time
from floorvib.signal import (denoise_record, detect_footsteps,
                             estimate_noise_model)
from floorvib.simfloor import (ConstantField, FloorModel, GaitTemplate,
                               SimScenario, DEFAULT_FLOOR_BOUNDS,
                               DEFAULT_SENSORS)


def constant_floor(v: float = 100.0) -> FloorModel:
    return FloorModel(bounds=DEFAULT_FLOOR_BOUNDS, field=ConstantField(v),
                      sensors=dict(DEFAULT_SENSORS))


def gentle_scenario(**kw) -> SimScenario:
    """Slow-cadence walk with a faint, slowly ramping onset (as for an
    impaired gait): used by the amplitude-ratio tests."""
    defaults = dict(floor=constant_floor(), gait=GaitTemplate(steps=8,
                                                              cadence_hz=1.0),
                    snr_db=40.0, seed=5, onset_fraction=0.15,
                    onset_ramp_s=0.2, decay_s=0.08, trial_id="gentle")
    defaults.update(kw)
    return SimScenario(**defaults)


def quiet_window_for(events):
    return (0.0, min(e.strike_time for e in events) - 0.25)


def run_fusion_pipeline(record, events, noise=None):
    """Candidates -> shortlist -> consensus, as calibrate composes them.

    Returns (noise, layout, chosen, segments, matched_events).
    """
    if noise is None:
        noise = estimate_noise_model(record, quiet_window_for(events))
    rec_d = denoise_record(record, noise)
    segments = detect_footsteps(rec_d, noise)
    pairs = fusion.match_events_to_segments(
        sorted(events, key=lambda e: e.strike_time), segments)
    layout = record.layout
    chosen_all, segs_all, evs_all = [], [], []
    for ev, seg in pairs:
        cands = {}
        for sid in sorted(layout):
            try:
                cands[sid] = fusion.arrival_candidates(
                    seg, ev, sid, noise[sid], sensor_position=layout[sid])
            except fusion.NoArrivalCandidate:
                continue
        try:
            chosen = fusion.shortlist_by_distance_order(cands, ev.location,
                                                        layout)
        except fusion.OrderInconsistent:
            continue
        chosen_all.append(chosen)
        segs_all.append(seg)
        evs_all.append(ev)
    chosen_all, kept, _ = fusion._location_consensus(chosen_all, evs_all,
                                                     layout)
    segs_all = [segs_all[i] for i in kept]
    evs_all = [evs_all[i] for i in kept]
    return noise, layout, chosen_all, segs_all, evs_all


def calibrate_quiet(trials, **kw):
    """fusion.calibrate with rank-deficiency warnings silenced."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fusion.calibrate(trials, **kw)


def localization_errors(record, events, profile, floor, max_gap_s=0.3,
                        **track_kw):
    steps = locate.track_trial(record, profile, floor=floor, **track_kw)
    if not steps:
        return np.array([]), steps
    est = FootstepSeq.from_localized(steps)
    tru = FootstepSeq.from_events(events)
    pairs = match_by_time(est.times, tru.times, max_gap_s)
    errs = np.array([float(np.linalg.norm(est.locations[i] - tru.locations[j]))
                     for i, j in pairs])
    return errs, steps


def truth_tdoa(truth_rows, layout):
    """TDoA vector from a ground-truth arrival table for one footstep."""
    by_sensor = {t.sensor_id: t for t in truth_rows}
    ref = max(by_sensor, key=lambda s: by_sensor[s].peak_band_amplitude)
    t_ref = by_sensor[ref].arrival_time
    return locate.TdoaVector(
        reference_sensor=ref,
        delays={sid: by_sensor[sid].arrival_time - t_ref
                for sid in sorted(by_sensor)})


def oracle_profile(v, bounds, sensors, fs=500.0):
    """Profile wrapping a known constant velocity, for oracle inversion."""
    from floorvib.signal import NoiseStats
    return fusion.CalibrationProfile(
        sample_rate_hz=fs,
        sensors=dict(sensors),
        detection_band=fusion.DETECTION_BAND,
        arrival_band=fusion.ARRIVAL_BAND,
        noise={sid: NoiseStats(0.0, 1.0, 1.0) for sid in sensors},
        ratios={sid: fusion.RatioStats(0.15, 0.02, 10) for sid in sensors},
        velocity=fusion.VelocityProfile.constant(v, bounds),
    )
