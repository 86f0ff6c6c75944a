"""Calibration stage: fuse vision footstep events with vibration segments.

Learns per-sensor wave-arrival parameters (noise bound candidates, arrival to
peak amplitude ratios) and a floor-wide wave velocity profile from a few
walking trials recorded with both modalities, and persists everything as a
:class:`CalibrationProfile` for the vibration-only operating stage.
"""

from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as spstats

from .errors import (CalibrationError, InputError, NoArrivalCandidate,
                     OrderInconsistent)
from .geometry import Rect
from .signal import (ARRIVAL_BAND, DETECTION_BAND, BandSpec, FootstepSegment,
                     NoiseModel, NoiseStats, VibrationRecord,
                     analytic_envelope, bandpass_samples, denoise_record,
                     detect_footsteps)

log = logging.getLogger(__name__)

#: One-sided 90% Gaussian confidence bound, used for arrival candidates.
NOISE_CI_Z = 1.2816

#: Distance ties below this tolerance leave the arrival order unconstrained.
DISTANCE_TIE_M = 0.01

#: Velocity clamp range in m/s observed on the test structure.
V_MIN_MPS = 30.0
V_MAX_MPS = 300.0

#: Per-location velocity confidence interval width (m/s) above which more
#: fusion trials are requested.
CI_WIDTH_LIMIT_MPS = 100.0


@dataclass(frozen=True)
class FootstepEvent:
    """Vision-side ground truth for one footstep."""

    trial_id: str
    strike_time: float
    location: Tuple[float, float]
    foot: Optional[str] = None  # "left" | "right" | None


@dataclass(frozen=True)
class ArrivalEstimate:
    """Wave arrival at one sensor: onset time and envelope amplitude."""

    sensor_id: int
    arrival_time: float
    arrival_amplitude: float


@dataclass(frozen=True)
class RatioStats:
    """Arrival/peak amplitude ratio statistics for one sensor."""

    mean: float
    std: float
    count: int


ArrivalRatioModel = Dict[int, RatioStats]


# Monomial exponents (i, j) for x^i * y^j up to total degree 4, in the
# documented coefficient order used everywhere (files included).
MONOMIAL_EXPONENTS: Tuple[Tuple[int, int], ...] = tuple(
    (d - j, j) for d in range(5) for j in range(d + 1))
N_COEFFS = len(MONOMIAL_EXPONENTS)  # 15


def _normalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return 2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0


def design_matrix(x: np.ndarray, y: np.ndarray, bounds: Rect) -> np.ndarray:
    """Degree-4 monomial design matrix on coordinates normalized to [-1, 1].

    Raw meter coordinates raised to the 4th power would destroy the
    conditioning of the fit.
    """
    nx = _normalize(x, bounds.x0, bounds.x1)
    ny = _normalize(y, bounds.y0, bounds.y1)
    cols = [nx ** i * ny ** j for i, j in MONOMIAL_EXPONENTS]
    return np.stack(cols, axis=-1)


@dataclass
class VelocityProfile:
    """Degree-4 bivariate polynomial wave-velocity map over the floor.

    Evaluation is clamped into [v_min, v_max]; coefficients apply to
    coordinates normalized to [-1, 1] over ``bounds`` in the
    :data:`MONOMIAL_EXPONENTS` order.
    """

    coefficients: np.ndarray
    bounds: Rect
    v_min: float = V_MIN_MPS
    v_max: float = V_MAX_MPS

    def __post_init__(self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != (N_COEFFS,):
            raise InputError(f"velocity profile needs {N_COEFFS} coefficients")
        if not (0.0 < self.v_min < self.v_max):
            raise InputError("need 0 < v_min < v_max")

    @classmethod
    def constant(cls, v: float, bounds: Rect,
                 v_min: float = V_MIN_MPS,
                 v_max: float = V_MAX_MPS) -> "VelocityProfile":
        coeffs = np.zeros(N_COEFFS)
        coeffs[0] = v
        return cls(coefficients=coeffs, bounds=bounds, v_min=v_min, v_max=v_max)

    def evaluate(self, x, y) -> np.ndarray:
        """Clamped velocity at floor coordinates (vectorized)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        g = design_matrix(x.ravel(), y.ravel(), self.bounds)
        v = g @ self.coefficients
        return np.clip(v, self.v_min, self.v_max).reshape(x.shape)

    def to_dict(self) -> dict:
        return {
            "monomial_exponents": [list(e) for e in MONOMIAL_EXPONENTS],
            "coefficients": [float(c) for c in self.coefficients],
            "bounds": {"x0": self.bounds.x0, "x1": self.bounds.x1,
                       "y0": self.bounds.y0, "y1": self.bounds.y1},
            "v_min": self.v_min,
            "v_max": self.v_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VelocityProfile":
        exps = [tuple(e) for e in d["monomial_exponents"]]
        if exps != list(MONOMIAL_EXPONENTS):
            raise InputError("unsupported monomial order in profile file")
        b = d["bounds"]
        return cls(coefficients=np.asarray(d["coefficients"], dtype=np.float64),
                   bounds=Rect(b["x0"], b["x1"], b["y0"], b["y1"]),
                   v_min=float(d["v_min"]), v_max=float(d["v_max"]))


@dataclass
class CalibrationProfile:
    """Everything the operating stage needs, serializable to JSON.

    ``arrival_bias`` holds the per-sensor systematic arrival lateness (s)
    learned during fusion; the operating stage subtracts it from candidate
    arrival times.
    """

    sample_rate_hz: float
    sensors: Dict[int, Tuple[float, float]]
    detection_band: BandSpec
    arrival_band: BandSpec
    noise: NoiseModel
    ratios: ArrivalRatioModel
    velocity: VelocityProfile
    arrival_bias: Dict[int, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    FORMAT_VERSION = 1

    def __post_init__(self) -> None:
        ids = set(self.sensors)
        if set(self.noise) != ids or set(self.ratios) != ids:
            raise InputError("noise/ratio models must cover exactly the "
                             "sensor layout ids")
        if not set(self.arrival_bias) <= ids:
            raise InputError("arrival bias for unknown sensor ids")

    def to_dict(self) -> dict:
        return {
            "format_version": self.FORMAT_VERSION,
            "sample_rate_hz": self.sample_rate_hz,
            "sensors": {str(sid): [float(p[0]), float(p[1])]
                        for sid, p in self.sensors.items()},
            "detection_band": {"low_hz": self.detection_band.low_hz,
                               "high_hz": self.detection_band.high_hz},
            "arrival_band": {"low_hz": self.arrival_band.low_hz,
                             "high_hz": self.arrival_band.high_hz},
            "noise": {str(sid): {"mean": s.mean, "std": s.std,
                                 "window_s": s.window_s}
                      for sid, s in self.noise.items()},
            "arrival_ratio": {str(sid): {"mean": r.mean, "std": r.std,
                                         "count": r.count}
                              for sid, r in self.ratios.items()},
            "arrival_bias_s": {str(sid): b
                               for sid, b in self.arrival_bias.items()},
            "velocity_profile": self.velocity.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        if d.get("format_version") != cls.FORMAT_VERSION:
            raise InputError(f"unsupported profile format_version "
                             f"{d.get('format_version')!r}")
        return cls(
            sample_rate_hz=float(d["sample_rate_hz"]),
            sensors={int(k): (float(v[0]), float(v[1]))
                     for k, v in d["sensors"].items()},
            detection_band=BandSpec(**d["detection_band"]),
            arrival_band=BandSpec(**d["arrival_band"]),
            noise={int(k): NoiseStats(**v) for k, v in d["noise"].items()},
            ratios={int(k): RatioStats(**v)
                    for k, v in d["arrival_ratio"].items()},
            arrival_bias={int(k): float(v)
                          for k, v in d.get("arrival_bias_s", {}).items()},
            velocity=VelocityProfile.from_dict(d["velocity_profile"]),
            metadata=dict(d.get("metadata", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"profile file {path}: {exc}") from exc
        return cls.from_dict(d)


def arrival_band_peak(segment: FootstepSegment, sensor_id: int,
                      band: BandSpec = ARRIVAL_BAND) -> Tuple[float, float]:
    """(time, amplitude) of the arrival-band envelope peak in a segment."""
    _, env, fs_u = _arrival_analysis(segment.raw[sensor_id], band,
                                     segment.sample_rate_hz)
    k = int(np.argmax(env))
    return segment.start_time + k / fs_u, float(env[k])


def _preceding_zero_crossing(a: np.ndarray, k: int, i_min: int) -> float:
    """Fractional index of the zero crossing of ``a`` preceding index ``k``.

    The band-filtered carrier starts from zero phase at wave onset, so the
    crossing just before a qualifying lobe marks the arrival far more sharply
    than the lobe peak itself (which lags by a quarter carrier period and
    suffers sampling-phase wobble at 500 Hz). Falls back to ``k`` when no
    sign change exists in range.
    """
    s = np.sign(a[k])
    j = k
    while j > i_min:
        if np.sign(a[j - 1]) != s:
            if a[j - 1] == 0.0:
                return float(j - 1)
            frac = a[j - 1] / (a[j - 1] - a[j])
            return float(j - 1) + float(frac)
        j -= 1
    return float(k)


#: Window over which the envelope must stay above the noise bound on
#: average for a lobe to count as an arrival (anomaly rejection: a real
#: onset is followed by the force ramp, an isolated noise spike is not).
SUSTAIN_S = 0.01

#: Upsampling factor for arrival analysis. At 500 Hz a 150-200 Hz carrier
#: leaves under 3 samples per cycle, so lobe amplitudes wobble with sampling
#: phase by up to 55%; polyphase resampling restores deterministic readouts
#: and sharp zero crossings.
ARRIVAL_UPSAMPLE = 4

#: Candidate lobes must reach this fraction of the segment's band peak.
#: The zero-phase filter smears any onset into a few milliseconds of
#: acausal pre-ring whose lobe maxima stay below ~13% of the burst peak (a
#: shape property of the band filter, independent of amplitude and
#: attenuation), while a ramped onset's first lobe reads above ~16%; being
#: relative to each sensor's own peak the floor is scale invariant, the
#: same insight the amplitude-ratio model rests on.
REL_AMPLITUDE_FLOOR = 0.155


def _smooth_envelope(env: np.ndarray, fs: float,
                     smooth_s: float = 0.01) -> np.ndarray:
    w = max(1, round(smooth_s * fs))
    w += 1 - w % 2
    return np.convolve(env, np.ones(w) / w, mode="same")


def _arrival_analysis(x: np.ndarray, band: BandSpec, fs: float,
                      up: int = ARRIVAL_UPSAMPLE):
    """Band filter and upsample one segment channel for arrival work.

    Returns (a, env, fs_up): the upsampled band signal, its smoothed
    analytic envelope and the upsampled rate.
    """
    from scipy.signal import resample_poly
    a = bandpass_samples(x, band, fs)
    a_u = resample_poly(a, up, 1)
    fs_u = fs * up
    env_u = _smooth_envelope(analytic_envelope(a_u), fs_u)
    return a_u, env_u, fs_u


#: Backtrack step of the double-threshold onset search: earlier connected
#: lobes may sit at most this far (s) before an armed lobe.
BACKTRACK_GAP_S = 0.004


def _candidate_lobes(a: np.ndarray, env: np.ndarray, i0: int, i1: int,
                     bound: float, fs: float, floor: float,
                     sustain_s: float = SUSTAIN_S) -> List[int]:
    """Candidate lobe indices in [i0, i1] for one (upsampled) sensor trace.

    A lobe is armed when it is a local peak of |a| whose envelope reads
    strictly above ``bound``, whose own magnitude reaches the pre-ring
    ``floor``, and which is followed by a sustained (``sustain_s`` mean)
    envelope above the bound. From the first armed lobe the search then
    backtracks through directly preceding lobes that still clear the floor
    and half the armed amplitude: a faint onset can sit one carrier lobe
    below the noise bound while the filter pre-ring never clears the floor,
    so the backtrack recovers bound-limited onsets without over-reaching.
    """
    mag = np.abs(a)
    if i1 < i0:
        return []
    from scipy.signal import find_peaks
    peaks, _ = find_peaks(mag)
    peaks = [int(p) for p in peaks if i0 <= p <= i1]
    w = max(1, round(sustain_s * fs))
    sel = []
    for p in peaks:
        if not (env[p] > bound and mag[p] >= floor):
            continue
        if float(np.mean(env[p:p + w])) > bound:
            sel.append(p)
    # The global peak sample itself qualifies even when find_peaks drops it
    # at a window edge.
    if not sel and env[i1] > bound:
        return [i1]
    if not sel:
        return []
    gap = round(BACKTRACK_GAP_S * fs)
    first = sel[0]
    half = 0.5 * env[first]
    prior = [p for p in peaks if p < first]
    for p in reversed(prior):
        if first - p > gap:
            break
        if env[p] >= max(floor, half):
            sel.insert(0, p)
            first = p
        else:
            break
    return sel


def arrival_candidates(segment: FootstepSegment,
                       strike: FootstepEvent,
                       sensor_id: int,
                       noise: NoiseStats,
                       band: BandSpec = ARRIVAL_BAND,
                       z: float = NOISE_CI_Z,
                       sensor_position: Optional[Tuple[float, float]] = None,
                       v_min: float = V_MIN_MPS,
                       v_max: float = V_MAX_MPS) -> List[ArrivalEstimate]:
    """Candidate wave arrivals between the foot strike and the band peak.

    Candidates are local peaks of the arrival-band signal above the
    one-sided noise bound mean + z*std (and the relative pre-ring floor),
    restricted to [strike_time, peak_time]. Each candidate's time is the
    interpolated zero crossing preceding its lobe (the carrier starts from
    zero phase at onset) and its amplitude is the analytic envelope at the
    lobe. When ``sensor_position`` is given, the window is further tightened
    to travel times implied by the physical velocity range [v_min, v_max].
    Raises NoArrivalCandidate when nothing qualifies and InputError for a
    strike label outside the segment or after the band peak.
    """
    if sensor_id not in segment.raw:
        raise InputError(f"segment has no sensor {sensor_id}")
    if not (segment.start_time <= strike.strike_time <= segment.end_time):
        raise InputError(
            f"strike at {strike.strike_time:.3f} s outside segment "
            f"[{segment.start_time:.3f}, {segment.end_time:.3f}] s")
    a, env, fs_u = _arrival_analysis(segment.raw[sensor_id], band,
                                     segment.sample_rate_hz)
    k_peak = int(np.argmax(env))
    peak_time = segment.start_time + k_peak / fs_u
    if strike.strike_time > peak_time:
        raise InputError(
            f"strike at {strike.strike_time:.3f} s after band peak at "
            f"{peak_time:.3f} s (corrupt label)")
    t_lo = strike.strike_time
    t_hi = peak_time
    if sensor_position is not None:
        # Physical travel-time window from the velocity clamp range, with
        # one original sample of slack on each side.
        slack = 1.0 / segment.sample_rate_hz
        d = float(np.hypot(sensor_position[0] - strike.location[0],
                           sensor_position[1] - strike.location[1]))
        t_lo = max(t_lo, strike.strike_time + d / v_max - slack)
        t_hi = min(t_hi, strike.strike_time + d / v_min + slack)
    i0 = max(0, int(np.ceil((t_lo - segment.start_time) * fs_u)))
    i1 = min(k_peak, int(np.floor((t_hi - segment.start_time) * fs_u)))
    bound = noise.bound(z)
    floor = REL_AMPLITUDE_FLOOR * float(env[k_peak])
    out: List[ArrivalEstimate] = []
    for k in _candidate_lobes(a, env, i0, i1, bound, fs_u, floor):
        t = segment.start_time + _preceding_zero_crossing(a, k, i0) / fs_u
        t = max(t, strike.strike_time)
        out.append(ArrivalEstimate(sensor_id=sensor_id, arrival_time=t,
                                   arrival_amplitude=float(env[k])))
    out.sort(key=lambda e: e.arrival_time)
    if not out:
        raise NoArrivalCandidate(
            f"sensor {sensor_id}: no arrival-band peak above the noise bound")
    return out


def _order_constraints(sensors: Sequence[int],
                       dists: Mapping[int, float],
                       tie_tol_m: float) -> List[Tuple[int, int]]:
    """Index pairs (a, b) such that sensor[a] must not arrive after sensor[b]."""
    cons = []
    for ia, ib in itertools.combinations(range(len(sensors)), 2):
        da, db = dists[sensors[ia]], dists[sensors[ib]]
        if da < db - tie_tol_m:
            cons.append((ia, ib))
        elif db < da - tie_tol_m:
            cons.append((ib, ia))
    return cons


def _earliest_consistent(times: List[np.ndarray],
                         constraints: Sequence[Tuple[int, int]],
                         max_combinations: int = 300_000):
    """Earliest-sum index combination whose times satisfy the constraints.

    Candidate lists are time sorted; when the cross product would exceed
    ``max_combinations`` the latest candidates of the longest lists are
    dropped (only early candidates can win an earliest-sum search).
    Returns None when no combination is consistent.
    """
    times = [np.asarray(t, dtype=np.float64) for t in times]
    while int(np.prod([len(t) for t in times])) > max_combinations:
        i = int(np.argmax([len(t) for t in times]))
        times[i] = times[i][:-1]
    grids = np.meshgrid(*times, indexing="ij")
    valid = np.ones(grids[0].shape, dtype=bool)
    for ia, ib in constraints:
        valid &= grids[ia] <= grids[ib]
    if not valid.any():
        return None
    total = sum(grids)
    total = np.where(valid, total, np.inf)
    flat = int(np.argmin(total))
    return np.unravel_index(flat, total.shape)


def shortlist_by_distance_order(
        candidates: Mapping[int, Sequence[ArrivalEstimate]],
        strike_location: Tuple[float, float],
        layout: Mapping[int, Tuple[float, float]],
        tie_tol_m: float = DISTANCE_TIE_M) -> Dict[int, ArrivalEstimate]:
    """Pick one candidate per sensor so arrival order matches distance order.

    The wave reaches nearer sensors first (velocity at a footstep location is
    assumed direction independent), so among all cross-sensor combinations
    whose arrival order matches the footstep-to-sensor distance order (ties
    within ``tie_tol_m`` leave either order open) the one with the smallest
    arrival-time sum is returned. Raises OrderInconsistent when fewer than 3
    sensors have candidates or no combination is order consistent.
    """
    sensors = sorted(sid for sid, lst in candidates.items() if lst)
    if len(sensors) < 3:
        raise OrderInconsistent(
            f"only {len(sensors)} sensors with arrival candidates")
    sx, sy = strike_location
    dists = {sid: float(np.hypot(layout[sid][0] - sx, layout[sid][1] - sy))
             for sid in sensors}
    lists = [sorted(candidates[sid], key=lambda e: e.arrival_time)
             for sid in sensors]
    cons = _order_constraints(sensors, dists, tie_tol_m)
    pick = _earliest_consistent([np.array([e.arrival_time for e in lst])
                                 for lst in lists], cons)
    if pick is None:
        raise OrderInconsistent(
            "no arrival combination matches the distance order")
    return {sid: lists[i][pick[i]] for i, sid in enumerate(sensors)}


def fit_ratio_model(chosen_arrivals: Sequence[Mapping[int, ArrivalEstimate]],
                    segments: Sequence[FootstepSegment],
                    band: BandSpec = ARRIVAL_BAND,
                    min_pairs: int = 5) -> ArrivalRatioModel:
    """Per-sensor mean/std of arrival amplitude over segment peak amplitude.

    The attenuation rate within one frequency band is distance independent,
    so this ratio transfers to the operating stage where the strike time is
    unknown. Ratios outside (0, 1] are rejected as outliers; fewer than
    ``min_pairs`` valid pairs for any sensor raises CalibrationError.
    """
    ratios: Dict[int, List[float]] = {}
    for chosen, seg in zip(chosen_arrivals, segments):
        for sid, est in chosen.items():
            _, peak_amp = arrival_band_peak(seg, sid, band)
            if peak_amp <= 0:
                continue
            r = est.arrival_amplitude / peak_amp
            if not (0.0 < r <= 1.0):
                log.debug("sensor %d: ratio %.3f outside (0, 1], dropped",
                          sid, r)
                continue
            ratios.setdefault(sid, []).append(r)
    short = {sid: len(v) for sid, v in ratios.items() if len(v) < min_pairs}
    if short or not ratios:
        raise CalibrationError(
            f"fewer than {min_pairs} valid arrival/peak pairs per sensor "
            f"(counts: { {sid: len(v) for sid, v in ratios.items()} })")
    model: ArrivalRatioModel = {}
    for sid, vals in sorted(ratios.items()):
        arr = np.asarray(vals)
        model[sid] = RatioStats(mean=float(arr.mean()),
                                std=float(arr.std(ddof=1)),
                                count=int(arr.size))
    return model


@dataclass(frozen=True)
class VelocitySample:
    """One distance/time velocity observation tagged with its footstep."""

    x: float
    y: float
    v: float
    sensor_id: int
    trial_id: str
    strike_time: float


def velocity_samples(chosen_arrivals: Sequence[Mapping[int, ArrivalEstimate]],
                     strikes: Sequence[FootstepEvent],
                     layout: Mapping[int, Tuple[float, float]],
                     v_min: float = V_MIN_MPS,
                     v_max: float = V_MAX_MPS) -> List[VelocitySample]:
    """Velocity = distance / (arrival - strike) per footstep and sensor.

    Samples are attributed to the footstep location. Non-positive travel
    times and velocities outside [v_min, v_max] are discarded (physical
    clamp range), with a debug log entry.
    """
    out: List[VelocitySample] = []
    for chosen, ev in zip(chosen_arrivals, strikes):
        ex, ey = ev.location
        for sid in sorted(chosen):
            est = chosen[sid]
            dt = est.arrival_time - ev.strike_time
            if dt <= 0.0:
                log.debug("trial %s t=%.3f sensor %d: non-positive travel "
                          "time, sample discarded", ev.trial_id,
                          ev.strike_time, sid)
                continue
            d = float(np.hypot(layout[sid][0] - ex, layout[sid][1] - ey))
            v = d / dt
            if not (v_min <= v <= v_max):
                log.debug("trial %s t=%.3f sensor %d: velocity %.1f m/s "
                          "outside [%g, %g], sample discarded", ev.trial_id,
                          ev.strike_time, sid, v, v_min, v_max)
                continue
            out.append(VelocitySample(x=ex, y=ey, v=v, sensor_id=sid,
                                      trial_id=ev.trial_id,
                                      strike_time=ev.strike_time))
    return out


def fit_velocity_profile(samples: Sequence[VelocitySample],
                         bounds: Rect,
                         v_min: float = V_MIN_MPS,
                         v_max: float = V_MAX_MPS,
                         ridge: float = 1e-6,
                         min_samples: int = N_COEFFS,
                         min_locations: int = 5) -> Tuple[VelocityProfile, dict]:
    """Least-squares degree-4 velocity surface over normalized coordinates.

    Needs at least one sample per coefficient spread over ``min_locations``
    distinct footstep locations. A rank-deficient design (clustered or
    collinear samples) falls back to ridge regression with the given penalty
    and emits a warning. Returns the profile plus fit info (in-sample RMSE,
    rank, whether ridge was used).
    """
    if len(samples) < min_samples:
        raise CalibrationError(
            f"{len(samples)} velocity samples < {min_samples} required")
    locs = {(round(s.x, 6), round(s.y, 6)) for s in samples}
    if len(locs) < min_locations:
        raise CalibrationError(
            f"velocity samples cover {len(locs)} distinct locations "
            f"< {min_locations} required")
    x = np.array([s.x for s in samples])
    y = np.array([s.y for s in samples])
    v = np.array([s.v for s in samples])
    g = design_matrix(x, y, bounds)
    coeffs, _, rank, _ = np.linalg.lstsq(g, v, rcond=None)
    ridge_used = False
    if rank < N_COEFFS:
        warnings.warn(
            f"velocity design matrix rank {rank} < {N_COEFFS}; falling back "
            f"to ridge regression (penalty {ridge:g})", stacklevel=2)
        ridge_used = True
        gram = g.T @ g + ridge * np.eye(N_COEFFS)
        coeffs = np.linalg.solve(gram, g.T @ v)
    profile = VelocityProfile(coefficients=coeffs, bounds=bounds,
                              v_min=v_min, v_max=v_max)
    rmse = float(np.sqrt(np.mean((profile.evaluate(x, y) - v) ** 2)))
    info = {"rmse_mps": rmse, "rank": int(rank), "ridge_used": ridge_used,
            "n_samples": len(samples), "n_locations": len(locs)}
    return profile, info


def _ci_widths(samples: Sequence[VelocitySample]) -> List[float]:
    """95% confidence interval width of the mean velocity per location."""
    groups: Dict[Tuple[float, float], List[float]] = {}
    for s in samples:
        groups.setdefault((round(s.x, 6), round(s.y, 6)), []).append(s.v)
    widths = []
    for vals in groups.values():
        n = len(vals)
        if n < 2:
            continue
        t = float(spstats.t.ppf(0.975, n - 1))
        widths.append(2.0 * t * float(np.std(vals, ddof=1)) / np.sqrt(n))
    return widths


#: Per-location velocity consensus: arrivals whose implied wave speed
#: differs from the location's median (pooled over trials) by more than
#: this factor violate the direction-independence assumption and are
#: treated as arrival anomalies.
CONSENSUS_FACTOR = 1.25


def _implied_speed(est: ArrivalEstimate, strike: FootstepEvent,
                   layout: Mapping[int, Tuple[float, float]]) -> float:
    dt = est.arrival_time - strike.strike_time
    if dt <= 0:
        return float("nan")
    d = float(np.hypot(layout[est.sensor_id][0] - strike.location[0],
                       layout[est.sensor_id][1] - strike.location[1]))
    return d / dt


def _location_consensus(chosen_all: List[Dict[int, ArrivalEstimate]],
                        strikes_all: List[FootstepEvent],
                        layout: Mapping[int, Tuple[float, float]],
                        factor: float = CONSENSUS_FACTOR):
    """Drop arrivals inconsistent with their location's consensus velocity.

    The wave speed at one footstep location is direction independent and
    repeats across trials, so all implied speeds distance/(arrival-strike)
    observed at (approximately) one location form one cluster; arrivals off
    that cluster's median by more than ``factor`` are anomalies (typically
    one carrier lobe early or late). Footsteps keeping fewer than 3 sensors
    are discarded entirely. Returns (filtered chosen, kept indices,
    per-location median speeds).
    """
    groups: Dict[Tuple[float, float], List[float]] = {}
    for chosen, ev in zip(chosen_all, strikes_all):
        key = (round(ev.location[0], 3), round(ev.location[1], 3))
        for est in chosen.values():
            v = _implied_speed(est, ev, layout)
            if np.isfinite(v):
                groups.setdefault(key, []).append(v)
    med = {k: float(np.median(v)) for k, v in groups.items()}

    filtered: List[Dict[int, ArrivalEstimate]] = []
    kept_idx: List[int] = []
    for i, (chosen, ev) in enumerate(zip(chosen_all, strikes_all)):
        key = (round(ev.location[0], 3), round(ev.location[1], 3))
        m = med.get(key)
        kept = {}
        for sid, est in sorted(chosen.items()):
            v = _implied_speed(est, ev, layout)
            if np.isfinite(v) and m is not None and m / factor <= v <= m * factor:
                kept[sid] = est
        if len(kept) >= 3:
            filtered.append(kept)
            kept_idx.append(i)
    return filtered, kept_idx, med


def _arrival_bias(chosen_all: Sequence[Mapping[int, ArrivalEstimate]],
                  strikes_all: Sequence[FootstepEvent],
                  layout: Mapping[int, Tuple[float, float]],
                  loc_speed: Mapping[Tuple[float, float], float]
                  ) -> Dict[int, float]:
    """Per-sensor systematic arrival lateness learned against consensus.

    The noise bound makes detected onsets drift late on weak (far) sensors
    and stay sharp on loud ones; with the strike time, location and the
    location's consensus speed known, that per-sensor offset is directly
    observable during fusion and can be subtracted in the operating stage.
    """
    resid: Dict[int, List[float]] = {}
    for chosen, ev in zip(chosen_all, strikes_all):
        key = (round(ev.location[0], 3), round(ev.location[1], 3))
        v = loc_speed.get(key)
        if not v:
            continue
        for sid, est in chosen.items():
            d = float(np.hypot(layout[sid][0] - ev.location[0],
                               layout[sid][1] - ev.location[1]))
            resid.setdefault(sid, []).append(
                est.arrival_time - ev.strike_time - d / v)
    return {sid: float(np.median(r)) for sid, r in sorted(resid.items())}


def _shift_arrivals(chosen_all: Sequence[Mapping[int, ArrivalEstimate]],
                    bias: Mapping[int, float]
                    ) -> List[Dict[int, ArrivalEstimate]]:
    out = []
    for chosen in chosen_all:
        out.append({sid: ArrivalEstimate(
            sensor_id=sid,
            arrival_time=est.arrival_time - bias.get(sid, 0.0),
            arrival_amplitude=est.arrival_amplitude)
            for sid, est in chosen.items()})
    return out


def match_events_to_segments(events: Sequence[FootstepEvent],
                             segments: Sequence[FootstepSegment],
                             max_lag_s: float = 0.6):
    """Pair each vision event with the nearest later detected segment.

    A segment's detected peak lags the strike by the travel delay plus the
    force ramp, so matches require 0 <= peak - strike <= ``max_lag_s``.
    Each segment is used at most once. Returns a list of (event, segment).
    """
    taken = [False] * len(segments)
    pairs = []
    for ev in events:
        best, best_lag = None, None
        for i, seg in enumerate(segments):
            if taken[i]:
                continue
            lag = seg.center_time - ev.strike_time
            if 0.0 <= lag <= max_lag_s and (best_lag is None or lag < best_lag):
                best, best_lag = i, lag
        if best is None:
            log.debug("event at %.3f s: no matching segment", ev.strike_time)
            continue
        taken[best] = True
        pairs.append((ev, segments[best]))
    return pairs


def calibrate(trials: Sequence[Tuple[VibrationRecord, Sequence[FootstepEvent]]],
              floor_bounds: Optional[Rect] = None,
              detection_band: BandSpec = DETECTION_BAND,
              arrival_band: BandSpec = ARRIVAL_BAND,
              quiet_window: Optional[Tuple[float, float]] = None,
              z: float = NOISE_CI_Z,
              detection_sigma: float = 3.0,
              min_gap_s: float = 0.25,
              window_s: float = 0.8,
              v_min: float = V_MIN_MPS,
              v_max: float = V_MAX_MPS,
              ci_limit_mps: float = CI_WIDTH_LIMIT_MPS) -> CalibrationProfile:
    """Run the full calibration stage over paired vibration/vision trials.

    For every trial: denoise, detect and segment footsteps, generate arrival
    candidates per sensor between the vision strike time and the band peak,
    shortlist by distance order, then pool the chosen arrivals into the ratio
    model and the velocity profile. Trials are processed in order and samples
    kept sorted by (trial, time), so the result is independent of any
    internal evaluation order.

    ``floor_bounds`` defaults to the bounding box of sensors and footsteps
    dilated by 0.5 m. The profile metadata reports per-location velocity
    confidence interval widths and sets ``needs_more_trials`` when the widest
    exceeds ``ci_limit_mps``.
    """
    if not trials:
        raise CalibrationError("at least one fusion trial is required")
    layout = trials[0][0].layout
    fs = trials[0][0].sample_rate_hz
    for rec, events in trials:
        if rec.layout != layout:
            raise InputError("trials have mismatched sensor layouts")
        if not events:
            raise InputError("trial without vision events")
        t_lo, t_hi = rec.t0, rec.t0 + rec.duration_s
        strikes = [e.strike_time for e in events]
        if any(b <= a for a, b in zip(strikes, strikes[1:])):
            raise InputError("strike times must be strictly increasing")
        if strikes[-1] < t_lo or strikes[0] > t_hi:
            raise InputError("vision events do not overlap the record span")

    if quiet_window is None:
        rec0, ev0 = trials[0]
        quiet_window = (rec0.t0, min(e.strike_time for e in ev0) - 0.25)
    from .signal import estimate_noise_model
    noise = estimate_noise_model(trials[0][0], quiet_window, detection_band)

    chosen_all: List[Mapping[int, ArrivalEstimate]] = []
    segments_all: List[FootstepSegment] = []
    strikes_all: List[FootstepEvent] = []
    n_order_dropped = 0
    n_unmatched = 0
    for rec, events in trials:
        rec_d = denoise_record(rec, noise)
        segments = detect_footsteps(rec_d, noise, detection_band,
                                    threshold_sigma=detection_sigma,
                                    min_gap_s=min_gap_s, window_s=window_s)
        pairs = match_events_to_segments(sorted(events,
                                                key=lambda e: e.strike_time),
                                         segments)
        n_unmatched += len(events) - len(pairs)
        for ev, seg in pairs:
            cands: Dict[int, List[ArrivalEstimate]] = {}
            for sid in sorted(layout):
                try:
                    cands[sid] = arrival_candidates(
                        seg, ev, sid, noise[sid], arrival_band, z,
                        sensor_position=layout[sid], v_min=v_min, v_max=v_max)
                except NoArrivalCandidate:
                    continue
            try:
                chosen = shortlist_by_distance_order(cands, ev.location, layout)
            except OrderInconsistent as exc:
                n_order_dropped += 1
                log.debug("trial %s t=%.3f: %s (footstep discarded)",
                          ev.trial_id, ev.strike_time, exc)
                continue
            chosen_all.append(chosen)
            segments_all.append(seg)
            strikes_all.append(ev)

    if not chosen_all:
        raise CalibrationError("no footstep produced a consistent arrival set")

    chosen_all, kept, loc_speed = _location_consensus(chosen_all, strikes_all,
                                                      layout)
    n_order_dropped += len(segments_all) - len(kept)
    segments_all = [segments_all[i] for i in kept]
    strikes_all = [strikes_all[i] for i in kept]
    if not chosen_all:
        raise CalibrationError("no footstep survived the velocity consensus")

    arrival_bias = _arrival_bias(chosen_all, strikes_all, layout, loc_speed)
    corrected = _shift_arrivals(chosen_all, arrival_bias)

    ratios = fit_ratio_model(chosen_all, segments_all, arrival_band)
    vsamples = velocity_samples(corrected, strikes_all, layout, v_min, v_max)

    if floor_bounds is None:
        xs = [p[0] for p in layout.values()] + [e.location[0]
                                                for e in strikes_all]
        ys = [p[1] for p in layout.values()] + [e.location[1]
                                                for e in strikes_all]
        floor_bounds = Rect(min(xs), max(xs), min(ys), max(ys)).dilate(0.5)

    velocity, fit_info = fit_velocity_profile(vsamples, floor_bounds,
                                              v_min, v_max)
    widths = _ci_widths(vsamples)
    ci_max = float(max(widths)) if widths else float("inf")
    ci_mean = float(np.mean(widths)) if widths else float("inf")

    metadata = {
        "trial_count": len(trials),
        "footsteps_used": len(chosen_all),
        "footsteps_unmatched": n_unmatched,
        "footsteps_order_inconsistent": n_order_dropped,
        "velocity_samples": len(vsamples),
        "velocity_fit": fit_info,
        "ci_width_max_mps": ci_max,
        "ci_width_mean_mps": ci_mean,
        "needs_more_trials": bool(ci_max > ci_limit_mps),
    }
    return CalibrationProfile(
        sample_rate_hz=fs,
        sensors=layout,
        detection_band=detection_band,
        arrival_band=arrival_band,
        noise=noise,
        ratios=ratios,
        velocity=velocity,
        arrival_bias=arrival_bias,
        metadata=metadata,
    )
