"""Operating stage: vibration-only footstep localization.

Proposal-constrained arrival estimation under three criteria (noise bound,
distance order from the proposal, calibrated amplitude ratio range), TDoA
relative to the loudest sensor, and grid-search multilateration driven by
the calibrated velocity profile. Includes the constant-velocity baseline
used for comparison by the evaluation harness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (ArrivalRejected, ConfigError, InputError, NoArrivalFound,
                     OrderInconsistent)
from .fusion import (NOISE_CI_Z, REL_AMPLITUDE_FLOOR, ArrivalEstimate,
                     CalibrationProfile, _arrival_analysis, _candidate_lobes,
                     _earliest_consistent, _preceding_zero_crossing)
from .geometry import Rect
from .signal import (MIN_STEP_GAP_S, SEGMENT_WINDOW_S, FootstepSegment,
                     denoise_record, detect_footsteps)

log = logging.getLogger(__name__)

#: Side length of the next-footstep search box (max step length + 3 sigma).
PROPOSAL_SIZE_M = 1.0

#: Soft boundary around the sensing area for the first footstep.
INITIAL_MARGIN_M = 1.0

#: Grid resolution of the localization search, an order of magnitude below
#: the expected localization error.
GRID_RESOLUTION_M = 0.05

#: Extra proposal half-width per consecutive localization failure.
RECOVERY_DILATION_M = 0.5


@dataclass(frozen=True)
class LocationProposal:
    """Search region for the next footstep, already clipped to the floor."""

    rect: Rect
    center: Tuple[float, float]
    is_initial: bool = False


@dataclass(frozen=True)
class TdoaVector:
    """Arrival time differences relative to the loudest sensor."""

    reference_sensor: int
    delays: Dict[int, float]  # sensor_id -> t_i - t_ref, seconds


@dataclass(frozen=True)
class LocalizedFootstep:
    """Operating-stage output for one footstep."""

    location: Tuple[float, float]
    time_s: float
    velocity_mps: float
    residual_s: float
    flags: Tuple[str, ...] = ()


def _center_of(prev) -> Tuple[float, float]:
    loc = getattr(prev, "location", prev)
    return (float(loc[0]), float(loc[1]))


def propose_next(prev, floor: Rect,
                 size_m: float = PROPOSAL_SIZE_M,
                 margin_m: float = INITIAL_MARGIN_M,
                 dilation_m: float = 0.0) -> LocationProposal:
    """Search box for the next footstep.

    With a previous footstep (a LocalizedFootstep or a bare (x, y) point):
    a ``size_m`` x ``size_m`` box centered on it, grown by ``dilation_m`` on
    each side, clipped to the floor. Without one: the floor dilated by the
    soft boundary, clipped back to the floor bounds.
    """
    if prev is None:
        rect = floor.dilate(margin_m).intersect(floor)
        return LocationProposal(rect=rect, center=rect.center, is_initial=True)
    cx, cy = _center_of(prev)
    half = 0.5 * size_m + dilation_m
    box = Rect(cx - half, cx + half, cy - half, cy + half)
    return LocationProposal(rect=box.intersect(floor), center=(cx, cy))


def _order_enforced(pair_dists) -> bool:
    """True when the sign of d_i - d_j is the same over the whole box.

    The zero set of d_i - d_j is the perpendicular bisector of the two
    sensors, a straight line, so checking the four corners plus the center
    is exact up to tangency.
    """
    return np.all(pair_dists > 0) or np.all(pair_dists < 0)


def estimate_arrivals(segment: FootstepSegment,
                      proposal: LocationProposal,
                      profile: CalibrationProfile,
                      z: float = NOISE_CI_Z,
                      ratio_sigmas: float = 3.0,
                      tie_tol_m: float = 0.01
                      ) -> Tuple[Dict[int, ArrivalEstimate], Tuple[str, ...]]:
    """Arrival per sensor under the three operating-stage criteria.

    Per sensor, candidates are arrival-band signal peaks above the 90% noise
    bound between the first bound exceedance and the band peak. Combinations
    are filtered by (a) arrival order consistent with the footstep-to-sensor
    distance order over the proposal (pairs whose order flips inside the box
    are left unconstrained) and (b) arrival amplitude within the calibrated
    ratio band mean +/- ``ratio_sigmas`` * std times the segment's band peak.
    The earliest (smallest time sum) surviving combination wins.

    When criterion (b) empties a sensor's list its unfiltered candidates are
    restored (``amplitude_relaxed`` flag); when no combination satisfies (a)
    the order criterion is dropped (``order_relaxed`` flag). Raises
    NoArrivalFound when fewer than 3 sensors have candidates at all.
    """
    fs = segment.sample_rate_hz
    band = profile.arrival_band
    flags: List[str] = []
    per_sensor: Dict[int, List[ArrivalEstimate]] = {}

    for sid in sorted(set(profile.sensors) & set(segment.raw)):
        a, env, fs_u = _arrival_analysis(segment.raw[sid], band, fs)
        k_peak = int(np.argmax(env))
        peak_amp = float(env[k_peak])
        bound = profile.noise[sid].bound(z)
        if not np.any(env[:k_peak + 1] > bound):
            continue
        # Range start: where the envelope last sat at or below the noise
        # bound before this footstep's peak. Walking is continuous, so the
        # window can begin inside the previous footstep's decay tail; the
        # last sub-bound sample (or, failing that, the envelope minimum)
        # marks the rise that belongs to this footstep.
        below = np.flatnonzero(env[:k_peak + 1] <= bound)
        if below.size:
            i0 = int(below[-1])
        else:
            i0 = int(np.argmin(env[:k_peak + 1]))
        cands = []
        floor_amp = REL_AMPLITUDE_FLOOR * peak_amp
        bias = profile.arrival_bias.get(sid, 0.0)
        for k in _candidate_lobes(a, env, i0, k_peak, bound, fs_u, floor_amp):
            t = segment.start_time + _preceding_zero_crossing(a, k, i0) / fs_u
            cands.append(ArrivalEstimate(sensor_id=sid,
                                         arrival_time=t - bias,
                                         arrival_amplitude=float(env[k])))
        if not cands:
            continue
        cands.sort(key=lambda e: e.arrival_time)
        rs = profile.ratios[sid]
        lo = max(0.0, rs.mean - ratio_sigmas * rs.std) * peak_amp
        hi = (rs.mean + ratio_sigmas * rs.std) * peak_amp
        in_band = [c for c in cands if lo <= c.arrival_amplitude <= hi]
        if not in_band:
            flags.append("amplitude_relaxed")
            in_band = cands
        per_sensor[sid] = in_band

    if len(per_sensor) < 3:
        raise NoArrivalFound(
            f"arrival candidates on only {len(per_sensor)} sensors")

    sensors = sorted(per_sensor)
    rect = proposal.rect
    probe_x = np.array([rect.x0, rect.x1, rect.x0, rect.x1, rect.center[0]])
    probe_y = np.array([rect.y0, rect.y0, rect.y1, rect.y1, rect.center[1]])
    dists = {sid: np.hypot(probe_x - profile.sensors[sid][0],
                           probe_y - profile.sensors[sid][1])
             for sid in sensors}
    constraints = []
    for ia in range(len(sensors)):
        for ib in range(ia + 1, len(sensors)):
            diff = dists[sensors[ia]] - dists[sensors[ib]]
            if np.abs(diff[-1]) <= tie_tol_m or not _order_enforced(diff):
                continue  # order flips inside the box or ties at the center
            if diff[-1] < 0:
                constraints.append((ia, ib))
            else:
                constraints.append((ib, ia))

    times = [np.array([c.arrival_time for c in per_sensor[sid]])
             for sid in sensors]
    pick = _earliest_consistent(times, constraints)
    if pick is None:
        flags.append("order_relaxed")
        pick = _earliest_consistent(times, [])
    chosen = {sid: per_sensor[sid][pick[i]] for i, sid in enumerate(sensors)}
    return chosen, tuple(dict.fromkeys(flags))


def tdoa(estimates: Mapping[int, ArrivalEstimate],
         segment: FootstepSegment,
         max_delay_s: float) -> TdoaVector:
    """Arrival time differences vs the sensor with the largest segment peak.

    Any |delay| above ``max_delay_s`` (floor diagonal / v_min) is physically
    impossible and raises ArrivalRejected.
    """
    if len(estimates) < 3:
        raise InputError("TDoA needs at least 3 arrival estimates")
    ref = max(estimates, key=lambda sid: segment.peak_amplitudes[sid])
    t_ref = estimates[ref].arrival_time
    delays = {}
    for sid in sorted(estimates):
        dt = estimates[sid].arrival_time - t_ref
        if abs(dt) > max_delay_s:
            raise ArrivalRejected(
                f"sensor {sid}: TDoA {dt:.3f} s exceeds physical bound "
                f"{max_delay_s:.3f} s")
        delays[sid] = dt
    return TdoaVector(reference_sensor=ref, delays=delays)


def _grid(rect: Rect, resolution: float) -> Tuple[np.ndarray, np.ndarray]:
    if not (0.0 < resolution <= 0.5):
        raise ConfigError(f"grid resolution {resolution} m outside (0, 0.5]")
    nx = max(1, int(round(rect.width / resolution))) + 1
    ny = max(1, int(round(rect.height / resolution))) + 1
    xs = np.linspace(rect.x0, rect.x1, nx)
    ys = np.linspace(rect.y0, rect.y1, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return gx.ravel(), gy.ravel()


def _tdoa_residuals(px: np.ndarray, py: np.ndarray, v: np.ndarray,
                    tdoa_vec: TdoaVector,
                    sensors: Mapping[int, Tuple[float, float]],
                    norm: str) -> np.ndarray:
    ref = sensors[tdoa_vec.reference_sensor]
    d_ref = np.hypot(px - ref[0], py - ref[1])
    acc = np.zeros(px.shape)
    for sid in sorted(tdoa_vec.delays):
        if sid == tdoa_vec.reference_sensor:
            continue
        sx, sy = sensors[sid]
        pred = (np.hypot(px - sx, py - sy) - d_ref) / v
        err = pred - tdoa_vec.delays[sid]
        acc += np.abs(err) if norm == "l1" else err ** 2
    return acc if norm == "l1" else np.sqrt(acc)


def _argmin_with_ties(residual: np.ndarray, px: np.ndarray, py: np.ndarray,
                      center: Tuple[float, float]) -> int:
    """Index of the residual minimum; exact ties break toward the proposal
    center, then lexicographically by (x, y)."""
    rmin = residual.min()
    tied = np.flatnonzero(residual <= rmin + 1e-15)
    if tied.size == 1:
        return int(tied[0])
    d2 = (px[tied] - center[0]) ** 2 + (py[tied] - center[1]) ** 2
    order = np.lexsort((py[tied], px[tied], d2))
    return int(tied[order[0]])


def localize(tdoa_vec: TdoaVector,
             proposal: LocationProposal,
             profile: CalibrationProfile,
             resolution: float = GRID_RESOLUTION_M,
             norm: str = "l2",
             time_s: float = 0.0,
             flags: Tuple[str, ...] = ()) -> LocalizedFootstep:
    """Grid-search multilateration over the proposal with the velocity model.

    At each grid point p the wave speed is the clamped profile value v(p)
    and the predicted delay per sensor is (|s_i - p| - |s_ref - p|) / v(p);
    the point minimizing the residual norm against the measured TDoA wins.
    """
    if norm not in ("l1", "l2"):
        raise ConfigError(f"unknown residual norm {norm!r}")
    px, py = _grid(proposal.rect, resolution)
    v = profile.velocity.evaluate(px, py)
    residual = _tdoa_residuals(px, py, v, tdoa_vec, profile.sensors, norm)
    best = _argmin_with_ties(residual, px, py, proposal.center)
    return LocalizedFootstep(
        location=(float(px[best]), float(py[best])),
        time_s=time_s,
        velocity_mps=float(v[best]),
        residual_s=float(residual[best]),
        flags=flags,
    )


def baseline_localize(tdoa_vec: TdoaVector,
                      area: Rect,
                      sensors: Mapping[int, Tuple[float, float]],
                      v_min: float = 30.0,
                      v_max: float = 300.0,
                      v_step: float = 5.0,
                      resolution: float = GRID_RESOLUTION_M,
                      norm: str = "l2",
                      time_s: float = 0.0) -> LocalizedFootstep:
    """Constant-velocity baseline: joint grid search over (location, v).

    Stands in for the prior TDoA approach that optimizes a single unknown
    wave speed together with the location; used only for comparison by the
    evaluation harness. Ties break toward the area center, then (x, y),
    then the lower velocity.
    """
    px, py = _grid(area, resolution)
    vs = np.arange(v_min, v_max + 0.5 * v_step, v_step)
    best = None  # (residual, idx, v)
    center = area.center
    for v in vs:
        residual = _tdoa_residuals(px, py, np.full(px.shape, v), tdoa_vec,
                                   sensors, norm)
        i = _argmin_with_ties(residual, px, py, center)
        cand = (float(residual[i]), i, float(v))
        if best is None or cand[0] < best[0] - 1e-15:
            best = cand
    r, i, v = best
    return LocalizedFootstep(location=(float(px[i]), float(py[i])),
                             time_s=time_s, velocity_mps=v, residual_s=r,
                             flags=("baseline",))


def track_trial(record, profile: CalibrationProfile,
                floor: Optional[Rect] = None,
                resolution: float = GRID_RESOLUTION_M,
                norm: str = "l2",
                detection_sigma: float = 3.0,
                min_gap_s: float = MIN_STEP_GAP_S,
                window_s: float = SEGMENT_WINDOW_S,
                proposal_size_m: float = PROPOSAL_SIZE_M,
                initial_margin_m: float = INITIAL_MARGIN_M,
                z: float = NOISE_CI_Z,
                ratio_sigmas: float = 3.0) -> List[LocalizedFootstep]:
    """Detect and localize every footstep of a record, chaining proposals.

    The first detected footstep searches the whole sensing area plus the
    soft boundary. Later proposals center on a linear prediction (previous
    estimate advanced by the last step vector; the second footstep, which
    has no step vector yet, uses a dilated box around the first estimate).
    Footsteps that fail localization are skipped and the next proposal
    dilates by 0.5 m per consecutive failure.
    """
    if floor is None:
        floor = profile.velocity.bounds
    noise = profile.noise
    max_delay = floor.diagonal / profile.velocity.v_min
    rec_d = denoise_record(record, noise)
    segments = detect_footsteps(rec_d, noise, profile.detection_band,
                                threshold_sigma=detection_sigma,
                                min_gap_s=min_gap_s, window_s=window_s)

    results: List[LocalizedFootstep] = []
    prev: Optional[np.ndarray] = None
    prev2: Optional[np.ndarray] = None
    failures = 0
    for seg in segments:
        if prev is None:
            proposal = propose_next(None, floor, size_m=proposal_size_m,
                                    margin_m=initial_margin_m)
        else:
            dilation = RECOVERY_DILATION_M * failures
            if prev2 is None:
                # No step vector yet: widen around the first estimate.
                center, dilation = prev, dilation + RECOVERY_DILATION_M
            else:
                adv = prev - prev2
                n = float(np.hypot(*adv))
                if n > proposal_size_m:
                    adv = adv * (proposal_size_m / n)
                center = prev + adv
            cx = float(np.clip(center[0], floor.x0, floor.x1))
            cy = float(np.clip(center[1], floor.y0, floor.y1))
            proposal = propose_next((cx, cy), floor, size_m=proposal_size_m,
                                    margin_m=initial_margin_m,
                                    dilation_m=dilation)
        try:
            est, fl = estimate_arrivals(seg, proposal, profile, z=z,
                                        ratio_sigmas=ratio_sigmas)
            vec = tdoa(est, seg, max_delay)
            step = localize(vec, proposal, profile, resolution, norm,
                            time_s=seg.center_time, flags=fl)
        except (NoArrivalFound, ArrivalRejected, OrderInconsistent,
                InputError) as exc:
            failures += 1
            log.debug("segment at %.3f s skipped: %s", seg.center_time, exc)
            continue
        results.append(step)
        prev2, prev = prev, np.asarray(step.location)
        failures = 0
    return results
