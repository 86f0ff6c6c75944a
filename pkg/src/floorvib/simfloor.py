"""Synthetic-floor oracle.

Generates vibration records plus matching ground truth (vision footstep
events and a per-footstep, per-sensor arrival table) from a scenario with a
known velocity field, attenuation law, footstep force profile and noise
level. Propagation is single path, first arrival only: the localization
model uses nothing richer. Each burst is scaled identically across time by
exp(-alpha * distance) within a frequency band, so the arrival/peak
amplitude ratio is distance invariant by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ScenarioError
from .fusion import FootstepEvent, VelocityProfile
from .geometry import Rect
from .signal import SensorChannel, VibrationRecord

V_FIELD_MIN = 30.0
V_FIELD_MAX = 300.0


@dataclass(frozen=True)
class ConstantField:
    """Spatially constant wave velocity."""

    v: float

    def evaluate(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.full(x.shape, self.v)


@dataclass(frozen=True)
class ColumnsField:
    """Velocity dips near column lines, faster at mid-span.

    Smooth raised-cosine dips of half-width ``width`` centered on each
    column x coordinate, from ``v_mid`` down to ``v_col``; the wave slows
    where the structure is stiffened by columns and speeds up at mid-span.
    """

    column_xs: Tuple[float, ...]
    v_mid: float = 150.0
    v_col: float = 60.0
    width: float = 1.75

    def evaluate(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        dip = np.zeros(x.shape)
        for c in self.column_xs:
            u = np.clip(np.abs(x - c) / self.width, 0.0, 1.0)
            dip = np.maximum(dip, 0.5 * (1.0 + np.cos(np.pi * u)))
        return self.v_mid - (self.v_mid - self.v_col) * dip


#: Anything with an ``evaluate(x, y)`` method; degree-4 polynomial fields are
#: expressed directly as a (clamped) VelocityProfile.
VelocityField = Union[ConstantField, ColumnsField, VelocityProfile]


@dataclass
class FloorModel:
    """Floor geometry, true velocity field, attenuation and sensor layout."""

    bounds: Rect
    field: VelocityField
    sensors: Dict[int, Tuple[float, float]]
    attenuation: Dict[str, float] = None  # per band: {"high": a, "low": a}

    def __post_init__(self) -> None:
        if self.attenuation is None:
            self.attenuation = {"high": 0.3, "low": 0.3}
        if any(a < 0 for a in self.attenuation.values()):
            raise ScenarioError("attenuation coefficients must be >= 0")
        if len(self.sensors) < 3:
            raise ScenarioError("need at least 3 sensors")
        if len(set(self.sensors.values())) != len(self.sensors):
            raise ScenarioError("sensor positions must be distinct")
        gx, gy = np.meshgrid(np.linspace(self.bounds.x0, self.bounds.x1, 41),
                             np.linspace(self.bounds.y0, self.bounds.y1, 41))
        v = np.asarray(self.field.evaluate(gx, gy))
        if v.min() < V_FIELD_MIN - 1e-9 or v.max() > V_FIELD_MAX + 1e-9:
            raise ScenarioError(
                f"velocity field range [{v.min():.1f}, {v.max():.1f}] m/s "
                f"outside [{V_FIELD_MIN}, {V_FIELD_MAX}]")


@dataclass(frozen=True)
class GaitTemplate:
    """Prescribed walk: regular zig-zag footfalls along a heading.

    Footstep k advances ``step_length`` along the heading from footstep k-1
    and alternates a lateral offset of +/- ``step_width`` / 2 around the
    walking axis (left foot on the left of the heading, starting left).
    """

    step_length: float = 0.7
    step_width: float = 0.2
    cadence_hz: float = 1.6
    start: Tuple[float, float] = (1.0, 1.0)
    heading_deg: float = 0.0
    steps: int = 8
    start_time: float = 1.0
    force_scales: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.step_length <= 0 or self.cadence_hz <= 0:
            raise ScenarioError("step_length and cadence must be positive")
        if self.force_scales is not None and len(self.force_scales) != self.steps:
            raise ScenarioError("force_scales length must equal steps")

    def footsteps(self) -> List[Tuple[float, Tuple[float, float], str]]:
        """(time, location, foot) for each footstep."""
        h = math.radians(self.heading_deg)
        u = np.array([math.cos(h), math.sin(h)])
        left = np.array([-u[1], u[0]])
        out = []
        for k in range(self.steps):
            side = 1.0 if k % 2 == 0 else -1.0
            p = (np.asarray(self.start) + k * self.step_length * u
                 + side * 0.5 * self.step_width * left)
            t = self.start_time + k / self.cadence_hz
            out.append((t, (float(p[0]), float(p[1])),
                        "left" if k % 2 == 0 else "right"))
        return out


@dataclass(frozen=True)
class SimScenario:
    """Deterministic (seeded) synthetic walking trial description.

    ``snr_db`` is the standard energy ratio 20*log10(signal RMS / noise
    RMS), referenced to the weakest arrival-band burst over all (footstep,
    sensor) pairs so the stated SNR holds for every event; an explicit
    ``noise_std`` overrides it. Burst shape: the arrival jumps to
    ``onset_fraction`` of the peak (footstep forces start small but not at
    zero), ramps linearly to the peak over ``onset_ramp_s`` and decays
    exponentially afterwards.
    """

    floor: FloorModel
    gait: GaitTemplate
    sample_rate_hz: float = 500.0
    seed: int = 0
    snr_db: Optional[float] = 15.0
    noise_std: Optional[float] = None
    onset_ramp_s: float = 0.06
    onset_fraction: float = 0.25
    decay_s: float = 0.1
    carrier_high_hz: float = 175.0
    carrier_low_hz: float = 30.0
    low_band_gain: float = 0.6
    tail_s: float = 1.5
    trial_id: str = "trial"

    def __post_init__(self) -> None:
        if not (0.0 < self.onset_fraction <= 1.0):
            raise ScenarioError("onset_fraction must be in (0, 1]")
        if self.onset_ramp_s <= 0 or self.decay_s <= 0:
            raise ScenarioError("onset_ramp_s and decay_s must be positive")


@dataclass(frozen=True)
class ArrivalTruth:
    """Ground-truth wave arrival for one (footstep, sensor) pair."""

    step_index: int
    sensor_id: int
    strike_time: float
    arrival_time: float
    peak_time: float
    force_peak_time: float
    distance_m: float
    velocity_mps: float
    arrival_band_amplitude: float
    peak_band_amplitude: float

    @property
    def amplitude_ratio(self) -> float:
        return self.arrival_band_amplitude / self.peak_band_amplitude


def _burst_envelope(tau: np.ndarray, onset_fraction: float, ramp_s: float,
                    decay_s: float) -> np.ndarray:
    env = np.where(
        tau <= ramp_s,
        onset_fraction + (1.0 - onset_fraction) * tau / ramp_s,
        np.exp(-(tau - ramp_s) / decay_s))
    return np.where(tau < 0.0, 0.0, env)


def synthesize(scenario: SimScenario
               ) -> Tuple[VibrationRecord, List[FootstepEvent],
                          List[ArrivalTruth]]:
    """Render a scenario into a record, vision events and an arrival table.

    For each footstep and sensor the wave arrives ``distance / v*(strike
    location)`` after the strike; the burst mixes a high-band carrier
    (arrival detection band) with a low-band component, both scaled by
    exp(-alpha_band * distance). Identical scenarios produce byte-identical
    records (seeded noise, fixed channel order).
    """
    floor = scenario.floor
    fs = scenario.sample_rate_hz
    steps = scenario.gait.footsteps()
    for _, (x, y), _ in steps:
        if not floor.bounds.contains(x, y):
            raise ScenarioError(f"footstep at ({x:.2f}, {y:.2f}) outside "
                                f"floor bounds {floor.bounds.as_tuple()}")
    forces = (scenario.gait.force_scales
              if scenario.gait.force_scales is not None
              else (1.0,) * len(steps))

    if steps:
        t_end = max(t for t, _, _ in steps) + scenario.onset_ramp_s \
            + 8.0 * scenario.decay_s + scenario.tail_s
    else:
        t_end = scenario.gait.start_time + scenario.tail_s
    n = int(round(t_end * fs))
    t = np.arange(n) / fs

    sensor_ids = sorted(floor.sensors)
    a_high = floor.attenuation.get("high", 0.0)
    a_low = floor.attenuation.get("low", a_high)

    events: List[FootstepEvent] = []
    truth: List[ArrivalTruth] = []
    traces = {sid: np.zeros(n) for sid in sensor_ids}
    min_rms = np.inf

    for k, (t_k, (qx, qy), foot) in enumerate(steps):
        events.append(FootstepEvent(trial_id=scenario.trial_id,
                                    strike_time=t_k, location=(qx, qy),
                                    foot=foot))
        v = float(np.asarray(floor.field.evaluate(qx, qy)))
        for sid in sensor_ids:
            px, py = floor.sensors[sid]
            d = math.hypot(px - qx, py - qy)
            t_arr = t_k + d / v
            amp_h = forces[k] * math.exp(-a_high * d)
            amp_l = scenario.low_band_gain * forces[k] * math.exp(-a_low * d)
            k0 = max(0, int(math.ceil(t_arr * fs)))
            k1 = min(n, k0 + int(round((scenario.onset_ramp_s
                                        + 8.0 * scenario.decay_s) * fs)))
            tau = t[k0:k1] - t_arr
            env = _burst_envelope(tau, scenario.onset_fraction,
                                  scenario.onset_ramp_s, scenario.decay_s)
            high = amp_h * env * np.sin(
                2.0 * np.pi * scenario.carrier_high_hz * tau)
            traces[sid][k0:k1] += high + amp_l * env * np.sin(
                2.0 * np.pi * scenario.carrier_low_hz * tau)
            truth.append(ArrivalTruth(
                step_index=k, sensor_id=sid, strike_time=t_k,
                arrival_time=t_arr,
                peak_time=t_arr + scenario.onset_ramp_s,
                force_peak_time=t_k + scenario.onset_ramp_s,
                distance_m=d, velocity_mps=v,
                arrival_band_amplitude=scenario.onset_fraction * amp_h,
                peak_band_amplitude=amp_h))
            if high.size:
                min_rms = min(min_rms, float(np.sqrt(np.mean(high ** 2))))

    if scenario.noise_std is not None:
        sigma = float(scenario.noise_std)
    elif scenario.snr_db is not None and steps:
        sigma = float(min_rms / 10.0 ** (scenario.snr_db / 20.0))
    else:
        sigma = 0.0

    rng = np.random.default_rng(scenario.seed)
    channels = []
    for sid in sensor_ids:
        x = traces[sid]
        if sigma > 0.0:
            x = x + rng.normal(0.0, sigma, n)
        channels.append(SensorChannel(sensor_id=sid,
                                      position=floor.sensors[sid],
                                      samples=x, sample_rate_hz=fs))
    record = VibrationRecord(channels=channels, t0=0.0)
    return record, events, truth


# Default layout mirroring a 7 m two-span strip: four sensors along the two
# long edges, spaced 2 m apart along each edge, staggered so the aperture
# covers the walking corridor; walks go down the middle.
DEFAULT_FLOOR_BOUNDS = Rect(0.0, 7.0, 0.0, 2.0)
DEFAULT_SENSORS: Dict[int, Tuple[float, float]] = {
    0: (1.0, 0.0),
    1: (3.0, 0.0),
    2: (4.0, 2.0),
    3: (6.0, 2.0),
}

# Fixed degree-4 field for the "polynomial" suite (normalized coordinates,
# documented monomial order); range ~[47, 153] m/s on the default floor.
POLY_SUITE_COEFFS = np.array([100.0, 20.0, 3.0, -12.0, 2.0, -4.0,
                              6.0, 0.0, 0.0, 1.0, -5.0, 0.0, 0.0, 0.0, 0.0])

_SUITE_SEEDS = {"constant": 101, "polynomial": 202, "columns": 303,
                "snr_sweep": 404}


def _default_floor(field: VelocityField) -> FloorModel:
    return FloorModel(bounds=DEFAULT_FLOOR_BOUNDS, field=field,
                      sensors=dict(DEFAULT_SENSORS))


def _suite_gait(i: int) -> GaitTemplate:
    """Per-trial walk variation so fusion samples cover distinct locations.

    Identical walks would give the velocity regression only 8 support
    points clustered on one line; the first trials sweep different lanes of
    the corridor (as survey walks during a real calibration would) and
    start offsets spread the footsteps along the walking axis.
    """
    return GaitTemplate(start=(0.85 + 0.06 * (i % 5), 0.70 + 0.30 * (i % 3)))


def scenario_suite(name: str, trials: Optional[int] = None) -> List[SimScenario]:
    """Deterministic seeded scenario suites used by the acceptance tests.

    - ``constant``: 10 trials, v* = 100 m/s, SNR 15 dB.
    - ``polynomial``: 10 trials over a fixed degree-4 field, SNR 15 dB.
    - ``columns``: 16 trials over a piecewise field slow at the column lines
      x in {0, 3.5, 7}, SNR 10 dB.
    - ``snr_sweep``: SNR in {5, 10, 15, 20} dB x 5 trials, v* = 100 m/s.
    """
    if name == "constant":
        field_ = ConstantField(100.0)
        n = 10 if trials is None else trials
        return [SimScenario(floor=_default_floor(field_), gait=_suite_gait(i),
                            snr_db=15.0,
                            seed=_SUITE_SEEDS[name] * 1000 + i,
                            trial_id=f"constant-{i:03d}")
                for i in range(n)]
    if name == "polynomial":
        field_ = VelocityProfile(coefficients=POLY_SUITE_COEFFS.copy(),
                                 bounds=DEFAULT_FLOOR_BOUNDS)
        n = 10 if trials is None else trials
        return [SimScenario(floor=_default_floor(field_), gait=_suite_gait(i),
                            snr_db=15.0,
                            seed=_SUITE_SEEDS[name] * 1000 + i,
                            trial_id=f"polynomial-{i:03d}")
                for i in range(n)]
    if name == "columns":
        # 16 trials at SNR 10 dB: enough operating footsteps (>= 80 after a
        # 4-trial calibration split) for the method-over-baseline
        # comparison, noisy enough that joint velocity optimization hurts.
        field_ = ColumnsField(column_xs=(0.0, 3.5, 7.0))
        n = 16 if trials is None else trials
        return [SimScenario(floor=_default_floor(field_), gait=_suite_gait(i),
                            snr_db=10.0,
                            seed=_SUITE_SEEDS[name] * 1000 + i,
                            trial_id=f"columns-{i:03d}")
                for i in range(n)]
    if name == "snr_sweep":
        field_ = ConstantField(100.0)
        per_level = 5 if trials is None else trials
        out = []
        for snr in (5.0, 10.0, 15.0, 20.0):
            for i in range(per_level):
                out.append(SimScenario(
                    floor=_default_floor(field_), gait=_suite_gait(i),
                    snr_db=snr,
                    seed=_SUITE_SEEDS[name] * 1000 + int(snr) * 100 + i,
                    trial_id=f"snr{int(snr):02d}-{i:03d}"))
        return out
    raise ConfigError(f"unknown scenario suite {name!r}; expected one of "
                      "constant, polynomial, columns, snr_sweep")
