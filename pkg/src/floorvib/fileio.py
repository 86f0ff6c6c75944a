"""File formats shared by the library, the CLI and the simulator.

- Sensor trace: header lines ``fs=<hz>``, optional ``t0=<s>``, one
  ``sensor <id> <x> <y>`` line per channel, then comma-separated sample
  rows (one column per channel, header order). Non-finite samples are
  rejected at ingestion.
- Vision events: CSV ``trial_id,strike_time_s,x_m,y_m,foot``.
- Localizations: CSV ``seq,t_s,x_m,y_m,v_mps,residual_s,flags``.
- Ground-truth sidecar and scenario descriptions: JSON.

All writers format floats with ``repr`` (shortest round trip), so identical
data produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, ScenarioError
from .fusion import FootstepEvent, VelocityProfile
from .geometry import Rect
from .locate import LocalizedFootstep
from .signal import SensorChannel, VibrationRecord
from . import simfloor
from .simfloor import (ArrivalTruth, ColumnsField, ConstantField, FloorModel,
                       GaitTemplate, SimScenario)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace(record: VibrationRecord, path) -> None:
    lines = [f"fs={_fmt(record.sample_rate_hz)}", f"t0={_fmt(record.t0)}"]
    for c in record.channels:
        lines.append(f"sensor {c.sensor_id} {_fmt(c.position[0])} "
                     f"{_fmt(c.position[1])}")
    cols = [c.samples for c in record.channels]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path) -> VibrationRecord:
    fs: Optional[float] = None
    t0 = 0.0
    sensors: List[Tuple[int, float, float]] = []
    rows: List[List[float]] = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith("fs="):
                fs = float(line[3:])
            elif line.startswith("t0="):
                t0 = float(line[3:])
            elif line.startswith("sensor "):
                _, sid, x, y = line.split()
                sensors.append((int(sid), float(x), float(y)))
            else:
                rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
    if fs is None:
        raise InputError(f"{path}: missing fs= header")
    if not sensors:
        raise InputError(f"{path}: no sensor headers")
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != len(sensors):
        raise InputError(f"{path}: expected {len(sensors)} columns")
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: non-finite samples rejected")
    channels = [SensorChannel(sensor_id=sid, position=(x, y),
                              samples=data[:, i], sample_rate_hz=fs)
                for i, (sid, x, y) in enumerate(sensors)]
    return VibrationRecord(channels=channels, t0=t0)


EVENTS_HEADER = "trial_id,strike_time_s,x_m,y_m,foot"


def write_events(events: Sequence[FootstepEvent], path) -> None:
    lines = [EVENTS_HEADER]
    for e in sorted(events, key=lambda e: e.strike_time):
        lines.append(f"{e.trial_id},{_fmt(e.strike_time)},"
                     f"{_fmt(e.location[0])},{_fmt(e.location[1])},"
                     f"{e.foot or ''}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_events(path) -> List[FootstepEvent]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != EVENTS_HEADER:
        raise InputError(f"{path}: expected header '{EVENTS_HEADER}'")
    out = []
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise InputError(f"{path}:{ln}: expected 5 fields")
        try:
            out.append(FootstepEvent(
                trial_id=parts[0], strike_time=float(parts[1]),
                location=(float(parts[2]), float(parts[3])),
                foot=parts[4] or None))
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
    return out


LOCALIZATION_HEADER = "seq,t_s,x_m,y_m,v_mps,residual_s,flags"


def write_localizations(steps: Sequence[LocalizedFootstep], path) -> None:
    lines = [LOCALIZATION_HEADER]
    for i, s in enumerate(steps):
        lines.append(f"{i},{_fmt(s.time_s)},{_fmt(s.location[0])},"
                     f"{_fmt(s.location[1])},{_fmt(s.velocity_mps)},"
                     f"{_fmt(s.residual_s)},{';'.join(s.flags)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_localizations(path) -> List[LocalizedFootstep]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != LOCALIZATION_HEADER:
        raise InputError(f"{path}: expected header '{LOCALIZATION_HEADER}'")
    out = []
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise InputError(f"{path}:{ln}: expected 7 fields")
        try:
            out.append(LocalizedFootstep(
                location=(float(parts[2]), float(parts[3])),
                time_s=float(parts[1]),
                velocity_mps=float(parts[4]),
                residual_s=float(parts[5]),
                flags=tuple(f for f in parts[6].split(";") if f)))
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
    return out


def field_to_dict(field) -> dict:
    if isinstance(field, ConstantField):
        return {"type": "constant", "v": field.v}
    if isinstance(field, ColumnsField):
        return {"type": "columns", "column_xs": list(field.column_xs),
                "v_mid": field.v_mid, "v_col": field.v_col,
                "width": field.width}
    if isinstance(field, VelocityProfile):
        return {"type": "polynomial", **field.to_dict()}
    raise ScenarioError(f"unknown velocity field {type(field).__name__}")


def field_from_dict(d: dict):
    kind = d.get("type")
    if kind == "constant":
        return ConstantField(v=float(d["v"]))
    if kind == "columns":
        return ColumnsField(column_xs=tuple(float(x) for x in d["column_xs"]),
                            v_mid=float(d["v_mid"]), v_col=float(d["v_col"]),
                            width=float(d["width"]))
    if kind == "polynomial":
        return VelocityProfile.from_dict(d)
    raise ScenarioError(f"unknown velocity field type {kind!r}")


def scenario_to_dict(scenario: SimScenario) -> dict:
    f = scenario.floor
    g = scenario.gait
    return {
        "floor": {
            "bounds": list(f.bounds.as_tuple()),
            "field": field_to_dict(f.field),
            "sensors": {str(sid): [p[0], p[1]]
                        for sid, p in f.sensors.items()},
            "attenuation": dict(f.attenuation),
        },
        "gait": {
            "step_length": g.step_length, "step_width": g.step_width,
            "cadence_hz": g.cadence_hz, "start": list(g.start),
            "heading_deg": g.heading_deg, "steps": g.steps,
            "start_time": g.start_time,
            "force_scales": (list(g.force_scales)
                             if g.force_scales is not None else None),
        },
        "sample_rate_hz": scenario.sample_rate_hz,
        "seed": scenario.seed,
        "snr_db": scenario.snr_db,
        "noise_std": scenario.noise_std,
        "onset_ramp_s": scenario.onset_ramp_s,
        "onset_fraction": scenario.onset_fraction,
        "decay_s": scenario.decay_s,
        "carrier_high_hz": scenario.carrier_high_hz,
        "carrier_low_hz": scenario.carrier_low_hz,
        "low_band_gain": scenario.low_band_gain,
        "tail_s": scenario.tail_s,
        "trial_id": scenario.trial_id,
    }


def scenario_from_dict(d: dict) -> SimScenario:
    try:
        fb = d["floor"]
        floor = FloorModel(
            bounds=Rect(*[float(v) for v in fb["bounds"]]),
            field=field_from_dict(fb["field"]),
            sensors={int(k): (float(v[0]), float(v[1]))
                     for k, v in fb["sensors"].items()},
            attenuation={k: float(v)
                         for k, v in fb.get("attenuation", {}).items()} or None,
        )
        g = d["gait"]
        gait = GaitTemplate(
            step_length=float(g["step_length"]),
            step_width=float(g["step_width"]),
            cadence_hz=float(g["cadence_hz"]),
            start=(float(g["start"][0]), float(g["start"][1])),
            heading_deg=float(g["heading_deg"]), steps=int(g["steps"]),
            start_time=float(g["start_time"]),
            force_scales=(tuple(float(x) for x in g["force_scales"])
                          if g.get("force_scales") is not None else None),
        )
        return SimScenario(
            floor=floor, gait=gait,
            sample_rate_hz=float(d.get("sample_rate_hz", 500.0)),
            seed=int(d.get("seed", 0)),
            snr_db=(float(d["snr_db"]) if d.get("snr_db") is not None
                    else None),
            noise_std=(float(d["noise_std"])
                       if d.get("noise_std") is not None else None),
            onset_ramp_s=float(d.get("onset_ramp_s", 0.06)),
            onset_fraction=float(d.get("onset_fraction", 0.25)),
            decay_s=float(d.get("decay_s", 0.1)),
            carrier_high_hz=float(d.get("carrier_high_hz", 175.0)),
            carrier_low_hz=float(d.get("carrier_low_hz", 30.0)),
            low_band_gain=float(d.get("low_band_gain", 0.6)),
            tail_s=float(d.get("tail_s", 1.5)),
            trial_id=str(d.get("trial_id", "trial")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario description: {exc}") from exc


def save_scenario(scenario: SimScenario, path) -> None:
    Path(path).write_text(
        json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n")


def load_scenario(path) -> SimScenario:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario_from_dict(d)


def write_truth(scenario: SimScenario, events: Sequence[FootstepEvent],
                truth: Sequence[ArrivalTruth], path) -> None:
    doc = {
        "scenario": scenario_to_dict(scenario),
        "events": [{"trial_id": e.trial_id, "strike_time_s": e.strike_time,
                    "x_m": e.location[0], "y_m": e.location[1],
                    "foot": e.foot} for e in events],
        "arrivals": [{"step": t.step_index, "sensor": t.sensor_id,
                      "strike_time_s": t.strike_time,
                      "arrival_time_s": t.arrival_time,
                      "peak_time_s": t.peak_time,
                      "force_peak_time_s": t.force_peak_time,
                      "distance_m": t.distance_m,
                      "velocity_mps": t.velocity_mps,
                      "arrival_band_amplitude": t.arrival_band_amplitude,
                      "peak_band_amplitude": t.peak_band_amplitude}
                     for t in truth],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_truth(path) -> Tuple[SimScenario, List[FootstepEvent],
                              List[ArrivalTruth]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    scenario = scenario_from_dict(doc["scenario"])
    events = [FootstepEvent(trial_id=e["trial_id"],
                            strike_time=float(e["strike_time_s"]),
                            location=(float(e["x_m"]), float(e["y_m"])),
                            foot=e.get("foot"))
              for e in doc["events"]]
    truth = [ArrivalTruth(step_index=int(a["step"]),
                          sensor_id=int(a["sensor"]),
                          strike_time=float(a["strike_time_s"]),
                          arrival_time=float(a["arrival_time_s"]),
                          peak_time=float(a["peak_time_s"]),
                          force_peak_time=float(a["force_peak_time_s"]),
                          distance_m=float(a["distance_m"]),
                          velocity_mps=float(a["velocity_mps"]),
                          arrival_band_amplitude=float(
                              a["arrival_band_amplitude"]),
                          peak_band_amplitude=float(a["peak_band_amplitude"]))
             for a in doc["arrivals"]]
    return scenario, events, truth
