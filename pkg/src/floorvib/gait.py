"""Spatial gait parameters from an ordered footstep sequence.

Step length/width decompose each step vector against a global progression
line (the walking axis); stride length pairs footfalls of the same foot.
All quantities are invariant under rigid motions of the floor coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateGeometry, EvalError
from .fusion import FootstepEvent
from .locate import LocalizedFootstep

log = logging.getLogger(__name__)

#: True parameter values below these thresholds are excluded from MAPE
#: (division blow-up) and counted separately; units of the parameter itself.
MAPE_EXCLUSION = {"step_length": 0.01, "step_width": 0.01,
                  "stride_length": 0.01, "step_angle": 0.01,
                  "walking_speed": 0.01}


@dataclass
class FootstepSeq:
    """Time-ordered footstep locations, with optional foot labels."""

    times: np.ndarray
    locations: np.ndarray  # shape (n, 2)
    feet: Optional[Tuple[Optional[str], ...]] = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.locations = np.asarray(self.locations, dtype=np.float64)
        if self.locations.ndim != 2 or self.locations.shape[1] != 2:
            raise EvalError("locations must have shape (n, 2)")
        if self.times.shape[0] != self.locations.shape[0]:
            raise EvalError("times and locations length mismatch")
        if np.any(np.diff(self.times) <= 0):
            raise EvalError("footstep times must be strictly increasing")
        if self.feet is not None and len(self.feet) != len(self.times):
            raise EvalError("feet labels length mismatch")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @classmethod
    def from_events(cls, events: Sequence[FootstepEvent]) -> "FootstepSeq":
        ev = sorted(events, key=lambda e: e.strike_time)
        return cls(times=np.array([e.strike_time for e in ev]),
                   locations=np.array([e.location for e in ev]),
                   feet=tuple(e.foot for e in ev))

    @classmethod
    def from_localized(cls, steps: Sequence[LocalizedFootstep]) -> "FootstepSeq":
        st = sorted(steps, key=lambda s: s.time_s)
        return cls(times=np.array([s.time_s for s in st]),
                   locations=np.array([s.location for s in st]))


def progression_line(seq: FootstepSeq) -> Tuple[np.ndarray, np.ndarray]:
    """Walking axis: unit direction (oriented along time) and anchor point.

    Fitted by total least squares through the midpoints of consecutive
    footsteps; midpoints of a regular left/right zig-zag lie exactly on the
    walking axis, so alternating lateral offsets do not tilt the fit the way
    a fit through the raw footfalls would.
    """
    pts = seq.locations
    if len(seq) < 2:
        raise DegenerateGeometry("progression line needs >= 2 footsteps")
    mids = 0.5 * (pts[:-1] + pts[1:]) if len(seq) >= 3 else pts
    centered = mids - mids.mean(axis=0)
    cov = centered.T @ centered
    if not np.any(cov > 1e-24):
        raise DegenerateGeometry("all footsteps coincide")
    _, vecs = np.linalg.eigh(cov)
    direction = vecs[:, -1]
    if float(np.dot(pts[-1] - pts[0], direction)) < 0.0:
        direction = -direction
    return direction, mids.mean(axis=0)


@dataclass
class GaitParameters:
    """Per-step and per-trial spatial gait parameters.

    Arrays may be empty when the sequence is too short for a parameter
    (absence, not failure); ``walking_speed`` is None in that case.
    """

    step_lengths: np.ndarray
    step_widths: np.ndarray
    step_angles_deg: np.ndarray
    stride_lengths: np.ndarray
    walking_speed: Optional[float]

    PARAM_NAMES = ("step_length", "step_width", "step_angle",
                   "stride_length", "walking_speed")

    def values(self, name: str) -> np.ndarray:
        if name == "step_length":
            return self.step_lengths
        if name == "step_width":
            return self.step_widths
        if name == "step_angle":
            return self.step_angles_deg
        if name == "stride_length":
            return self.stride_lengths
        if name == "walking_speed":
            return (np.array([]) if self.walking_speed is None
                    else np.array([self.walking_speed]))
        raise KeyError(name)

    def summary(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for name in self.PARAM_NAMES:
            vals = self.values(name)
            if vals.size:
                out[name] = {"mean": float(vals.mean()),
                             "std": float(vals.std()),
                             "count": int(vals.size)}
            else:
                out[name] = {"mean": float("nan"), "std": float("nan"),
                             "count": 0}
        return out


def _stride_pairs(seq: FootstepSeq) -> List[Tuple[int, int]]:
    """Same-foot footstep index pairs; (k, k+2) without foot labels."""
    n = len(seq)
    if seq.feet is not None and all(f in ("left", "right") for f in seq.feet):
        pairs = []
        last: Dict[str, int] = {}
        for i, f in enumerate(seq.feet):
            if f in last:
                pairs.append((last[f], i))
            last[f] = i
        return pairs
    return [(k, k + 2) for k in range(n - 2)]


def spatial_params(seq: FootstepSeq) -> GaitParameters:
    """Step length/width/angle, stride length and walking speed.

    For consecutive footsteps the step vector d decomposes against the
    progression direction u: step_length = |d . u|, step_width = |d . u_perp|,
    step_angle = atan2(width, length) in degrees. Stride length is the
    distance between same-foot footfalls, and walking speed the projection
    span along u over the elapsed time.
    """
    n = len(seq)
    empty = np.array([])
    if n < 2:
        return GaitParameters(empty, empty, empty, empty, None)
    u, _ = progression_line(seq)
    u_perp = np.array([-u[1], u[0]])
    d = np.diff(seq.locations, axis=0)
    lengths = np.abs(d @ u)
    widths = np.abs(d @ u_perp)
    angles = np.degrees(np.arctan2(widths, lengths))
    strides = np.array([float(np.linalg.norm(seq.locations[j] - seq.locations[i]))
                        for i, j in _stride_pairs(seq)])
    proj = seq.locations @ u
    speed = float((proj.max() - proj.min()) / (seq.times[-1] - seq.times[0]))
    return GaitParameters(step_lengths=lengths, step_widths=widths,
                          step_angles_deg=angles, stride_lengths=strides,
                          walking_speed=speed)


@dataclass
class ParamComparison:
    """Per-parameter MAPE / absolute error between estimate and truth."""

    mape: Dict[str, float]
    abs_error: Dict[str, float]
    excluded: Dict[str, int]
    matched_steps: int
    missed_truth: int
    spurious_estimates: int
    location_errors_m: np.ndarray = field(default_factory=lambda: np.array([]))


def match_by_time(est_times: np.ndarray, truth_times: np.ndarray,
                  max_gap_s: float = 0.3) -> List[Tuple[int, int]]:
    """Greedy nearest-time one-to-one matching within ``max_gap_s``."""
    cands = [(abs(te - tt), i, j)
             for i, te in enumerate(est_times)
             for j, tt in enumerate(truth_times)
             if abs(te - tt) <= max_gap_s]
    cands.sort()
    used_e, used_t, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_e or j in used_t:
            continue
        used_e.add(i)
        used_t.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def compare_params(estimated: FootstepSeq, truth: FootstepSeq,
                   max_gap_s: float = 0.3) -> ParamComparison:
    """MAPE and absolute error per gait parameter on time-matched steps.

    Footsteps are matched by nearest time (one-to-one, max gap 0.3 s);
    parameters are recomputed on the matched subsequences so both sides
    describe the same steps. True values below the per-parameter exclusion
    threshold are left out of the MAPE and counted. Raises EvalError when
    nothing matches.
    """
    pairs = match_by_time(estimated.times, truth.times, max_gap_s)
    if not pairs:
        raise EvalError("no footsteps matched within the time gap")
    ei = [i for i, _ in pairs]
    ti = [j for _, j in pairs]
    sub_e = FootstepSeq(times=estimated.times[ei],
                        locations=estimated.locations[ei])
    feet = (tuple(truth.feet[j] for j in ti)
            if truth.feet is not None else None)
    sub_t = FootstepSeq(times=truth.times[ti], locations=truth.locations[ti],
                        feet=feet)
    pe = spatial_params(sub_e)
    pt = spatial_params(sub_t)

    mape: Dict[str, float] = {}
    abs_err: Dict[str, float] = {}
    excluded: Dict[str, int] = {}
    for name in GaitParameters.PARAM_NAMES:
        ve, vt = pe.values(name), pt.values(name)
        m = min(ve.size, vt.size)
        if m == 0:
            mape[name] = float("nan")
            abs_err[name] = float("nan")
            excluded[name] = 0
            continue
        ve, vt = ve[:m], vt[:m]
        abs_err[name] = float(np.mean(np.abs(ve - vt)))
        keep = np.abs(vt) >= MAPE_EXCLUSION[name]
        excluded[name] = int(m - keep.sum())
        mape[name] = (float(np.mean(np.abs(ve[keep] - vt[keep])
                                    / np.abs(vt[keep])) * 100.0)
                      if keep.any() else float("nan"))

    loc_err = np.linalg.norm(estimated.locations[ei] - truth.locations[ti],
                             axis=1)
    return ParamComparison(
        mape=mape, abs_error=abs_err, excluded=excluded,
        matched_steps=len(pairs),
        missed_truth=len(truth) - len(pairs),
        spurious_estimates=len(estimated) - len(pairs),
        location_errors_m=loc_err,
    )
