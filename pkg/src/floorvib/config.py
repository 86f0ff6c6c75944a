"""Run configuration: every tunable threshold with its paper-default value."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .signal import BandSpec


@dataclass
class RunConfig:
    """Pipeline thresholds; defaults reproduce the published operating point.

    Loaded from a flat JSON object with the same key names; unknown keys are
    rejected so typos fail loudly.
    """

    detection_band_low_hz: float = 10.0
    detection_band_high_hz: float = 250.0
    arrival_band_low_hz: float = 150.0
    arrival_band_high_hz: float = 200.0
    detection_sigma: float = 3.0        # footstep threshold, noise sigmas
    noise_ci_z: float = 1.2816          # one-sided 90% confidence bound
    window_s: float = 0.8               # footstep segment length
    min_gap_s: float = 0.25             # minimum inter-step spacing
    proposal_size_m: float = 1.0        # next-footstep search box side
    initial_margin_m: float = 1.0       # soft boundary of the first proposal
    grid_resolution_m: float = 0.05
    residual_norm: str = "l2"
    v_min_mps: float = 30.0
    v_max_mps: float = 300.0
    velocity_degree: int = 4
    ratio_sigmas: float = 3.0           # amplitude criterion half-width
    match_gap_s: float = 0.3            # estimate/truth time matching
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.grid_resolution_m <= 0.5):
            raise ConfigError(
                f"grid_resolution_m {self.grid_resolution_m} outside (0, 0.5]")
        if not (0.0 < self.v_min_mps < self.v_max_mps):
            raise ConfigError("need 0 < v_min_mps < v_max_mps")
        if self.residual_norm not in ("l1", "l2"):
            raise ConfigError(f"residual_norm {self.residual_norm!r} not in "
                              "('l1', 'l2')")
        if self.velocity_degree != 4:
            raise ConfigError("only velocity_degree 4 is supported")
        if self.detection_sigma <= 0 or self.noise_ci_z <= 0:
            raise ConfigError("thresholds must be positive")
        if self.window_s <= 0 or self.min_gap_s <= 0:
            raise ConfigError("window_s and min_gap_s must be positive")
        if self.proposal_size_m <= 0 or self.initial_margin_m < 0:
            raise ConfigError("bad proposal geometry")
        # Band validity (relative ordering; Nyquist is checked per record).
        self.detection_band  # noqa: B018 - property validates
        self.arrival_band

    @property
    def detection_band(self) -> BandSpec:
        return BandSpec(self.detection_band_low_hz, self.detection_band_high_hz)

    @property
    def arrival_band(self) -> BandSpec:
        return BandSpec(self.arrival_band_low_hz, self.arrival_band_high_hz)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
