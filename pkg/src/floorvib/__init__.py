"""Footstep localization and spatial gait analysis from floor vibration.

Two-stage pipeline: a calibration ("fusion") stage combines vision footstep
events with vibration recordings to learn per-sensor arrival parameters and
a floor-wide wave velocity profile; the vibration-only operating stage then
localizes footsteps by TDoA multilateration against that profile and
derives spatial gait parameters. A seeded synthetic-floor simulator
provides ground truth for verification.
"""

from .config import RunConfig
from .errors import (ArrivalRejected, CalibrationError, ConfigError,
                     DegenerateGeometry, EvalError, InputError,
                     NoArrivalCandidate, NoArrivalFound, OrderInconsistent,
                     PipelineError, ScenarioError)
from .fusion import (ArrivalEstimate, ArrivalRatioModel, CalibrationProfile,
                     FootstepEvent, RatioStats, VelocityProfile,
                     VelocitySample, arrival_band_peak, arrival_candidates,
                     calibrate, fit_ratio_model, fit_velocity_profile,
                     shortlist_by_distance_order, velocity_samples)
from .gait import (FootstepSeq, GaitParameters, ParamComparison,
                   compare_params, progression_line, spatial_params)
from .geometry import Rect
from .locate import (LocalizedFootstep, LocationProposal, TdoaVector,
                     baseline_localize, estimate_arrivals, localize,
                     propose_next, tdoa, track_trial)
from .signal import (ARRIVAL_BAND, DETECTION_BAND, BandSpec, FootstepSegment,
                     NoiseModel, NoiseStats, SensorChannel, VibrationRecord,
                     bandpass, bandpass_samples, denoise, denoise_record,
                     detect_footsteps, estimate_noise, estimate_noise_model)
from .simfloor import (ArrivalTruth, ColumnsField, ConstantField, FloorModel,
                       GaitTemplate, SimScenario, scenario_suite, synthesize)

__version__ = "0.1.0"

__all__ = [
    "ARRIVAL_BAND", "ArrivalEstimate", "ArrivalRatioModel", "ArrivalRejected",
    "ArrivalTruth", "BandSpec", "CalibrationError", "CalibrationProfile",
    "ColumnsField", "ConfigError", "ConstantField", "DegenerateGeometry",
    "DETECTION_BAND", "EvalError", "FloorModel", "FootstepEvent",
    "FootstepSegment", "FootstepSeq", "GaitParameters", "GaitTemplate",
    "InputError", "LocalizedFootstep", "LocationProposal", "NoArrivalCandidate",
    "NoArrivalFound", "NoiseModel", "NoiseStats", "OrderInconsistent",
    "ParamComparison", "PipelineError", "RatioStats", "Rect", "RunConfig",
    "ScenarioError", "SensorChannel", "SimScenario", "TdoaVector",
    "VelocityProfile", "VelocitySample", "VibrationRecord",
    "arrival_band_peak", "arrival_candidates", "bandpass", "bandpass_samples",
    "baseline_localize", "calibrate", "compare_params", "denoise",
    "denoise_record", "detect_footsteps", "estimate_arrivals",
    "estimate_noise", "estimate_noise_model", "fit_ratio_model",
    "fit_velocity_profile", "localize", "progression_line", "propose_next",
    "scenario_suite", "shortlist_by_distance_order", "spatial_params",
    "synthesize", "tdoa", "track_trial", "velocity_samples",
]
