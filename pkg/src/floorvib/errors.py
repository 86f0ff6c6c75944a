"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration value (band edges, grid resolution, ...)."""


class InputError(PipelineError):
    """Malformed or inconsistent input data."""


class CalibrationError(PipelineError):
    """Calibration precondition not met or degenerate statistics."""


class ScenarioError(PipelineError):
    """Invalid synthetic-floor scenario."""


class EvalError(PipelineError):
    """Evaluation could not be computed (e.g. no matched footsteps)."""


class NoArrivalCandidate(PipelineError):
    """No candidate wave arrival found for a sensor."""


class NoArrivalFound(PipelineError):
    """Fewer than three sensors produced usable arrival candidates."""


class OrderInconsistent(PipelineError):
    """No arrival combination is consistent with the distance order."""


class ArrivalRejected(PipelineError):
    """An arrival or TDoA value violates a physical bound."""


class DegenerateGeometry(PipelineError):
    """Footstep geometry does not define the requested quantity."""
