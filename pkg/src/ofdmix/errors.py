"""Exception types shared across the package."""


class OfdmixError(Exception):
    """Base class for all package errors."""


class ConfigError(OfdmixError):
    """Invalid configuration or scenario description."""


class LayoutError(OfdmixError):
    """Frame layout cannot be built from the given inputs."""


class UncalibratedDeviceError(OfdmixError):
    """Calibration table has no entry for the requested (tx, rx) pair."""


class DetectionError(OfdmixError):
    """Frame or source detection failed."""


class SourceNotFoundError(DetectionError):
    """Cross-correlation found no peak above the confidence floor."""


class EstimationError(OfdmixError):
    """Channel or offset estimation failed."""
