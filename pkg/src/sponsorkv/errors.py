"""Exception hierarchy shared by every module."""


class SponsorKVError(Exception):
    """Base class for all package errors."""


class ConfigError(SponsorKVError, ValueError):
    """Invalid configuration value, file, or preset."""


class ScoringError(SponsorKVError, ValueError):
    """Non-finite or otherwise unusable scoring input."""


class DetectionError(SponsorKVError, ValueError):
    """Anchor detection received inconsistent inputs."""


class TrainingError(SponsorKVError, ValueError):
    """Detector training data is unusable."""


class InvariantError(SponsorKVError, AssertionError):
    """A policy broke a cache invariant. Never expected in practice."""


class TrialError(SponsorKVError, RuntimeError):
    """A simulated trial failed (invariant violation or dormancy breach)."""


class CheckError(SponsorKVError, LookupError):
    """Results do not cover the parameter point a bound needs."""
