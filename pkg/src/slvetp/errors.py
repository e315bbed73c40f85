"""Exception types shared across the library."""


class SlvEtpError(Exception):
    """Base class for all library errors."""


class SnapshotFormatError(SlvEtpError):
    """Snapshot file does not parse against the documented schema."""

    def __init__(self, message, line_no=None, field=None):
        loc = []
        if line_no is not None:
            loc.append(f"line {line_no}")
        if field is not None:
            loc.append(f"field '{field}'")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.line_no = line_no
        self.field = field


class MarketDataError(SlvEtpError):
    """A loaded market object violates one of its invariants."""


class DateOrderError(SlvEtpError):
    """Dates supplied in the wrong order."""


class StrikeMappingError(SlvEtpError):
    """Effective strike fell outside the admissible domain."""


class ImpliedVolBoundError(SlvEtpError):
    """Price outside no-arbitrage bounds for implied-vol inversion."""

    def __init__(self, message, bound):
        super().__init__(message)
        self.bound = bound  # "lower" or "upper"


class PdeStabilityError(SlvEtpError):
    """The implicit solve produced an unusable system."""


class CalibrationError(SlvEtpError):
    """Local-volatility calibration could not honour the input quotes."""


class ScheduleError(SlvEtpError):
    """Roll schedule cannot be built from the supplied maturities."""


class CorrelationRangeError(SlvEtpError):
    """Correlation outside the admissible interval for the chosen loading dimension."""


class ConfigError(SlvEtpError):
    """Bad run configuration (unknown key, out-of-range value, missing input)."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{message} (key '{key}')")
        self.key = key


class StageError(SlvEtpError):
    """Failure inside a pipeline stage, with stage attribution."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
