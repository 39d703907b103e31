"""Exception hierarchy and process exit codes."""


class SpinBathError(Exception):
    """Base class for all package errors."""


class ValidationError(SpinBathError):
    """Invalid arguments, malformed configuration, or broken invariants."""


class BathFileError(ValidationError):
    """Malformed bath file; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SingularityError(ValidationError):
    """Coincident positions where a 1/r^3 coupling is requested."""


class EngineError(SpinBathError):
    """Failure inside the expansion engine."""


class DegeneracyError(EngineError):
    """Perturbative conditioning hit a (near-)degenerate level pair."""

    def __init__(self, level_a, level_b, gap_mhz, threshold_mhz):
        self.levels = (level_a, level_b)
        self.gap_mhz = gap_mhz
        super().__init__(
            f"levels {level_a} and {level_b} are separated by "
            f"{gap_mhz:.3e} MHz (threshold {threshold_mhz:.3e} MHz); "
            "use the generalized (gcce) method near degeneracies"
        )


class CapacityError(EngineError):
    """Requested exact computation exceeds the configured Hilbert-space cap."""


# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ENGINE = 3
EXIT_PARTIAL = 4
