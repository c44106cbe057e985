"""Exception types shared across the toolkit."""


class LaneCertError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(LaneCertError, ValueError):
    """A configuration or call parameter violates its documented range."""


class ShapeError(LaneCertError, ValueError):
    """A matrix or signal has inconsistent dimensions."""


class BoundViolationError(LaneCertError, ValueError):
    """A signal exceeds its declared bound (e.g. speed offset beyond the band)."""


class SectorError(LaneCertError, ValueError):
    """Activation sector data is missing or degenerate."""


class WeightsFormatError(LaneCertError, ValueError):
    """A weights file is missing keys or has inconsistent shapes."""


class AssemblyError(LaneCertError, ValueError):
    """Closed-loop blocks cannot be assembled from the given parts."""


class CertificateError(LaneCertError, ValueError):
    """A certificate is malformed or numerically invalid."""


class StaleCertificateError(LaneCertError, RuntimeError):
    """A certificate's config hash does not match the current configuration."""


class InfeasibleError(LaneCertError, RuntimeError):
    """The LMI/SDP was reported infeasible (advisory, no Farkas certificate)."""


class SolverFailureError(LaneCertError, RuntimeError):
    """The SDP solver failed numerically or its answer did not pass verification."""


class DivergenceError(LaneCertError, RuntimeError):
    """A simulated state exceeded the blow-up threshold."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")
