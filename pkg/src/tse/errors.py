"""Exception types shared across the package."""


class TseError(Exception):
    """Base class for all package errors."""


class SpecError(TseError, ValueError):
    """A distribution, box or job description violates its contract."""


class NumericalError(TseError, RuntimeError):
    """A numerical procedure failed (non-PD matrix, bracket failure, ...)."""


class MomentNotDefinedError(TseError):
    """A requested moment does not exist for the given degrees of freedom
    and truncation limits."""


class RejectionInfeasibleError(NumericalError):
    """Pilot acceptance rate of the rejection sampler is below the usable
    threshold; a Gibbs sampler should be used instead."""
