"""Exception types raised across the package."""

from __future__ import annotations


class PcrLabError(Exception):
    """Base class for all package errors."""


class InvalidInput(PcrLabError, ValueError):
    """Arguments outside an operation's domain (non-finite, out of range)."""


class RankError(PcrLabError, ValueError):
    """Requested adjustment dimension would absorb the whole column space."""


class InvalidSpec(PcrLabError, ValueError):
    """A model or coefficient specification is internally inconsistent."""


class DegenerateExposure(PcrLabError, ArithmeticError):
    """The residualized exposure is numerically zero, so the statistic is undefined."""


class SingularityError(PcrLabError, ArithmeticError):
    """Evaluation point lies on an atom of the bulk spectral law."""


class NotApplicable(PcrLabError, ValueError):
    """Formula only holds for distant spikes."""


class NotAvailable(PcrLabError, ValueError):
    """A constant the limit law needs has no closed form and was not supplied."""
