"""Principal-component-adjusted hypothesis tests under high-dimensional confounding."""

from .errors import (
    DegenerateExposure,
    InvalidInput,
    InvalidSpec,
    NotApplicable,
    NotAvailable,
    PcrLabError,
    RankError,
    SingularityError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateExposure",
    "InvalidInput",
    "InvalidSpec",
    "NotApplicable",
    "NotAvailable",
    "PcrLabError",
    "RankError",
    "SingularityError",
]
