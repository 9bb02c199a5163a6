"""Exception types shared across the package."""

from __future__ import annotations


class StructureError(ValueError):
    """Inputs violate a structural precondition (owner mismatch, bad shapes,
    missing group data, non-projection where one is required)."""


class DegenerateSpectrumError(RuntimeError):
    """No usable spectral gap at the requested threshold.

    Carries the measured gap ratio and the offending eigenvalues so the caller
    can see how close the spectrum came to the cut.
    """

    def __init__(self, message: str, gap_ratio: float, below: float, above: float):
        super().__init__(f"{message} (gap ratio {gap_ratio:.3g}: "
                         f"largest kept {below:.3g}, smallest discarded {above:.3g})")
        self.gap_ratio = gap_ratio
        self.below = below
        self.above = above


class RetractionUndefinedError(RuntimeError):
    """Spectrum of a near-projection enters the forbidden band around 1/2."""
