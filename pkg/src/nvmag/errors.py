"""Exception types raised by the nvmag package."""


class NVMagError(Exception):
    """Base class for all nvmag errors."""


class OutOfBandError(NVMagError):
    """Field projection too large: the lower resonance branch would go non-positive."""


class NegativeSplitError(NVMagError):
    """A frequency splitting must be non-negative."""


class AmbiguousSignsError(NVMagError):
    """Sign recovery found near-degenerate sign patterns that cannot be told apart.

    Carries the two best candidate patterns and their residuals.
    """

    def __init__(self, message, candidates):
        super().__init__(message)
        self.candidates = candidates  # [(pattern tuple, residual tesla), ...]


class BadStateError(NVMagError):
    """Unknown remanent-state index."""


class EmptySceneError(NVMagError):
    """Scene rasterization produced no cells."""


class SingularPointError(NVMagError):
    """Field requested too close to a source dipole."""


class InsidePrismError(NVMagError):
    """Field requested inside the magnetized prism."""


class BadSweepError(NVMagError):
    """Invalid frequency sweep definition."""


class BadTimingError(NVMagError):
    """Invalid pulse timing definition."""


class BadDimsError(NVMagError):
    """Array dimensions disagree."""


class AlreadyMirroredError(NVMagError):
    """Cube already contains frequencies above the symmetry point."""


class TooSmallError(NVMagError):
    """Image too small for the requested spatial filter."""


class NoPeaksError(NVMagError):
    """No spectral dips rise above the noise estimate."""


class BadGuessError(NVMagError):
    """Fit starting point is not finite."""


class NotConvergedError(NVMagError):
    """Iterative fit failed to converge."""


class NonPositiveError(NVMagError):
    """Quantity must be strictly positive."""


class CorruptMagicError(NVMagError):
    """Cube file does not start with the expected magic bytes."""


class HeaderMismatchError(NVMagError):
    """Cube payload size disagrees with its header."""


class AllInvalidError(NVMagError):
    """Map contains no finite values to render."""
