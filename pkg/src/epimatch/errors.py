"""Exception hierarchy for the matching pipeline.

Every error raised by this package derives from :class:`EpimatchError`, so
callers can catch one type at the CLI boundary.  A few contracts deliberately
do *not* raise and instead return a flagged value; those conventions are
documented on the functions themselves (zero-norm descriptors compare with
similarity 0, a Sampson denominator of 0 yields ``inf``, confidence blocks
that overhang a map edge are clipped).
"""

from __future__ import annotations


class EpimatchError(Exception):
    """Base class for all package errors."""


class DegenerateInput(EpimatchError):
    """Input configuration admits no meaningful estimate (too few points,
    coincident points, zero matrix)."""


class IllConditioned(EpimatchError):
    """The estimation problem is solvable but numerically degenerate.

    Carries the estimate computed anyway so callers that can tolerate a
    degenerate solution (the cascade, on near-planar or zero-baseline data)
    may proceed with it while recording the condition.

    Attributes
    ----------
    matrix : ndarray
        The normalized rank-2 estimate obtained despite the conditioning.
    ratio : float
        Conditioning measure that triggered the flag (ratio of the two
        smallest design-matrix singular values, or 0.0 when the second
        nullspace dimension is exact).
    """

    def __init__(self, message, matrix=None, ratio=None):
        super().__init__(message)
        self.matrix = matrix
        self.ratio = ratio


class AmbiguousCheirality(EpimatchError):
    """Two essential-matrix decomposition candidates tie on the number of
    points they place in front of both cameras."""


class ProjectionAtInfinity(EpimatchError):
    """A homography maps an evaluation corner to the plane at infinity."""


class ModelLoadError(EpimatchError):
    """A backend model file is missing, malformed, or uses unsupported ops."""


class ShapeMismatch(EpimatchError):
    """Activation dimensions disagree with the backend manifest."""


class PreprocessError(EpimatchError):
    """An image cannot be converted to the backend's expected input."""


class ImageTooSmall(EpimatchError):
    """The image cannot support the requested pyramid depth."""


class OutOfBounds(EpimatchError):
    """A cell coordinate lies outside its feature map."""


class EmptyCandidates(EpimatchError):
    """A candidate mask is structurally invalid for the given maps.

    Note: an A-cell whose candidate list is merely empty produces no match
    and is not an error; this is raised only for shape mismatches.
    """


class InsufficientMatches(EpimatchError):
    """Fewer scored matches than the requested top-k selection size."""


class InsufficientSeedMatches(EpimatchError):
    """The deepest layer produced fewer matches than the eight-point
    algorithm needs; the cascade cannot start.

    Carries partial diagnostics for reporting.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class MissingFile(EpimatchError):
    """A dataset file required by a loader is absent."""


class MalformedMatrix(EpimatchError):
    """A ground-truth matrix file does not parse as a 3x3 float grid."""


class MalformedRecord(EpimatchError):
    """A pose-pair record is malformed; message includes the line number."""


class DegenerateCameraSpec(EpimatchError):
    """A synthetic camera specification cannot see enough of the scene."""
