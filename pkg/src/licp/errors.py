"""Exception types shared across the package."""


class LicpError(Exception):
    """Base class for all package-specific errors."""


class NotARotation(LicpError, ValueError):
    """Matrix fails the orthogonality / determinant check for a rotation."""


class EmptyMesh(LicpError, ValueError):
    """Mesh has no (non-degenerate) triangles."""


class EmptyCloud(LicpError, ValueError):
    """Point cloud has no points."""


class EmptyTarget(EmptyCloud):
    """Nearest-neighbor target cloud has no points."""


class TooFewPoints(LicpError, ValueError):
    """Operation needs more points than the cloud provides."""


class DegenerateNeighborhood(LicpError, ValueError):
    """Local neighborhood has covariance rank < 2 (collinear points)."""


class DegenerateConfiguration(LicpError, ValueError):
    """Point pairs are rank-deficient; rigid fit is underdetermined."""


class MissingNormals(LicpError, ValueError):
    """Operation requires normals that the cloud does not carry."""


class NoInliers(LicpError, RuntimeError):
    """All ICP correspondences were rejected."""


class ShapeMismatch(LicpError, ValueError):
    """Tensor / layer shapes are incompatible."""


class ParseError(LicpError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedElement(ParseError):
    """File uses an element/property outside the supported subset."""


class EmptyDataset(LicpError, ValueError):
    """Training dataset has no samples."""


class EmptyRollouts(LicpError, ValueError):
    """REINFORCE update called with no rollouts."""


class EmptyLibrary(LicpError, ValueError):
    """CAD retrieval called with an empty model library."""


class EmptyCrop(LicpError, RuntimeError):
    """Object crop contains no points of the target (fully occluded)."""


class PlacementFailure(LicpError, RuntimeError):
    """Scene generator could not place an object without overlap."""


class NoLayoutEvidence(LicpError, ValueError):
    """Segmented cloud has neither wall nor floor evidence."""


class NoColors(LicpError, ValueError):
    """Cloud carries no colors."""
