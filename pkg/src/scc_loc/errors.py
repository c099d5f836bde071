"""Exception hierarchy for the localization engine."""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class NonFinite(EngineError):
    """Input contains NaN or infinity."""


class BehindCamera(EngineError):
    """Projected point has non-positive depth in the camera frame."""


class GimbalLock(EngineError):
    """Euler pitch within tolerance of +-pi/2; decomposition degenerate."""


class OutOfFootprint(EngineError):
    """Query coordinate lies outside the raster footprint."""


class AllNoData(EngineError):
    """Every raster neighbor (or every lifted match) hit the nodata sentinel."""


class DegenerateNorm(EngineError):
    """Pooled descriptor norm too small to normalize."""


class EmptyDatabase(EngineError):
    """Tile grid construction produced no tiles."""


class NoSemanticMass(EngineError):
    """Rectified heatmap sums to ~0; no centroid can be estimated."""


class InsufficientCorrespondences(EngineError):
    """Fewer correspondences than the minimal solver needs."""


class NoConsensus(EngineError):
    """RANSAC failed to find a hypothesis with enough inliers."""


class SingularHessian(EngineError):
    """Normal-equation matrix numerically singular; uncertainty infinite."""


class AllCandidatesGated(EngineError):
    """Hard gating removed every candidate; query unlocalizable."""


class SpecInfeasible(EngineError):
    """Scenario specification violates its own consistency rules."""


class KeyMismatch(EngineError):
    """Records and ground-truth entries are not keyed consistently."""


class FormatError(EngineError):
    """Binary file malformed; message carries the failing byte offset."""


class ConfigError(EngineError):
    """Configuration file invalid or contains unknown keys."""
