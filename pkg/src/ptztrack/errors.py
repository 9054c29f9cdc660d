"""Exception types raised across the library.

Every error derives from PtzTrackError so callers can catch the whole
family; the granular classes mirror the failure modes of the geometry
kernel, map store, optimizers and trackers.
"""


class PtzTrackError(Exception):
    """Base class for all ptztrack errors."""


class ConfigError(PtzTrackError):
    """Invalid scenario or run configuration."""


# geometry kernel

class TooFewMatches(PtzTrackError):
    """Fewer than four point correspondences supplied."""


class DegenerateConfiguration(PtzTrackError):
    """Design matrix rank-deficient (collinear or duplicate points)."""


class SingularNormalMatrix(PtzTrackError):
    """DLT normal equations numerically singular."""


class AtInfinity(PtzTrackError):
    """Point maps to (or lies at) the plane at infinity."""


class NotARotation(PtzTrackError):
    """Matrix expected to be a rotation has too large an orthonormality defect."""


# scene map

class EmptyMap(PtzTrackError):
    """Operation requires a non-empty scene map."""


class DimensionMismatch(PtzTrackError):
    """Descriptor lengths disagree."""


class VersionMismatch(PtzTrackError):
    """Serialized map written by an incompatible format version."""


class CorruptPayload(PtzTrackError):
    """Serialized map stream truncated or malformed."""


# offline initialization

class DisconnectedGraph(PtzTrackError):
    """Cross-view match graph does not connect every view to the reference."""


class DegenerateVanishingGeometry(PtzTrackError):
    """Vanishing points/line unusable for rectification."""


class CoincidentPoints(PtzTrackError):
    """The two registration points coincide."""


# on-line calibration

class InsufficientInliers(PtzTrackError):
    """RANSAC found too few inliers; calibration failed for this frame."""


class SingularInnovation(PtzTrackError):
    """EKF innovation covariance not invertible."""


class NoInliers(PtzTrackError):
    """Proximity check needs a non-empty matched set."""


# world projection

class DegenerateHomology(PtzTrackError):
    """Vanishing point nearly conjugate to the vanishing line."""


class AboveHorizon(PtzTrackError):
    """Foot point lies on the wrong side of the world-plane vanishing line."""


class DegenerateObservation(PtzTrackError):
    """Observed head and foot coincide; cross-ratio unsolvable."""


# tracking

class BehindCamera(PtzTrackError):
    """Track position projects behind the camera."""


class SingularS(PtzTrackError):
    """Track innovation covariance not invertible."""


# metrics

class FrameIndexMismatch(PtzTrackError):
    """Hypothesis frames outside the ground-truth frame range."""
