"""Exception types shared across the toolkit."""


class VoxelSfmError(Exception):
    """Base class for all toolkit errors."""


class NonFinite(VoxelSfmError):
    """A coordinate was NaN or infinite."""


class DegenerateInput(VoxelSfmError):
    """Input geometry does not constrain the requested fit."""


class BehindCamera(VoxelSfmError):
    """Point projects at or behind the camera plane."""


class EmptyVoxel(VoxelSfmError):
    """Statistics update requested on a voxel with no points."""


class MissingVoxel(VoxelSfmError):
    """No voxel node contains the queried position."""


class ImmatureVoxel(VoxelSfmError):
    """Voxel has too few points for a valid Gaussian residual."""


class InsufficientOverlap(VoxelSfmError):
    """Too few scan points fall inside mature map voxels."""


class Diverged(VoxelSfmError):
    """Optimizer could not decrease the cost at any damping level."""


class Exhausted(VoxelSfmError):
    """No registrable frame remains."""


class DegenerateBaseline(VoxelSfmError):
    """Triangulation views share (nearly) the same camera center."""


class TooFewCorrespondences(VoxelSfmError):
    """Not enough 2D-3D correspondences for pose estimation."""


class ConsensusFailed(VoxelSfmError):
    """Robust pose estimation found no acceptable inlier set."""


class DegenerateGeometry(VoxelSfmError):
    """Two-view geometry is underconstrained (e.g. pure rotation)."""


class IcpDiverged(VoxelSfmError):
    """ICP failed to find a consistent alignment."""


class InsufficientHistory(VoxelSfmError):
    """Not enough registered frames for drift prediction."""


class DisconnectedGraph(VoxelSfmError):
    """Pose graph has more than one connected component."""


class GaugeError(VoxelSfmError):
    """Optimization problem has unremoved gauge freedom."""


class SolverFailed(VoxelSfmError):
    """Nonlinear solver made no acceptable progress."""


class LengthMismatch(VoxelSfmError):
    """Trajectories to compare have different lengths."""


class NoHits(VoxelSfmError):
    """Simulated scan produced no surface intersections."""


class MalformedFile(VoxelSfmError):
    """Binary input file does not match the expected layout."""


class ParseError(VoxelSfmError):
    """Text input file failed to parse."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingPose(VoxelSfmError):
    """A frame required a pose that was never estimated."""


class ConfigError(VoxelSfmError):
    """Pipeline configuration is invalid or incomplete."""


class StageError(VoxelSfmError):
    """A pipeline stage failed; partial artifacts may exist."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
