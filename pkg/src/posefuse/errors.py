"""Exception types shared across the pipeline."""


class PoseFuseError(Exception):
    """Base class for all posefuse errors."""


class ConfigError(PoseFuseError):
    """Invalid or incomplete configuration (missing paths, bad values)."""


class DegenerateProjection(PoseFuseError):
    """Projection undefined: homogeneous scale vanished (point at camera center)."""


class DegenerateConfiguration(PoseFuseError):
    """Triangulation normal matrix is ill-conditioned (near-parallel rays)."""


class EmptyHeatmap(PoseFuseError):
    """Heat map carries no probability mass to sample from."""


class DegenerateBox(PoseFuseError):
    """Bounding box undefined: fewer than two distinct visible joints."""


class TooFewCameras(PoseFuseError):
    """Fewer than two cameras available for triangulation."""


class EmptyTrack(PoseFuseError):
    """Person track has no frames left after pruning."""


class NumericalUnderflow(PoseFuseError):
    """A belief-propagation message collapsed below the representable floor."""


class ZeroLengthLimb(PoseFuseError):
    """Ground-truth limb has (near) zero length; correctness ratio undefined."""


class NoOverlap(PoseFuseError):
    """No frame holds both an estimate and ground truth for an actor."""


class ActorOutOfView(PoseFuseError):
    """A scene actor projects outside every camera for most of the sequence."""


class StageError(PoseFuseError):
    """Wraps a failure with the pipeline stage and frame where it occurred."""

    def __init__(self, stage: str, message: str, frame: int | None = None):
        self.stage = stage
        self.frame = frame
        where = f"stage '{stage}'" if frame is None else f"stage '{stage}', frame {frame}"
        super().__init__(f"{where}: {message}")
