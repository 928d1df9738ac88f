"""Exception types shared across the package."""


class VolsegError(Exception):
    """Base class for all volseg-specific errors."""


class FormatError(VolsegError):
    """Malformed VSEG1/checkpoint file, or header/payload disagreement."""


class DegenerateInputError(VolsegError):
    """Input has no usable variation (e.g. constant-valued modality)."""


class PatchBoundsError(VolsegError):
    """Patch extends outside the volume and padding was not requested."""


class GraphError(VolsegError):
    """Structurally invalid architecture graph."""


class SamplingError(VolsegError):
    """Sampling strategy cannot be satisfied on the given labels."""


class TrainingDiverged(VolsegError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
