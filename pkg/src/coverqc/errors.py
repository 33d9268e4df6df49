"""Exception and warning types shared across the pipeline."""


class CoverQCError(Exception):
    """Base class for all coverqc errors."""


class UnreadableFile(CoverQCError):
    """Volume file missing, truncated, or not a recognized format."""


class SliceCountOutOfRange(CoverQCError):
    """Volume does not have 8, 9 or 10 slices."""


class NonUniformSliceShape(CoverQCError):
    """Slices within one volume differ in height or width."""


class InvalidSliceCount(CoverQCError):
    """Requested phantom slice count outside the supported range."""


class TooFewVolumes(CoverQCError):
    """Fewer distinct volumes than requested folds."""


class InvalidSpec(CoverQCError):
    """Model architecture spec violates its structural invariants."""


class EmptyTrainingSet(CoverQCError):
    """No samples available to train on."""


class NonFiniteLoss(CoverQCError):
    """Training loss became NaN or infinite."""


class ShapeMismatch(CoverQCError):
    """Array shape differs from what the operation requires."""


class CheckpointArchMismatch(CoverQCError):
    """Checkpoint fingerprint does not match the reconstructed architecture."""


class DimensionMismatch(CoverQCError):
    """Perturbation matrix width disagrees with the superpixel count."""


class EmptyCorpus(CoverQCError):
    """No true-positive pairs available for segmenter training."""


class LengthMismatch(CoverQCError):
    """Aligned sequences have different lengths."""


class MissingArtifact(CoverQCError):
    """A pipeline stage requires an artifact a prior stage has not produced."""

    def __init__(self, message: str, required_stage: str):
        super().__init__(message)
        self.required_stage = required_stage


class IOFailure(CoverQCError):
    """Report or artifact could not be written."""


class DegenerateImageWarning(UserWarning):
    """Constant-intensity input collapsed to a single superpixel."""


class ZeroVectorWarning(UserWarning):
    """All-off perturbation has no cosine direction; weight set to 0."""


class RankDeficientWarning(UserWarning):
    """Surrogate design matrix ill-conditioned; ridge penalty was raised."""


class SegmentCountWarning(UserWarning):
    """Superpixel count far from the requested number of segments."""
