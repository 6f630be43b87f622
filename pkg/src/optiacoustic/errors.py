"""Exception hierarchy shared by every module in the package."""


class OptiAcousticError(Exception):
    """Base class for all errors raised by this package."""


class InvalidPoseError(OptiAcousticError, ValueError):
    """A rigid transform is non-finite or not a proper rotation."""


class InvalidScaleError(OptiAcousticError, ValueError):
    """A scale factor is non-positive or non-finite."""


class ScaleUnavailable(OptiAcousticError):
    """No optical/acoustic depth pairs survived filtering."""


class ScaleUnreliable(OptiAcousticError):
    """RANSAC consensus is below the minimum inlier fraction."""

    def __init__(self, message: str, scale: float, inlier_fraction: float) -> None:
        super().__init__(message)
        self.scale = scale
        self.inlier_fraction = inlier_fraction


class DegenerateRefinement(OptiAcousticError):
    """The pointmap scale refinement has a zero denominator."""


class PredictorInputError(OptiAcousticError, ValueError):
    """Images handed to a pointmap provider violate its input contract."""


class ProviderError(OptiAcousticError):
    """A pointmap provider failed to produce a prediction."""


class ProviderTimeout(ProviderError):
    """An external provider did not answer within its timeout."""


class FormatError(OptiAcousticError):
    """A binary or text file does not match its documented layout."""


class DatasetError(OptiAcousticError):
    """A dataset directory is incomplete or inconsistent with its manifest."""


class ConfigError(OptiAcousticError):
    """A configuration file or value failed validation."""


class InitializationFailed(OptiAcousticError):
    """No frame of a sequence could be installed as the first keyframe."""
