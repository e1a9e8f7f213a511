"""Exception types shared across the package."""


class DscError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(DscError):
    """Operand shapes are incompatible with the requested operation."""


class BadAxis(DscError):
    """Axis argument out of range for the operand rank."""


class EvenKernel(DscError):
    """Convolutions require odd kernel extents so same-padding is symmetric."""


class OddChannels(DscError):
    """The multi-scale kernel module needs an even channel count."""


class OddExtent(DscError):
    """2x pooling needs even spatial extents."""


class BadInputSize(DscError):
    """Network input does not satisfy the downsampling divisibility rule."""


class NotScalarLoss(DscError):
    """backward() must start from a rank-0 tensor."""


class DisconnectedTape(DscError):
    """A leaf requested in strict mode has no path to the loss."""


class NonDeterministicFn(DscError):
    """Two forward passes of a checked function disagreed."""


class NonFiniteValue(DscError):
    """An operation produced NaN/Inf while debug checks were enabled."""


class TensorFileError(DscError):
    """Malformed tensor file."""


class BadMagic(TensorFileError):
    """Tensor file does not start with the expected header bytes."""


class BadDtype(TensorFileError):
    """Tensor file carries an unknown scalar type code."""


class TruncatedPayload(TensorFileError):
    """Tensor file ends before the declared payload is complete."""


class ManifestMismatch(DscError):
    """Checkpoint parameter names/shapes do not match the model registry."""


class BadConfig(DscError):
    """Invalid generator or module configuration value."""


class BadMask(DscError):
    """Segmentation mask contains ids outside the class range."""


class NonFiniteLoss(DscError):
    """Training loss became NaN/Inf; aborted with a diagnostic dump."""


class ConfigError(DscError):
    """Run configuration failed schema validation."""
