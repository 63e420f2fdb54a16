"""Exception hierarchy.

The CLI maps these onto exit codes, so the split between data problems
(bad files, bad labels) and numeric/validation problems (shapes, gradient
checks) matters.
"""


class ViplError(Exception):
    """Base class for every error raised by this package."""


class UsageError(ViplError):
    """API misuse: backward before forward, missing caches, bad arguments."""


class ConfigError(ViplError, ValueError):
    """Invalid hyperparameter or layer parameter."""


class DataError(ViplError):
    """Malformed or inconsistent input data (images, manifests, features)."""


class ShapeError(ViplError, ValueError):
    """Dimension mismatch or non-positive output extent."""


class BatchSizeError(ShapeError):
    """Too few samples to estimate batch statistics."""


class StateCorruptionError(ViplError):
    """Running statistics hold impossible values (e.g. negative variance)."""


class DescriptorError(ViplError):
    """Invalid network descriptor text or structure."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownKindError(DescriptorError):
    pass


class DuplicateNameError(DescriptorError):
    pass


class DanglingEdgeError(DescriptorError):
    pass


class CycleError(DescriptorError):
    def __init__(self, participants):
        self.participants = list(participants)
        super().__init__("cycle detected among layers: " + " -> ".join(self.participants))


class ModelFormatError(DataError):
    """Model container could not be read."""


class MagicError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(f"model file format version {found} is not supported "
                         f"(this build reads version {supported})")


class ChecksumError(ModelFormatError):
    pass
