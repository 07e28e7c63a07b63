"""Exception hierarchy shared by every emoscore module."""


class EmoscoreError(Exception):
    """Base class for all errors raised by emoscore."""


class ValidationError(EmoscoreError, ValueError):
    """A value violates a domain invariant (non-finite, out of range, bad shape)."""


class FormatError(EmoscoreError):
    """A file does not follow the expected on-disk layout."""


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header declares."""


class ManifestError(EmoscoreError):
    """A manifest or score table is malformed or inconsistent."""


class CheckpointError(FormatError):
    """A checkpoint cannot be decoded or does not match the expected model."""


class FusionError(EmoscoreError):
    """Score tables cannot be fused (misaligned ids, bad weights, ...)."""


class TrainingError(EmoscoreError):
    """Training diverged or was misconfigured."""
