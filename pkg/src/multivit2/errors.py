"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes, so every failure a user can trigger
should surface as one of them.
"""


class MultiViT2Error(Exception):
    exit_code = 1


class DataError(MultiViT2Error, ValueError):
    """Malformed or invalid input data (files, matrices, manifests)."""


class ShapeError(MultiViT2Error, ValueError):
    pass


class ConfigError(MultiViT2Error, ValueError):
    pass


class MissingArtifactError(MultiViT2Error, FileNotFoundError):
    """An upstream stage has not produced the artifact a command needs."""

    exit_code = 2

    def __init__(self, stage: str, path=None):
        self.stage = stage
        self.path = path
        msg = f"missing upstream artifact from stage '{stage}'"
        if path is not None:
            msg += f" (expected {path})"
        super().__init__(msg)


class NonFiniteError(MultiViT2Error, FloatingPointError):
    """NaN/Inf showed up in an activation, loss or gradient."""

    exit_code = 3


class LeakageError(MultiViT2Error, AssertionError):
    """An augmented or training record reached an evaluation split."""

    exit_code = 3
