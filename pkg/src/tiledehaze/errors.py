"""Exception types shared across the package."""


class TileDehazeError(Exception):
    """Base class for all package errors."""


class ConfigError(TileDehazeError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(TileDehazeError, ValueError):
    """Input data (images, manifests, regions) violates a precondition."""


class CheckpointError(TileDehazeError):
    """A checkpoint file could not be read or does not match the model."""


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, supported):
        super().__init__(f"checkpoint format version {found} not supported (expected {supported})")
        self.found = found
        self.supported = supported


class WeightShapeError(CheckpointError):
    def __init__(self, mismatches):
        lines = ", ".join(f"{name}: file {file_shape} vs model {model_shape}"
                          for name, file_shape, model_shape in mismatches)
        super().__init__(f"weight shape mismatch for keys: {lines}")
        self.mismatches = mismatches


class StageMemoryError(TileDehazeError, RuntimeError):
    """Out-of-memory during a pipeline stage; names the stage and load at failure."""

    def __init__(self, stage, token_count, cause=None):
        super().__init__(f"out of memory in stage '{stage}' at {token_count} tokens")
        self.stage = stage
        self.token_count = token_count
        self.cause = cause


class TrainingHalted(TileDehazeError, RuntimeError):
    """Training stopped on a non-finite loss; carries the diagnostic snapshot path."""

    def __init__(self, step, loss, snapshot_path=None):
        super().__init__(f"non-finite loss {loss!r} at step {step}; snapshot: {snapshot_path}")
        self.step = step
        self.loss = loss
        self.snapshot_path = snapshot_path
