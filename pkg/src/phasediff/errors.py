"""Exception hierarchy shared across the package."""


class PhasediffError(Exception):
    """Base class; the CLI maps these to a JSON error object and exit code 1."""


class ShapeError(PhasediffError):
    """Raised when tensor shapes are inconsistent with an operation."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class GraphError(PhasediffError):
    """Invalid use of the differentiation machinery (non-scalar loss, empty batch, ...)."""


class ScheduleError(PhasediffError):
    """Invalid diffusion-schedule construction or timestep out of range."""


class DataError(PhasediffError):
    """Corpus file or manifest violation; carries path/row context."""

    def __init__(self, message: str, path=None, row=None):
        self.path = str(path) if path is not None else None
        self.row = row
        loc = ""
        if self.path is not None:
            loc = f" [{self.path}" + (f", row {row}]" if row is not None else "]")
        super().__init__(message + loc)


class ConfigError(PhasediffError):
    """Malformed run configuration (unknown keys, bad values)."""


class CheckpointError(PhasediffError):
    """Corrupt or version-incompatible checkpoint."""


class DivergenceError(PhasediffError):
    """Training diverged (non-finite or exploding loss)."""
