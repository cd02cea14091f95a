"""
Errors - Exception hierarchy shared by every pipeline stage.
"""


class LayerPruneError(Exception):
    """Base class for all errors raised by layerprune."""


class ShapeError(LayerPruneError):
    """Operand shapes are incompatible."""


class NumericError(LayerPruneError):
    """Non-finite values or invalid probability distributions."""


class PreconditionError(LayerPruneError):
    """An operation was called with arguments outside its domain."""


class InputError(LayerPruneError):
    """Token ids or prompts the model cannot accept."""


class ConfigError(LayerPruneError):
    """Invalid or unreadable configuration."""


class PlanError(LayerPruneError):
    """A prune plan violates one of its invariants."""

    def __init__(self, invariant: str, detail: str):
        self.invariant = invariant
        super().__init__(f"[{invariant}] {detail}")


class CheckpointError(LayerPruneError):
    """Checkpoint container is malformed or incompatible."""


class ReportParseError(LayerPruneError):
    """A report input file could not be parsed."""

    def __init__(self, path: str, line: int, detail: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {detail}")


class TrainingDivergedError(LayerPruneError):
    """A loss term became non-finite during training."""

    def __init__(self, step: int, term: str, value: float):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term '{term}' ({value}) at step {step}")
