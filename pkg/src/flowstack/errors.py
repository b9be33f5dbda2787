class FlowStackError(Exception):
    """Base class for all flowstack errors."""


class DataError(FlowStackError):
    """Bad input data: unusable log file, single-class dataset, etc."""


class TrainingError(FlowStackError):
    """Training failed; the message names the layer/learner and position."""


class ModelFormatError(FlowStackError):
    """Model file is missing, corrupted, or has the wrong format version."""


class EmitError(FlowStackError):
    """Code emission cannot proceed (e.g. tree too deep for nested mode)."""
