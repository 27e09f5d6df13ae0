"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the exit code the CLI reports for it: 1 for problems with the
user's input (files, flags, configuration), 2 for failures while running.
"""


class PQError(Exception):
    exit_code = 2


class ValidationError(PQError):
    exit_code = 1


class FormatError(ValidationError):
    """A dataset or label file does not follow its documented layout."""


class ConfigurationError(ValidationError):
    pass


class DegenerateInputError(PQError):
    """Statistics cannot be fitted, e.g. an all-zero MSCN plane."""


class InsufficientDataError(PQError):
    pass


class SingularMatrixError(PQError):
    pass


class TrainingError(PQError):
    pass


class CheckpointError(PQError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass
