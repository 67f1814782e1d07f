"""Exception hierarchy shared by every stage of the pipeline.

The command line maps these onto exit codes, so each class carries the
code it should terminate with.
"""


class VprdbError(Exception):
    exit_code = 3


class ConfigError(VprdbError, ValueError):
    """Invalid parameter or configuration value."""

    exit_code = 1


class InputError(VprdbError):
    """Unreadable, missing or malformed input data."""

    exit_code = 2


class InvalidDepthError(InputError, ValueError):
    pass


class ShapeError(InputError, ValueError):
    pass


class DegenerateFrameError(VprdbError, ValueError):
    """A frame without any observed voxel was used as a query."""

    exit_code = 3


class PipelineError(VprdbError):
    exit_code = 2


class InternalConsistencyError(VprdbError, RuntimeError):
    """An invariant that upstream stages guarantee did not hold."""

    exit_code = 3
