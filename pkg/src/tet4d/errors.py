"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so each class carries the code it
should surface as.
"""


class Tet4DError(Exception):
    exit_code = 1


class InvalidArgument(Tet4DError, ValueError):
    exit_code = 2


class EmptyGeometryError(Tet4DError, ValueError):
    exit_code = 5


class OpenSurfaceError(Tet4DError, ValueError):
    exit_code = 5


class DivergedError(Tet4DError, RuntimeError):
    """Raised when an objective turns non-finite.

    ``state`` holds the last finite iterate (a grid or a motion state) so
    callers can still persist it.
    """

    exit_code = 4

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


class DegenerateClassError(Tet4DError, RuntimeError):
    exit_code = 5

    def __init__(self, message, class_id=None):
        super().__init__(message)
        self.class_id = class_id


class NoOverlapError(Tet4DError, RuntimeError):
    exit_code = 5

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class StorageError(Tet4DError, OSError):
    """Unreadable, unwritable or corrupted files."""

    exit_code = 3
